"""Spherical distance helpers shared by every module."""

from __future__ import annotations

import math
from typing import Sequence

EARTH_RADIUS_KM = 6371.0088
KM_PER_DEG_LAT = math.pi * EARTH_RADIUS_KM / 180.0

LatLon = tuple[float, float]


def haversine(a: LatLon, b: LatLon) -> float:
    """Great-circle distance in km between two (lat, lon) pairs."""
    lat1, lon1 = a
    lat2, lon2 = b
    if lat1 == lat2 and lon1 == lon2:
        return 0.0
    p1 = math.radians(lat1)
    p2 = math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    # clamp guards asin against h drifting past 1 for antipodes
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def valid_coordinate(lat: float, lon: float) -> bool:
    return (
        math.isfinite(lat)
        and math.isfinite(lon)
        and -90.0 <= lat <= 90.0
        and -180.0 <= lon <= 180.0
    )


class LocalProjection:
    """Equirectangular km offsets from a south-west origin.

    Used for grids (pseudo-regions, STVD cells). Not a distance metric.
    """

    def __init__(self, lat0: float, lon0: float, lat_ref: float):
        self.lat0 = lat0
        self.lon0 = lon0
        self.km_per_deg_lon = KM_PER_DEG_LAT * math.cos(math.radians(lat_ref))

    @classmethod
    def for_points(cls, coords: Sequence[LatLon]) -> "LocalProjection":
        lats = [c[0] for c in coords]
        lons = [c[1] for c in coords]
        return cls(min(lats), min(lons), (min(lats) + max(lats)) / 2)

    def to_km(self, lat: float, lon: float) -> tuple[float, float]:
        """(east_km, north_km) relative to the origin."""
        return (lon - self.lon0) * self.km_per_deg_lon, (lat - self.lat0) * KM_PER_DEG_LAT

    def cell(self, lat: float, lon: float, size_km: float) -> tuple[int, int]:
        x, y = self.to_km(lat, lon)
        return math.floor(x / size_km), math.floor(y / size_km)


def point_in_polygon(lat: float, lon: float, polygon: Sequence[LatLon]) -> bool:
    """Ray casting with a bounding-box pre-check; polygon is a (lat, lon) ring."""
    if len(polygon) < 3:
        return False
    lats = [p[0] for p in polygon]
    lons = [p[1] for p in polygon]
    if not (min(lats) <= lat <= max(lats) and min(lons) <= lon <= max(lons)):
        return False
    inside = False
    j = len(polygon) - 1
    for i in range(len(polygon)):
        yi, xi = polygon[i]
        yj, xj = polygon[j]
        if (yi > lat) != (yj > lat):
            x_cross = xi + (lat - yi) * (xj - xi) / (yj - yi)
            if lon < x_cross:
                inside = not inside
        j = i
    return inside


def interpolate_segment(a: LatLon, b: LatLon, step_km: float) -> list[LatLon]:
    """Points along a->b every step_km (linear in lat/lon), both ends included."""
    d = haversine(a, b)
    n = max(1, math.ceil(d / step_km))
    return [
        (a[0] + (b[0] - a[0]) * i / n, a[1] + (b[1] - a[1]) * i / n) for i in range(n + 1)
    ]
