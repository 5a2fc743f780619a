"""City model: POIs, regions and roads behind an immutable spatial index."""

from __future__ import annotations

import csv
import json
import logging
import math
import unicodedata
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence

import networkx as nx

from .geo import (
    EARTH_RADIUS_KM,
    KM_PER_DEG_LAT,
    LatLon,
    LocalProjection,
    haversine,
    interpolate_segment,
    point_in_polygon,
    valid_coordinate,
)

log = logging.getLogger(__name__)

LEVELS = ("admin", "subdistrict", "street")
GRID_SIZES_KM = {"admin": 8.0, "subdistrict": 2.0, "street": 0.5}
_GRID_PREFIX = {"admin": ("A", "Area"), "subdistrict": ("S", "Subdistrict"), "street": ("T", "Block")}
_INDEX_CELL_DEG = 0.01
_NODE_DECIMALS = 7


class IngestError(ValueError):
    """Malformed input. Carries the file, line and field when known."""

    def __init__(self, message: str, path=None, line: Optional[int] = None, field: Optional[str] = None):
        self.path = str(path) if path is not None else None
        self.line = line
        self.field = field
        where = ", ".join(
            part
            for part in (
                f"file {self.path}" if self.path else "",
                f"line {line}" if line is not None else "",
                f"field {field!r}" if field else "",
            )
            if part
        )
        super().__init__(f"{message} ({where})" if where else message)


class NotFoundError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class UnsupportedRepresentation(ValueError):
    pass


def normalize_name(name: str) -> str:
    """Case-fold and collapse whitespace; the matching key for every toponym lookup."""
    return " ".join(unicodedata.normalize("NFKC", name).casefold().split())


@dataclass(frozen=True)
class Poi:
    id: str
    name: str
    category: str
    lat: float
    lon: float
    region_path: tuple[str, str, str, str]
    population_weight: float = 1.0

    def __post_init__(self):
        if not valid_coordinate(self.lat, self.lon):
            raise ValueError(f"POI {self.id}: coordinate out of range ({self.lat}, {self.lon})")
        if len(self.region_path) != 4:
            raise ValueError(f"POI {self.id}: region_path must have 4 entries")
        if not (self.population_weight >= 0):
            raise ValueError(f"POI {self.id}: population_weight must be >= 0")

    @property
    def coord(self) -> LatLon:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class Region:
    id: str
    name: str
    level: str
    parent_id: Optional[str] = None
    boundary: Optional[tuple[LatLon, ...]] = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"region {self.id}: unknown level {self.level!r}")
        if self.level != "admin" and not self.parent_id:
            raise ValueError(f"region {self.id}: non-admin region needs a parent")


@dataclass(frozen=True)
class RoadEdge:
    u: int
    v: int
    name: str
    length_km: float


@dataclass(frozen=True)
class RoadGraph:
    nodes: tuple[LatLon, ...] = ()
    edges: tuple[RoadEdge, ...] = ()

    @classmethod
    def from_segments(cls, segments: Iterable[tuple[str, LatLon, LatLon]]) -> "RoadGraph":
        node_ids: dict[LatLon, int] = {}
        nodes: list[LatLon] = []
        edges: list[RoadEdge] = []

        def node(c: LatLon) -> int:
            key = (round(c[0], _NODE_DECIMALS), round(c[1], _NODE_DECIMALS))
            if key not in node_ids:
                node_ids[key] = len(nodes)
                nodes.append(key)
            return node_ids[key]

        for name, a, b in segments:
            u, v = node(a), node(b)
            length = haversine(nodes[u], nodes[v])
            if u == v or length == 0.0:
                raise ValueError(f"zero-length road segment on {name!r}")
            edges.append(RoadEdge(u, v, name, length))
        return cls(tuple(nodes), tuple(edges))

    @cached_property
    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(len(self.nodes)))
        for e in self.edges:
            if not g.has_edge(e.u, e.v) or g[e.u][e.v]["length"] > e.length_km:
                g.add_edge(e.u, e.v, length=e.length_km, name=e.name)
        return g

    @cached_property
    def intersections(self) -> dict[int, tuple[str, ...]]:
        """node -> sorted distinct road names, for nodes joining >= 2 named roads."""
        names: dict[int, set[str]] = defaultdict(set)
        for e in self.edges:
            if e.name.strip():
                names[e.u].add(e.name)
                names[e.v].add(e.name)
        return {n: tuple(sorted(s)) for n, s in names.items() if len(s) >= 2}

    def nearest_node(self, c: LatLon, among: Optional[Iterable[int]] = None) -> tuple[int, float]:
        candidates = range(len(self.nodes)) if among is None else among
        best = min(((haversine(c, self.nodes[n]), n) for n in candidates), default=None)
        if best is None:
            raise UnsupportedRepresentation("road graph has no nodes")
        return best[1], best[0]

    def shortest_route(self, a: LatLon, b: LatLon) -> Optional[list[LatLon]]:
        """Vertex list a -> nearest node ... nearest node -> b, or None when unreachable."""
        if not self.edges:
            return None
        na, _ = self.nearest_node(a)
        nb, _ = self.nearest_node(b)
        try:
            path = nx.shortest_path(self.graph, na, nb, weight="length")
        except nx.NetworkXNoPath:
            return None
        return [a] + [self.nodes[n] for n in path] + [b]


class SpatialIndex:
    """Immutable store of POIs, regions and roads with radius/category queries."""

    def __init__(
        self,
        pois: Sequence[Poi],
        regions: Sequence[Region],
        roads: RoadGraph = RoadGraph(),
        pseudo_hierarchy: bool = False,
    ):
        ordered = sorted(pois, key=lambda p: p.id)
        by_id: dict[str, Poi] = {}
        for p in ordered:
            if p.id in by_id:
                raise ValueError(f"duplicate POI id {p.id!r}")
            by_id[p.id] = p
        self._pois = tuple(ordered)
        self._by_id = MappingProxyType(by_id)
        self.roads = roads
        self.pseudo_hierarchy = pseudo_hierarchy

        per_level: dict[str, dict[str, Region]] = {lvl: {} for lvl in LEVELS}
        for r in regions:
            if r.id in per_level[r.level]:
                raise ValueError(f"duplicate {r.level} region id {r.id!r}")
            per_level[r.level][r.id] = r
        for lvl_i, lvl in enumerate(LEVELS[1:], start=1):
            parent_level = per_level[LEVELS[lvl_i - 1]]
            for r in per_level[lvl].values():
                if r.parent_id not in parent_level:
                    raise ValueError(
                        f"{lvl} region {r.id!r} references missing {LEVELS[lvl_i - 1]} {r.parent_id!r}"
                    )
        self._regions = MappingProxyType({k: MappingProxyType(v) for k, v in per_level.items()})

        children: dict[tuple[str, Optional[str]], list[str]] = defaultdict(list)
        for lvl in LEVELS:
            for r in per_level[lvl].values():
                children[(lvl, r.parent_id if lvl != "admin" else None)].append(r.id)
        self._children = {k: tuple(sorted(v)) for k, v in children.items()}

        street_pois: dict[str, list[str]] = defaultdict(list)
        for p in self._pois:
            street_pois[p.region_path[2]].append(p.id)
        self._street_pois = {k: tuple(v) for k, v in street_pois.items()}

        grid: dict[tuple[int, int], list[int]] = defaultdict(list)
        for i, p in enumerate(self._pois):
            grid[self._cell(p.lat, p.lon)].append(i)
        self._grid = dict(grid)

        names: dict[str, list[str]] = defaultdict(list)
        for p in self._pois:
            names[normalize_name(p.name)].append(p.id)
        self._poi_names = {k: tuple(v) for k, v in names.items()}
        self._toponyms = frozenset(
            list(self._poi_names)
            + [normalize_name(e.name) for e in roads.edges if e.name.strip()]
            + [normalize_name(r.name) for lvl in LEVELS for r in per_level[lvl].values()]
        )

    @staticmethod
    def _cell(lat: float, lon: float) -> tuple[int, int]:
        return math.floor(lat / _INDEX_CELL_DEG), math.floor(lon / _INDEX_CELL_DEG)

    # ---- lookups -------------------------------------------------------
    @property
    def pois(self) -> tuple[Poi, ...]:
        return self._pois

    def poi(self, poi_id: str) -> Poi:
        try:
            return self._by_id[poi_id]
        except KeyError:
            raise NotFoundError(f"unknown POI id {poi_id!r}") from None

    def has_poi(self, poi_id: Optional[str]) -> bool:
        return poi_id is not None and poi_id in self._by_id

    def region(self, level: str, region_id: str) -> Region:
        try:
            return self._regions[level][region_id]
        except KeyError:
            raise NotFoundError(f"unknown {level} region {region_id!r}") from None

    def regions(self, level: str) -> tuple[Region, ...]:
        return tuple(self._regions[level][k] for k in sorted(self._regions[level]))

    def children(self, level: str, parent_id: Optional[str]) -> tuple[str, ...]:
        """Ids of regions at `level` whose parent is `parent_id` (None for admin)."""
        return self._children.get((level, parent_id), ())

    def pois_in_street(self, street_id: str) -> tuple[str, ...]:
        return self._street_pois.get(street_id, ())

    def pois_by_name(self, name: str) -> tuple[str, ...]:
        return self._poi_names.get(normalize_name(name), ())

    def categories(self) -> tuple[str, ...]:
        return tuple(sorted({p.category for p in self._pois}))

    @cached_property
    def bbox(self) -> tuple[float, float, float, float]:
        """(min_lat, min_lon, max_lat, max_lon) over all POIs."""
        lats = [p.lat for p in self._pois]
        lons = [p.lon for p in self._pois]
        return min(lats), min(lons), max(lats), max(lons)

    # ---- queries -------------------------------------------------------
    def pois_within_radius(
        self, center: LatLon, radius_km: float, category: Optional[str] = None
    ) -> list[Poi]:
        """POIs with haversine(center, poi) <= radius_km, nearest first, ties by id."""
        if not radius_km > 0:
            raise ValueError("radius_km must be > 0")
        lat, lon = center
        dlat = radius_km / KM_PER_DEG_LAT
        lat_lo, lat_hi = lat - dlat, lat + dlat
        candidates: Iterable[int]
        ang = radius_km / EARTH_RADIUS_KM
        cos_edge = math.cos(math.radians(min(90.0, max(abs(lat_lo), abs(lat_hi)))))
        if ang >= math.pi / 2 or lat_hi >= 90 or lat_lo <= -90 or math.sin(ang) >= cos_edge:
            candidates = range(len(self._pois))
        else:
            dlon = math.degrees(math.asin(math.sin(ang) / cos_edge))
            if lon - dlon < -180 or lon + dlon > 180:
                candidates = range(len(self._pois))
            else:
                i0, j0 = self._cell(lat_lo, lon - dlon)
                i1, j1 = self._cell(lat_hi, lon + dlon)
                found: list[int] = []
                # one cell of slack on each side absorbs float edge effects
                for i in range(i0 - 1, i1 + 2):
                    for j in range(j0 - 1, j1 + 2):
                        found.extend(self._grid.get((i, j), ()))
                candidates = found
        hits = []
        for idx in candidates:
            p = self._pois[idx]
            if category is not None and p.category != category:
                continue
            d = haversine(center, p.coord)
            if d <= radius_km:
                hits.append((d, p.id, p))
        hits.sort(key=lambda t: (t[0], t[1]))
        return [h[2] for h in hits]

    def nearest_pois(self, center: LatLon, k: int, category: Optional[str] = None) -> list[Poi]:
        pool = [p for p in self._pois if category is None or p.category == category]
        pool.sort(key=lambda p: (haversine(center, p.coord), p.id))
        return pool[:k]

    # ---- address renderings -------------------------------------------
    def hierarchical_address(self, poi_id: str) -> str:
        p = self.poi(poi_id)
        parts = [self.region(lvl, rid).name for lvl, rid in zip(LEVELS, p.region_path[:3])]
        return ", ".join(parts + [p.name])

    def human_address(self, poi_id: str) -> str:
        p = self.poi(poi_id)
        inter = self.roads.intersections
        if not inter:
            raise UnsupportedRepresentation(
                "human-intuitive addresses need a road graph with at least one named intersection"
            )
        node, dist = self.roads.nearest_node(p.coord, among=sorted(inter))
        a, b = inter[node][:2]
        return f"{round(dist * 1000)} meters from the intersection of {a} and {b}"

    def address(self, poi_id: str, style: str = "hierarchical") -> str:
        if style == "hierarchical":
            return self.hierarchical_address(poi_id)
        if style == "human":
            return f"{self.poi(poi_id).name} ({self.human_address(poi_id)})"
        raise UnsupportedRepresentation(f"unknown address style {style!r}")

    def validate_toponym(self, name: str) -> bool:
        return normalize_name(name) in self._toponyms

    def route(self, a: LatLon, b: LatLon, step_km: float = 0.2) -> list[LatLon]:
        """Road shortest path when reachable, else the straight segment; sampled every step_km."""
        vertices = self.roads.shortest_route(a, b) or [a, b]
        out: list[LatLon] = []
        for u, v in zip(vertices, vertices[1:]):
            if u == v:
                continue
            seg = interpolate_segment(u, v, step_km)
            out.extend(seg if not out else seg[1:])
        return out or [a]


# ---------------------------------------------------------------------------
# ingestion


def _read_csv(path: Path, required: Sequence[str]) -> list[tuple[int, dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise IngestError("missing column", path, 1, col)
        return [(i, row) for i, row in enumerate(reader, start=2)]


def _float(row: Mapping[str, str], key: str, path, line) -> float:
    raw = (row.get(key) or "").strip()
    try:
        val = float(raw)
    except ValueError:
        raise IngestError(f"not a number: {raw!r}", path, line, key) from None
    if not math.isfinite(val):
        raise IngestError(f"not finite: {raw!r}", path, line, key)
    return val


def _check_coord(lat: float, lon: float, path, line) -> None:
    if not -90 <= lat <= 90:
        raise IngestError(f"latitude out of range: {lat}", path, line, "lat")
    if not -180 <= lon <= 180:
        raise IngestError(f"longitude out of range: {lon}", path, line, "lon")


@dataclass
class _PoiRow:
    id: str
    name: str
    category: str
    lat: float
    lon: float
    admin: str = ""
    subdistrict: str = ""
    street: str = ""
    population_weight: float = 1.0
    line: int = 0


def _poi_row(props: Mapping[str, str], path, line) -> _PoiRow:
    pid = str(props.get("id") or "").strip()
    if not pid:
        raise IngestError("empty id", path, line, "id")
    lat = _float(props, "lat", path, line)
    lon = _float(props, "lon", path, line)
    _check_coord(lat, lon, path, line)
    weight = 1.0
    if str(props.get("population_weight") or "").strip():
        weight = _float(props, "population_weight", path, line)
        if weight < 0:
            raise IngestError("negative weight", path, line, "population_weight")
    return _PoiRow(
        id=pid,
        name=str(props.get("name") or "").strip(),
        category=str(props.get("category") or "").strip(),
        lat=lat,
        lon=lon,
        admin=str(props.get("admin") or "").strip(),
        subdistrict=str(props.get("subdistrict") or "").strip(),
        street=str(props.get("street") or "").strip(),
        population_weight=weight,
        line=line,
    )


def _load_geojson(path: Path) -> list[tuple[int, dict, Optional[dict]]]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    feats = doc.get("features") if isinstance(doc, dict) else None
    if not isinstance(feats, list):
        raise IngestError("not a GeoJSON FeatureCollection", path, None, "features")
    # GeoJSON has no lines; report the 1-based feature index instead
    return [(i, dict(f.get("properties") or {}), f.get("geometry")) for i, f in enumerate(feats, start=1)]


def _read_pois(path: Path) -> list[_PoiRow]:
    rows: list[_PoiRow] = []
    if path.suffix.lower() in (".geojson", ".json"):
        for i, props, geom in _load_geojson(path):
            if geom and geom.get("type") == "Point" and ("lat" not in props or "lon" not in props):
                props.setdefault("lon", geom["coordinates"][0])
                props.setdefault("lat", geom["coordinates"][1])
            props = {k: "" if v is None else str(v) for k, v in props.items()}
            rows.append(_poi_row(props, path, i))
    else:
        for line, row in _read_csv(path, ("id", "name", "category", "lat", "lon")):
            rows.append(_poi_row(row, path, line))
    seen: set[str] = set()
    for r in rows:
        if r.id in seen:
            raise IngestError(f"duplicate POI id {r.id!r}", path, r.line, "id")
        seen.add(r.id)
    return rows


def _read_regions(path: Path) -> list[Region]:
    out: list[Region] = []
    if path.suffix.lower() in (".geojson", ".json"):
        entries = []
        for i, props, geom in _load_geojson(path):
            ring = None
            if geom and geom.get("type") == "Polygon" and geom.get("coordinates"):
                ring = tuple((float(c[1]), float(c[0])) for c in geom["coordinates"][0])
            entries.append((i, {k: "" if v is None else str(v) for k, v in props.items()}, ring))
    else:
        entries = [(line, row, None) for line, row in _read_csv(path, ("id", "name", "level", "parent_id"))]
    for line, row, ring in entries:
        level = (row.get("level") or "").strip()
        if level not in LEVELS:
            raise IngestError(f"unknown level {level!r}", path, line, "level")
        rid = (row.get("id") or "").strip()
        if not rid:
            raise IngestError("empty id", path, line, "id")
        parent = (row.get("parent_id") or "").strip() or None
        if level != "admin" and parent is None:
            raise IngestError("non-admin region without parent", path, line, "parent_id")
        out.append(Region(rid, (row.get("name") or rid).strip(), level, parent if level != "admin" else None, ring))
    return out


def _read_roads(path: Path) -> RoadGraph:
    segments = []
    for line, row in _read_csv(path, ("road_name", "lat1", "lon1", "lat2", "lon2")):
        lat1, lon1 = _float(row, "lat1", path, line), _float(row, "lon1", path, line)
        lat2, lon2 = _float(row, "lat2", path, line), _float(row, "lon2", path, line)
        for la, lo, fl in ((lat1, lon1, "lat1"), (lat2, lon2, "lat2")):
            if not valid_coordinate(la, lo):
                raise IngestError("coordinate out of range", path, line, fl)
        a = (round(lat1, _NODE_DECIMALS), round(lon1, _NODE_DECIMALS))
        b = (round(lat2, _NODE_DECIMALS), round(lon2, _NODE_DECIMALS))
        if a == b:
            raise IngestError("zero-length segment", path, line, "lat2")
        segments.append(((row.get("road_name") or "").strip(), a, b))
    return RoadGraph.from_segments(segments)


def grid_regions(rows: Sequence[tuple[str, float, float]]) -> tuple[list[Region], dict[str, tuple[str, str, str]]]:
    """Nested square-grid pseudo-hierarchy for POIs given as (id, lat, lon).

    Returns the regions and poi_id -> (admin, subdistrict, street) ids.
    """
    proj = LocalProjection.for_points([(lat, lon) for _, lat, lon in rows])
    regions: dict[tuple[str, str], Region] = {}
    paths: dict[str, tuple[str, str, str]] = {}
    for pid, lat, lon in rows:
        ids = []
        parent = None
        for lvl in LEVELS:
            x, y = proj.cell(lat, lon, GRID_SIZES_KM[lvl])
            prefix, label = _GRID_PREFIX[lvl]
            rid = f"{prefix}{x}_{y}"
            regions.setdefault((lvl, rid), Region(rid, f"{label} {x}-{y}", lvl, parent))
            ids.append(rid)
            parent = rid
        paths[pid] = (ids[0], ids[1], ids[2])
    return list(regions.values()), paths


def ingest_city(poi_file, region_file=None, road_file=None) -> SpatialIndex:
    """Build a SpatialIndex from POI / region / road files (CSV or GeoJSON)."""
    poi_path = Path(poi_file)
    rows = _read_pois(poi_path)
    if not rows:
        raise IngestError("no POIs", poi_path)
    roads = _read_roads(Path(road_file)) if road_file else RoadGraph()

    pseudo = False
    if region_file:
        regions = _read_regions(Path(region_file))
        by_level = {lvl: {r.id: r for r in regions if r.level == lvl} for lvl in LEVELS}
        paths: dict[str, tuple[str, str, str]] = {}
        bad: list[str] = []
        streets_with_shape = [r for r in by_level["street"].values() if r.boundary]
        for r in rows:
            if r.street:
                path = (r.admin, r.subdistrict, r.street)
            elif streets_with_shape:
                hit = next(
                    (s for s in sorted(streets_with_shape, key=lambda s: s.id)
                     if point_in_polygon(r.lat, r.lon, s.boundary)),
                    None,
                )
                if hit is None:
                    bad.append(r.id)
                    continue
                sub = by_level["subdistrict"].get(hit.parent_id)
                path = (sub.parent_id if sub else "", hit.parent_id or "", hit.id)
            else:
                bad.append(r.id)
                continue
            street = by_level["street"].get(path[2])
            sub = by_level["subdistrict"].get(path[1])
            if (
                street is None
                or sub is None
                or path[0] not in by_level["admin"]
                or street.parent_id != path[1]
                or sub.parent_id != path[0]
            ):
                bad.append(r.id)
                continue
            paths[r.id] = path
        if bad:
            raise IngestError(f"dangling region references for POIs: {', '.join(sorted(bad))}", poi_path)
    elif rows and all(r.admin and r.subdistrict and r.street for r in rows):
        # region names inline in the POI file: derive the tree from them
        regions_map: dict[tuple[str, str], Region] = {}
        paths = {}
        for r in rows:
            a, s, t = r.admin, f"{r.admin}/{r.subdistrict}", f"{r.admin}/{r.subdistrict}/{r.street}"
            regions_map.setdefault(("admin", a), Region(a, r.admin, "admin"))
            regions_map.setdefault(("subdistrict", s), Region(s, r.subdistrict, "subdistrict", a))
            regions_map.setdefault(("street", t), Region(t, r.street, "street", s))
            paths[r.id] = (a, s, t)
        regions = list(regions_map.values())
    else:
        regions, paths = grid_regions([(r.id, r.lat, r.lon) for r in rows])
        pseudo = True

    pois = [
        Poi(r.id, r.name, r.category, r.lat, r.lon, (*paths[r.id], r.id), r.population_weight)
        for r in rows
    ]
    log.info("ingested %d POIs, %d regions, %d road edges", len(pois), len(regions), len(roads.edges))
    return SpatialIndex(pois, regions, roads, pseudo_hierarchy=pseudo)


def write_pois(index: SpatialIndex, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "name", "category", "lat", "lon", "admin", "subdistrict", "street", "population_weight"])
        for p in index.pois:
            w.writerow([p.id, p.name, p.category, repr(p.lat), repr(p.lon), *p.region_path[:3], repr(p.population_weight)])


def write_regions(index: SpatialIndex, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "name", "level", "parent_id"])
        for lvl in LEVELS:
            for r in index.regions(lvl):
                w.writerow([r.id, r.name, r.level, r.parent_id or ""])
