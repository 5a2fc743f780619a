"""User profiles, trajectories, intents and their CSV formats."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .urban import IngestError, SpatialIndex

log = logging.getLogger(__name__)

PROFILE_FIELDS = ("age", "gender", "income", "education", "occupation", "home_hint")
TRAJECTORY_FIELDS = ("user_id", "timestamp_iso8601", "poi_id", "lat", "lon", "category")
DEFAULT_UTC_OFFSET_HOURS = 8.0

INTENTS = (
    "dining",
    "work",
    "home",
    "shopping",
    "recreation",
    "education",
    "medical",
    "transit",
    "sports",
    "other",
)
UNKNOWN_INTENT = "unknown"

DEFAULT_INTENT_TABLE = {
    "Food": "dining",
    "Restaurant": "dining",
    "Cafe": "dining",
    "Office": "work",
    "Professional & Other Places": "work",
    "Company": "work",
    "Residence": "home",
    "Residential": "home",
    "Shop & Service": "shopping",
    "Shopping": "shopping",
    "Arts & Entertainment": "recreation",
    "Nightlife Spot": "recreation",
    "Outdoors & Recreation": "recreation",
    "Park": "recreation",
    "College & University": "education",
    "School": "education",
    "Hospital": "medical",
    "Medical": "medical",
    "Travel & Transport": "transit",
    "Transit": "transit",
    "Sports": "sports",
    "Gym": "sports",
}


class DataError(ValueError):
    pass


def tz_for(offset_hours: float) -> timezone:
    return timezone(timedelta(hours=offset_hours))


# ---------------------------------------------------------------------------
# intents


@dataclass(frozen=True)
class IntentMap:
    table: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_INTENT_TABLE))
    default: str = "other"

    def intent_of(self, category: Optional[str]) -> str:
        if not category:
            return UNKNOWN_INTENT
        return self.table.get(category, self.default)

    def categories_for(self, intent: str) -> tuple[str, ...]:
        return tuple(sorted(c for c, i in self.table.items() if i == intent))

    @classmethod
    def load(cls, path) -> "IntentMap":
        table: dict[str, str] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for col in ("category", "intent"):
                if col not in (reader.fieldnames or []):
                    raise IngestError("missing column", path, 1, col)
            for line, row in enumerate(reader, start=2):
                cat, intent = row["category"].strip(), row["intent"].strip()
                if not cat or not intent:
                    raise IngestError("empty category or intent", path, line, "intent")
                table[cat] = intent
        return cls(table)

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", "intent"])
            for cat in sorted(self.table):
                w.writerow([cat, self.table[cat]])


# ---------------------------------------------------------------------------
# profiles


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    attributes: tuple[tuple[str, str], ...]

    def __post_init__(self):
        for key, _ in self.attributes:
            if key not in PROFILE_FIELDS:
                raise DataError(f"unknown profile attribute {key!r}")

    @property
    def attrs(self) -> dict[str, str]:
        return dict(self.attributes)

    def render(self) -> str:
        return "; ".join(f"{k.replace('_', ' ')}: {v}" for k, v in self.attributes if v != "")


def load_profiles(path) -> list[UserProfile]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "user_id" not in header:
            raise IngestError("missing column", path, 1, "user_id")
        unknown = [c for c in header if c != "user_id" and c not in PROFILE_FIELDS]
        if unknown:
            raise IngestError(f"unknown attribute key {unknown[0]!r}", path, 1, unknown[0])
        rows = list(enumerate(reader, start=2))
    profiles: list[UserProfile] = []
    seen: dict[str, int] = {}
    dupes: list[str] = []
    for line, row in rows:
        uid = (row.get("user_id") or "").strip()
        if not uid:
            raise IngestError("empty user_id", path, line, "user_id")
        if uid in seen:
            dupes.append(uid)
            continue
        seen[uid] = line
        attrs = tuple((k, (row.get(k) or "").strip()) for k in PROFILE_FIELDS if k in header)
        profiles.append(UserProfile(uid, attrs))
    if dupes:
        raise DataError(f"duplicate user_id: {', '.join(sorted(set(dupes)))}")
    return profiles


def write_profiles(profiles: Iterable[UserProfile], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", *PROFILE_FIELDS])
        for p in profiles:
            a = p.attrs
            w.writerow([p.user_id, *(a.get(k, "") for k in PROFILE_FIELDS)])


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class TrajectoryPoint:
    timestamp: float
    lat: float
    lon: float
    intent: str
    poi_id: Optional[str] = None
    category: str = ""

    @property
    def coord(self) -> tuple[float, float]:
        return (self.lat, self.lon)

    @property
    def location(self) -> str:
        """Stable location key: POI id, or rounded coordinates for raw points."""
        return self.poi_id if self.poi_id else f"{self.lat:.6f},{self.lon:.6f}"


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    day: date
    points: tuple[TrajectoryPoint, ...]

    def check(self, utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS) -> None:
        start = day_start(self.day, utc_offset_hours)
        prev = -math.inf
        for p in self.points:
            if not math.isfinite(p.timestamp):
                raise DataError("non-finite timestamp")
            if p.timestamp <= prev:
                raise DataError(f"timestamps not strictly increasing for {self.user_id} {self.day}")
            if not start <= p.timestamp < start + 86400:
                raise DataError(f"point outside day {self.day} for {self.user_id}")
            prev = p.timestamp


def day_start(day: date, utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS) -> float:
    return datetime(day.year, day.month, day.day, tzinfo=tz_for(utc_offset_hours)).timestamp()


def local_day(ts: float, utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS) -> date:
    return datetime.fromtimestamp(ts, tz_for(utc_offset_hours)).date()


def local_hour(ts: float, utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS) -> int:
    return datetime.fromtimestamp(ts, tz_for(utc_offset_hours)).hour


def format_ts(ts: float, utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS) -> str:
    return datetime.fromtimestamp(ts, tz_for(utc_offset_hours)).isoformat()


def parse_ts(text: str, utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS) -> float:
    dt = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=tz_for(utc_offset_hours))
    return dt.timestamp()


@dataclass
class LoadReport:
    dropped_unresolvable: int = 0
    duplicate_timestamps: int = 0


def make_point(
    ts: float,
    index: SpatialIndex,
    intents: IntentMap,
    poi_id: Optional[str] = None,
    lat: Optional[float] = None,
    lon: Optional[float] = None,
    category: str = "",
) -> Optional[TrajectoryPoint]:
    """Resolve a visit against the index; None when it has neither a known POI nor coordinates."""
    if poi_id and index.has_poi(poi_id):
        p = index.poi(poi_id)
        return TrajectoryPoint(ts, p.lat, p.lon, intents.intent_of(p.category), p.id, p.category)
    if lat is None or lon is None:
        return None
    return TrajectoryPoint(ts, lat, lon, intents.intent_of(category), None, category)


def group_days(
    user_points: Mapping[str, Sequence[TrajectoryPoint]],
    utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS,
    report: Optional[LoadReport] = None,
) -> list[Trajectory]:
    """Split each user's points into per-day trajectories; duplicate timestamps keep the first."""
    out: list[Trajectory] = []
    for uid in sorted(user_points):
        days: dict[date, list[TrajectoryPoint]] = {}
        for p in user_points[uid]:
            days.setdefault(local_day(p.timestamp, utc_offset_hours), []).append(p)
        for d in sorted(days):
            pts = sorted(days[d], key=lambda p: p.timestamp)  # stable: file order among equals
            kept: list[TrajectoryPoint] = []
            for p in pts:
                if kept and p.timestamp == kept[-1].timestamp:
                    if report is not None:
                        report.duplicate_timestamps += 1
                    continue
                kept.append(p)
            out.append(Trajectory(uid, d, tuple(kept)))
    return out


def load_trajectories(
    path,
    index: SpatialIndex,
    intents: Optional[IntentMap] = None,
    utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS,
    report: Optional[LoadReport] = None,
) -> list[Trajectory]:
    path = Path(path)
    intents = intents or IntentMap()
    report = report if report is not None else LoadReport()
    users: dict[str, list[TrajectoryPoint]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in ("user_id", "timestamp_iso8601"):
            if col not in (reader.fieldnames or []):
                raise IngestError("missing column", path, 1, col)
        for line, row in enumerate(reader, start=2):
            uid = (row.get("user_id") or "").strip()
            if not uid:
                raise IngestError("empty user_id", path, line, "user_id")
            try:
                ts = parse_ts(row["timestamp_iso8601"], utc_offset_hours)
            except ValueError:
                raise IngestError("bad timestamp", path, line, "timestamp_iso8601") from None
            lat = lon = None
            if (row.get("lat") or "").strip() and (row.get("lon") or "").strip():
                try:
                    lat, lon = float(row["lat"]), float(row["lon"])
                except ValueError:
                    raise IngestError("bad coordinate", path, line, "lat") from None
                if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                    raise IngestError("coordinate out of range", path, line, "lat")
            pt = make_point(
                ts, index, intents, (row.get("poi_id") or "").strip() or None, lat, lon,
                (row.get("category") or "").strip(),
            )
            if pt is None:
                report.dropped_unresolvable += 1
                continue
            users.setdefault(uid, []).append(pt)
    trajs = group_days(users, utc_offset_hours, report)
    if report.dropped_unresolvable or report.duplicate_timestamps:
        log.warning(
            "%s: dropped %d unresolvable points, %d duplicate timestamps",
            path, report.dropped_unresolvable, report.duplicate_timestamps,
        )
    return trajs


def write_trajectories(trajs: Iterable[Trajectory], path, utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS) -> None:
    """Canonical order: user, then time."""
    rows = sorted(
        ((t.user_id, p) for t in trajs for p in t.points), key=lambda r: (r[0], r[1].timestamp)
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_FIELDS)
        for uid, p in rows:
            w.writerow([uid, format_ts(p.timestamp, utc_offset_hours), p.poi_id or "", repr(p.lat), repr(p.lon), p.category])


def by_user(trajs: Iterable[Trajectory]) -> dict[str, list[Trajectory]]:
    out: dict[str, list[Trajectory]] = {}
    for t in trajs:
        out.setdefault(t.user_id, []).append(t)
    return out


def align_to_time_grid(traj: Trajectory, interval_s: int) -> Trajectory:
    """Zero-order hold onto slots first + k*interval_s covering [first, last]."""
    if not traj.points:
        raise DataError("empty trajectory")
    if interval_s <= 0:
        raise DataError("interval_s must be > 0")
    pts = traj.points
    first, last = pts[0].timestamp, pts[-1].timestamp
    n_slots = int((last - first) // interval_s) + 1
    out = []
    j = 0
    for k in range(n_slots):
        t = first + k * interval_s
        while j + 1 < len(pts) and pts[j + 1].timestamp <= t:
            j += 1
        out.append(replace(pts[j], timestamp=t))
    return Trajectory(traj.user_id, traj.day, tuple(out))


# ---------------------------------------------------------------------------
# serialization used for preference data


def trajectory_to_json(traj: Trajectory, utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS) -> dict:
    return {
        "user_id": traj.user_id,
        "day": traj.day.isoformat(),
        "points": [
            {
                "time": format_ts(p.timestamp, utc_offset_hours),
                "poi_id": p.poi_id,
                "lat": p.lat,
                "lon": p.lon,
                "intent": p.intent,
                "category": p.category,
            }
            for p in traj.points
        ],
    }


def trajectory_from_json(doc: Mapping, utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS) -> Trajectory:
    pts = tuple(
        TrajectoryPoint(
            parse_ts(p["time"], utc_offset_hours),
            float(p["lat"]),
            float(p["lon"]),
            p["intent"],
            p.get("poi_id"),
            p.get("category", ""),
        )
        for p in doc["points"]
    )
    return Trajectory(doc["user_id"], date.fromisoformat(doc["day"]), pts)
