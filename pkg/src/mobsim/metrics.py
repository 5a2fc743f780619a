"""Trajectory fidelity metrics: per-user and collective JSDs, TVR and CMRR."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import DEFAULT_UTC_OFFSET_HOURS, Trajectory, by_user, local_hour
from .geo import LocalProjection, haversine

JSD_FIELDS = ("fvloc", "actprob", "distance", "radius", "si", "sd", "dard", "stvd")
INDIVIDUAL_FIELDS = ("distance", "radius", "si", "sd", "stvd", "dard")
OTHER_BUCKET = "__other__"

# log-spaced 0.1..100 km, 30 bins, plus underflow [0, 0.1) and overflow [100, inf)
SPATIAL_EDGES = tuple([0.0, *np.logspace(-1, 2, 31).tolist(), math.inf])
# half-hour bins over 0..24 h plus overflow
INTERVAL_EDGES_H = tuple([*(i * 0.5 for i in range(49)), math.inf])


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Histogram:
    """Mass over an ordered support. Binned histograms also carry their edges."""

    support: tuple
    mass: tuple[float, ...]
    edges: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if len(self.support) != len(self.mass):
            raise MetricError("support and mass lengths differ")
        if any(m < 0 or not math.isfinite(m) for m in self.mass):
            raise MetricError("histogram mass must be finite and non-negative")
        if self.edges is not None:
            if len(self.edges) != len(self.mass) + 1:
                raise MetricError("need len(mass) + 1 edges")
            if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
                raise MetricError("edges must be strictly increasing")

    @property
    def total(self) -> float:
        return math.fsum(self.mass)

    def normalized(self) -> "Histogram":
        t = self.total
        if t <= 0:
            raise MetricError("cannot normalize an empty histogram")
        return Histogram(self.support, tuple(m / t for m in self.mass), self.edges)

    @classmethod
    def binned(cls, values: Iterable[float], edges: Sequence[float]) -> "Histogram":
        counts = [0.0] * (len(edges) - 1)
        for v in values:
            counts[bin_index(v, edges)] += 1
        return cls(tuple(range(len(counts))), tuple(counts), tuple(edges))

    @classmethod
    def categorical(cls, counts: Mapping[Hashable, float], support: Optional[Sequence] = None) -> "Histogram":
        keys = tuple(support) if support is not None else tuple(sorted(counts, key=repr))
        return cls(keys, tuple(float(counts.get(k, 0.0)) for k in keys))


def bin_index(value: float, edges: Sequence[float]) -> int:
    """Left-closed bins; values below the first edge go to bin 0."""
    i = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(i, 0), len(edges) - 2)


def aligned(a: Mapping[Hashable, float], b: Mapping[Hashable, float]) -> tuple[Histogram, Histogram]:
    """Two categorical histograms over the sorted union of their keys."""
    support = tuple(sorted(set(a) | set(b), key=repr))
    return Histogram.categorical(a, support), Histogram.categorical(b, support)


def jsd(p: Histogram, q: Histogram) -> float:
    """Jensen-Shannon divergence in bits; 0 log 0 = 0, no smoothing."""
    if p.support != q.support or p.edges != q.edges:
        raise MetricError("histograms have different supports")
    p, q = p.normalized(), q.normalized()
    if p.mass == q.mass:
        return 0.0
    total = 0.0
    for pi, qi in zip(p.mass, q.mass):
        mi = 0.5 * (pi + qi)
        a = pi * math.log2(pi / mi) if pi > 0 else 0.0
        b = qi * math.log2(qi / mi) if qi > 0 else 0.0
        # a + b is commutative in IEEE arithmetic, which keeps jsd(p, q) == jsd(q, p) bitwise
        total += 0.5 * (a + b)
    return min(1.0, max(0.0, total))


def radius_of_gyration(coords: Sequence[tuple[float, float]]) -> float:
    if not coords:
        raise MetricError("radius of gyration needs at least one point")
    clat = math.fsum(c[0] for c in coords) / len(coords)
    clon = math.fsum(c[1] for c in coords) / len(coords)
    return math.sqrt(math.fsum(haversine(c, (clat, clon)) ** 2 for c in coords) / len(coords))


# ---------------------------------------------------------------------------
# per-user distributions


@dataclass(frozen=True)
class EvalConfig:
    projection: LocalProjection
    utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS
    grid_km: float = 1.0
    top_locations: int = 40

    @classmethod
    def for_index(cls, index, **kw) -> "EvalConfig":
        lat0, lon0, lat1, _ = index.bbox
        return cls(LocalProjection(lat0, lon0, (lat0 + lat1) / 2), **kw)


@dataclass
class UserHistograms:
    distance: Counter = field(default_factory=Counter)
    radius: Counter = field(default_factory=Counter)
    si: Counter = field(default_factory=Counter)
    sd: Counter = field(default_factory=Counter)
    stvd: Counter = field(default_factory=Counter)
    dard: Counter = field(default_factory=Counter)


def step_distances(t: Trajectory) -> list[float]:
    return [haversine(a.coord, b.coord) for a, b in zip(t.points, t.points[1:])]


def per_user_histograms(trajs: Iterable[Trajectory], config: EvalConfig) -> dict[str, UserHistograms]:
    out: dict[str, UserHistograms] = {}
    for uid, days in sorted(by_user(trajs).items()):
        h = UserHistograms()
        for t in days:
            if not t.points:
                continue
            steps = step_distances(t)
            h.distance[bin_index(math.fsum(steps), SPATIAL_EDGES)] += 1
            h.radius[bin_index(radius_of_gyration([p.coord for p in t.points]), SPATIAL_EDGES)] += 1
            for s in steps:
                h.sd[bin_index(s, SPATIAL_EDGES)] += 1
            for a, b in zip(t.points, t.points[1:]):
                h.si[bin_index((b.timestamp - a.timestamp) / 3600.0, INTERVAL_EDGES_H)] += 1
            for p in t.points:
                hour = local_hour(p.timestamp, config.utc_offset_hours)
                h.stvd[(config.projection.cell(p.lat, p.lon, config.grid_km), hour)] += 1
                h.dard[(hour, p.intent)] += 1
        out[uid] = h
    return out


def _binned_pair(a: Counter, b: Counter, edges) -> tuple[Histogram, Histogram]:
    n = len(edges) - 1
    sup = tuple(range(n))
    return (
        Histogram(sup, tuple(float(a.get(i, 0)) for i in sup), tuple(edges)),
        Histogram(sup, tuple(float(b.get(i, 0)) for i in sup), tuple(edges)),
    )


def _pair(name: str, a: Counter, b: Counter) -> tuple[Histogram, Histogram]:
    if name in ("distance", "radius", "sd"):
        return _binned_pair(a, b, SPATIAL_EDGES)
    if name == "si":
        return _binned_pair(a, b, INTERVAL_EDGES_H)
    return aligned(a, b)


def visit_counts(trajs: Iterable[Trajectory]) -> Counter:
    return Counter(p.location for t in trajs for p in t.points)


def top_locations(counts: Mapping[str, int], n: int) -> list[str]:
    return [k for k, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]


def fvloc_histograms(gen: Counter, real: Counter, n: int) -> tuple[Histogram, Histogram]:
    keep = sorted(set(top_locations(gen, n)) | set(top_locations(real, n)))
    support = tuple(keep) + (OTHER_BUCKET,)

    def fold(c: Counter) -> Histogram:
        kept = {k: float(c.get(k, 0)) for k in keep}
        kept[OTHER_BUCKET] = float(sum(c.values()) - sum(c.get(k, 0) for k in keep))
        return Histogram.categorical(kept, support)

    return fold(gen), fold(real)


def intent_counts(trajs: Iterable[Trajectory]) -> Counter:
    return Counter(p.intent for t in trajs for p in t.points)


def pooled_tvr(samples: Iterable[tuple[int, int]]) -> Optional[float]:
    valid = total = 0
    for v, t in samples:
        valid += v
        total += t
    return valid / total if total else None


@dataclass
class MetricReport:
    fvloc: float
    actprob: float
    distance: float
    radius: float
    si: float
    sd: float
    dard: float
    stvd: float
    tvr: Optional[float] = None
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in JSD_FIELDS:
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise MetricError(f"{name}={v} outside [0, 1]")
        if self.tvr is not None and not 0.0 <= self.tvr <= 1.0:
            raise MetricError(f"tvr={self.tvr} outside [0, 1]")

    def jsd_values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in JSD_FIELDS}

    def mean_jsd(self) -> float:
        vals = [v for v in self.jsd_values().values() if not math.isnan(v)]
        return math.fsum(vals) / len(vals)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in JSD_FIELDS}
        if self.tvr is not None:
            d["tvr"] = self.tvr
        d["counts"] = dict(self.counts)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls(**{k: d[k] for k in JSD_FIELDS}, tvr=d.get("tvr"), counts=dict(d.get("counts", {})))


def evaluate(
    generated: Sequence[Trajectory],
    real: Sequence[Trajectory],
    config: EvalConfig,
    tvr_samples: Optional[Iterable[tuple[int, int]]] = None,
) -> MetricReport:
    if not generated or not real:
        raise MetricError("both datasets must be non-empty")
    gh = per_user_histograms(generated, config)
    rh = per_user_histograms(real, config)
    matched = sorted(set(gh) & set(rh))
    if not matched:
        raise MetricError("no users present in both datasets")

    values: dict[str, float] = {}
    excluded: dict[str, int] = {}
    for name in INDIVIDUAL_FIELDS:
        scores = []
        for uid in matched:
            a, b = getattr(gh[uid], name), getattr(rh[uid], name)
            if not a or not b:
                continue
            scores.append(jsd(*_pair(name, a, b)))
        excluded[name] = len(matched) - len(scores)
        values[name] = math.fsum(scores) / len(scores) if scores else math.nan

    values["fvloc"] = jsd(*fvloc_histograms(visit_counts(generated), visit_counts(real), config.top_locations))
    values["actprob"] = jsd(*aligned(intent_counts(generated), intent_counts(real)))

    counts = {
        "users_matched": len(matched),
        "users_skipped": len(set(gh) ^ set(rh)),
        "days_generated": len(generated),
        "days_real": len(real),
        "points_generated": sum(len(t.points) for t in generated),
        "points_real": sum(len(t.points) for t in real),
        "users_excluded": {k: v for k, v in excluded.items() if v},
    }
    tvr = pooled_tvr(tvr_samples) if tvr_samples is not None else None
    return MetricReport(**values, tvr=tvr, counts=counts)


def user_summary(trajs: Sequence[Trajectory]) -> dict:
    """Statistics injected into compression prompts."""
    coords = [p.coord for t in trajs for p in t.points]
    steps = [s for t in trajs for s in step_distances(t)]
    intents = Counter(p.intent for t in trajs for p in t.points)
    return {
        "visits_per_intent": dict(sorted(intents.items())),
        "radius_of_gyration_km": radius_of_gyration(coords) if coords else 0.0,
        "mean_step_km": math.fsum(steps) / len(steps) if steps else 0.0,
        "days": len(trajs),
        "points": len(coords),
    }


# ---------------------------------------------------------------------------
# composite ranking


@dataclass
class CmrrTable:
    models: list[str]
    metrics: list[str]
    ranks: dict[str, dict[str, float]]
    cmrr: dict[str, float]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", *self.metrics, "cmrr"])
            for m in self.models:
                w.writerow([m, *(repr(self.ranks[k][m]) for k in self.metrics), repr(self.cmrr[m])])


def cmrr(reports: Mapping[str, MetricReport], tvr_included: bool = False) -> CmrrTable:
    if len(reports) < 2:
        raise MetricError("CMRR needs at least two models")
    models = list(reports)
    metrics = list(JSD_FIELDS) + (["tvr"] if tvr_included else [])
    for m in metrics:
        present = [getattr(reports[k], m) is not None and not math.isnan(getattr(reports[k], m)) for k in models]
        if not all(present):
            raise MetricError(f"metric {m!r} is not populated for every model")
    ranks: dict[str, dict[str, float]] = {}
    for m in metrics:
        vals = np.array([getattr(reports[k], m) for k in models], dtype=float)
        r = rankdata(-vals if m == "tvr" else vals, method="average")
        ranks[m] = {k: float(x) for k, x in zip(models, r)}
    scores = {k: math.fsum(1.0 / ranks[m][k] for m in metrics) / len(metrics) for k in models}
    return CmrrTable(models, metrics, ranks, scores)


def write_plot_data(generated: Sequence[Trajectory], real: Sequence[Trajectory], config: EvalConfig, out_dir) -> list[Path]:
    """Per-metric collective histograms (generated vs real) as CSVs for external plotting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gh = per_user_histograms(generated, config)
    rh = per_user_histograms(real, config)
    written = []
    for name in INDIVIDUAL_FIELDS:
        ga: Counter = Counter()
        ra: Counter = Counter()
        for h in gh.values():
            ga.update(getattr(h, name))
        for h in rh.values():
            ra.update(getattr(h, name))
        if not ga and not ra:
            continue
        path = out / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if name in ("distance", "radius", "sd", "si"):
                edges = INTERVAL_EDGES_H if name == "si" else SPATIAL_EDGES
                w.writerow(["bin_lo", "bin_hi", "generated", "real"])
                for i in range(len(edges) - 1):
                    w.writerow([edges[i], edges[i + 1], ga.get(i, 0), ra.get(i, 0)])
            else:
                w.writerow(["key", "generated", "real"])
                for k in sorted(set(ga) | set(ra), key=repr):
                    w.writerow([json.dumps(k), ga.get(k, 0), ra.get(k, 0)])
        written.append(path)
    for name, (ga, ra) in {
        "fvloc": (visit_counts(generated), visit_counts(real)),
        "actprob": (intent_counts(generated), intent_counts(real)),
    }.items():
        path = out / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "generated", "real"])
            for k in sorted(set(ga) | set(ra)):
                w.writerow([k, ga.get(k, 0), ra.get(k, 0)])
        written.append(path)
    return written
