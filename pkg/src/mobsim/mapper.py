"""Candidate-location mappers (social graph, map radius, LLM) and route QA data."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .data import IntentMap, Trajectory, UserProfile
from .geo import LatLon, haversine, valid_coordinate
from .llm import Gateway, StructuredOutputError
from .urban import Poi, SpatialIndex

log = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_ALPHA = 1.0
DEFAULT_EPSILON = 1e-6
GRAPH_FIELDS = ("loc_i", "loc_j", "n", "d_km", "w")


class MapperError(ValueError):
    pass


# ---------------------------------------------------------------------------
# social transition graph


@dataclass(frozen=True)
class Edge:
    n: int
    d_km: float
    w: float


def edge_weight(n: float, d_km: float, alpha: float, epsilon: float) -> float:
    return n / (d_km**alpha + epsilon)


@dataclass
class TransitionGraph:
    """Undirected location graph; edge keys are sorted (loc_i, loc_j) pairs."""

    edges: dict[tuple[str, str], Edge]
    alpha: float = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON
    skipped: int = 0
    _adj: dict[str, dict[str, float]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        adj: dict[str, dict[str, float]] = {}
        for (a, b), e in self.edges.items():
            adj.setdefault(a, {})[b] = e.w
            adj.setdefault(b, {})[a] = e.w
        self._adj = adj

    def __contains__(self, loc: str) -> bool:
        return loc in self._adj

    def weight(self, a: str, b: str) -> float:
        return self._adj.get(a, {}).get(b, 0.0)

    def neighbours(self, loc: str) -> dict[str, float]:
        return dict(self._adj.get(loc, {}))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GRAPH_FIELDS)
            for (a, b), e in sorted(self.edges.items()):
                w.writerow([a, b, e.n, repr(e.d_km), repr(e.w)])

    @classmethod
    def read_csv(cls, path, alpha: float = DEFAULT_ALPHA, epsilon: float = DEFAULT_EPSILON) -> "TransitionGraph":
        with open(path, newline="", encoding="utf-8") as fh:
            edges = {
                (r["loc_i"], r["loc_j"]): Edge(int(r["n"]), float(r["d_km"]), float(r["w"]))
                for r in csv.DictReader(fh)
            }
        return cls(edges, alpha, epsilon)


def build_transition_graph(
    trajectories: Iterable[Trajectory],
    alpha: float = DEFAULT_ALPHA,
    epsilon: float = DEFAULT_EPSILON,
    index: Optional[SpatialIndex] = None,
) -> TransitionGraph:
    """Count consecutive moves between distinct locations and weight them by distance decay."""
    if not epsilon > 0:
        raise MapperError("epsilon must be > 0")
    counts: Counter = Counter()
    coords: dict[str, Optional[LatLon]] = {}
    for t in trajectories:
        for p in t.points:
            if p.location not in coords:
                c: Optional[LatLon] = p.coord
                if index is not None and p.poi_id:
                    c = index.poi(p.poi_id).coord if index.has_poi(p.poi_id) else None
                if c is not None and not valid_coordinate(*c):
                    c = None
                coords[p.location] = c
        for a, b in zip(t.points, t.points[1:]):
            if a.location != b.location:
                counts[tuple(sorted((a.location, b.location)))] += 1
    edges: dict[tuple[str, str], Edge] = {}
    skipped = 0
    for (a, b), n in counts.items():
        ca, cb = coords[a], coords[b]
        if ca is None or cb is None:
            skipped += 1
            continue
        d = haversine(ca, cb)
        edges[(a, b)] = Edge(n, d, edge_weight(n, d, alpha, epsilon))
    if skipped:
        log.warning("transition graph: %d location pairs skipped for missing coordinates", skipped)
    return TransitionGraph(edges, alpha, epsilon, skipped)


@dataclass(frozen=True)
class CandidateList:
    poi_ids: tuple[str, ...]
    fallback: bool = False
    tvr_sample: Optional[tuple[int, int]] = None


def candidates_social(
    current: str,
    neighbor_trajectories: Iterable[Trajectory],
    graph: TransitionGraph,
    k: int = DEFAULT_K,
    index: Optional[SpatialIndex] = None,
) -> CandidateList:
    """Locations visited by the target's neighbours, ranked by edge weight to `current`.

    When `current` never appears in the graph the pool is ranked by neighbour visit
    frequency instead and the result is flagged.
    """
    freq = Counter(p.location for t in neighbor_trajectories for p in t.points)
    pool = [loc for loc in freq if loc != current and (index is None or index.has_poi(loc))]
    if current in graph:
        ranked = sorted(pool, key=lambda loc: (-graph.weight(current, loc), loc))
        return CandidateList(tuple(ranked[:k]))
    ranked = sorted(pool, key=lambda loc: (-freq[loc], loc))
    return CandidateList(tuple(ranked[:k]), fallback=True)


def candidates_map(
    intent: str,
    center: LatLon,
    index: SpatialIndex,
    intents: Optional[IntentMap] = None,
    radius_km: float = 3.0,
    k: int = DEFAULT_K,
) -> CandidateList:
    """POIs of the intent's categories inside the radius, nearest first, ties by id."""
    intents = intents or IntentMap()
    cats = [c for c in intents.categories_for(intent) if c in set(index.categories())]
    if not cats:
        raise MapperError(f"no POI category in this city maps to intent {intent!r}")
    found: list[tuple[float, str]] = []
    for c in cats:
        found.extend((haversine(center, p.coord), p.id) for p in index.pois_within_radius(center, radius_km, c))
    found.sort()
    return CandidateList(tuple(pid for _, pid in found[:k]))


def _resolve_places(places: list, index: SpatialIndex, near: LatLon) -> tuple[list[str], int, int]:
    resolved: list[str] = []
    valid = total = 0
    for raw in places:
        name = raw.get("name", "") if isinstance(raw, Mapping) else str(raw)
        total += 1
        if not index.validate_toponym(name):
            continue
        valid += 1
        ids = index.pois_by_name(name)
        if ids:
            best = min(ids, key=lambda i: (haversine(near, index.poi(i).coord), i))
            if best not in resolved:
                resolved.append(best)
    return resolved, valid, total


def count_toponyms(reply: str, index: SpatialIndex) -> tuple[int, int]:
    """Valid/total toponyms in one raw mapper reply, as the LLM mapper counts them."""
    from .llm import parse_structured

    try:
        places = parse_structured(reply, {"places": "list"})["places"]
    except (ValueError, json.JSONDecodeError):
        return 0, 0
    valid = sum(1 for p in places if index.validate_toponym(p.get("name", "") if isinstance(p, Mapping) else str(p)))
    return valid, len(places)


def candidates_llm(
    gateway: Gateway,
    current_poi: str,
    profile: UserProfile,
    pattern: str,
    intent: str,
    index: SpatialIndex,
    k: int = DEFAULT_K,
    style: str = "hierarchical",
    context: Optional[Mapping] = None,
) -> CandidateList:
    """Ask the model for place names; keep those that exist in the city.

    The TVR sample pools every toponym the model emitted, including a re-ask.
    """
    here = index.poi(current_poi)
    variables = {
        "profile": profile.render(),
        "pattern": pattern,
        "intent": intent,
        "current": index.address(current_poi, style),
        "k": str(k),
    }
    ctx = dict(context or {}, user_id=profile.user_id, intent=intent)
    resolved: list[str] = []
    valid = total = 0
    correction = ""
    for _ in range(2):
        try:
            places = gateway.complete_structured("mapper_candidates", variables, {"places": "list"}, ctx, correction).record["places"]
        except StructuredOutputError as exc:
            log.warning("%s", exc)
            places = []
        got, v, t = _resolve_places(places, index, here.coord)
        valid += v
        total += t
        for g in got:
            if g not in resolved:
                resolved.append(g)
        if v:
            break
        correction = "None of those places exist in this city. Name real places from the map only."
    return CandidateList(tuple(resolved[:k]), tvr_sample=(valid, total))


# ---------------------------------------------------------------------------
# route-based QA data for map-knowledge fine-tuning


@dataclass(frozen=True)
class FinetuneQaPair:
    question: str
    answer: str
    origin_poi: str
    dest_poi: str
    waypoint: str
    category: str
    radius_km: float
    answer_ids: tuple[str, ...]

    def to_json(self) -> str:
        d = asdict(self)
        d["answer_ids"] = list(self.answer_ids)
        return json.dumps(d, ensure_ascii=False, sort_keys=True)


def mean_jump_km(trajectories: Iterable[Trajectory]) -> float:
    steps = [haversine(a.coord, b.coord) for t in trajectories for a, b in zip(t.points, t.points[1:])]
    if not steps:
        raise MapperError("no consecutive points to measure jumps")
    return math.fsum(steps) / len(steps)


def _route_waypoints(index: SpatialIndex, route: Sequence[LatLon], capture_km: float) -> list[Poi]:
    seen: dict[str, Poi] = {}
    for v in route:
        for p in index.pois_within_radius(v, capture_km):
            seen.setdefault(p.id, p)
    return list(seen.values())


def build_finetune_dataset(
    index: SpatialIndex,
    n_pairs: int,
    radius_km: float,
    categories: Optional[Sequence[str]] = None,
    seed: int = 0,
    capture_km: float = 0.05,
    step_km: float = 0.2,
    style: str = "hierarchical",
) -> list[FinetuneQaPair]:
    """Sample population-weighted O-D routes and ask what lies near each waypoint.

    Produces exactly `n_pairs` QA pairs; the last route is truncated as needed.
    """
    if n_pairs < 0:
        raise MapperError("n_pairs must be >= 0")
    if not radius_km > 0:
        raise MapperError("radius_km must be > 0")
    cats = list(categories) if categories is not None else list(index.categories())
    if not cats:
        raise MapperError("no categories to ask about")
    pois = index.pois
    weights = np.array([p.population_weight for p in pois], dtype=float)
    if np.count_nonzero(weights) < 2:
        raise MapperError("need at least two POIs with positive population weight")
    rng = np.random.default_rng(seed)
    out: list[FinetuneQaPair] = []
    while len(out) < n_pairs:
        o = int(rng.choice(len(pois), p=weights / weights.sum()))
        w2 = weights.copy()
        w2[o] = 0.0
        d = int(rng.choice(len(pois), p=w2 / w2.sum()))
        origin, dest = pois[o], pois[d]
        route = index.route(origin.coord, dest.coord, step_km)
        for wp in _route_waypoints(index, [origin.coord, *route, dest.coord], capture_km):
            where = index.address(wp.id, style)
            for cat in cats:
                near = index.pois_within_radius(wp.coord, radius_km, cat)
                answer = "; ".join(p.name for p in near) if near else "none"
                out.append(
                    FinetuneQaPair(
                        f"Which {cat} places are within {radius_km:g} km of {where}?",
                        answer, origin.id, dest.id, wp.id, cat, radius_km, tuple(p.id for p in near),
                    )
                )
                if len(out) == n_pairs:
                    return out
    return out


def write_finetune_dataset(pairs: Iterable[FinetuneQaPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(p.to_json() + "\n")


def read_finetune_dataset(path) -> list[FinetuneQaPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                d["answer_ids"] = tuple(d["answer_ids"])
                out.append(FinetuneQaPair(**d))
    return out
