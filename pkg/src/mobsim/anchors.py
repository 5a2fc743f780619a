"""Home/work anchors via a coarse-to-fine region cascade with distribution reflection."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .data import IntentMap, Trajectory, UserProfile, by_user, local_hour
from .geo import haversine
from .llm import Gateway, StructuredOutputError
from .metrics import aligned, jsd
from .urban import LEVELS, SpatialIndex, normalize_name

log = logging.getLogger(__name__)

KINDS = ("home", "work")
SUMMARY_ATTRIBUTES = ("age", "gender", "income", "education", "occupation")
DEFAULT_THRESHOLD = 0.05
DEFAULT_ROUNDS = 3
MAX_BACKTRACKS = 2


class AssignmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegionSummary:
    region_id: str
    level: str
    name: str
    histograms: Mapping[str, Mapping[str, int]]
    total: int
    text: str
    child_ids: tuple[str, ...]


def _render_summary(name: str, total: int, hists: Mapping[str, Mapping[str, int]]) -> str:
    if total == 0:
        return f"{name}: no known residents"
    parts = []
    for attr, h in hists.items():
        top = sorted(h.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
        parts.append(f"{attr} " + ", ".join(f"{v} ({c})" for v, c in top))
    return f"{name}: {total} residents; " + "; ".join(parts)


def summarize_regions(
    level: str, users_with_anchors: Sequence[tuple[UserProfile, str]], index: SpatialIndex
) -> list[RegionSummary]:
    """One summary per region at `level`; histograms are exact counts of anchored users."""
    li = LEVELS.index(level)
    child_level = LEVELS[li + 1] if li + 1 < len(LEVELS) else None
    members: dict[str, list[UserProfile]] = {r.id: [] for r in index.regions(level)}
    for prof, poi_id in users_with_anchors:
        members[index.poi(poi_id).region_path[li]].append(prof)
    out = []
    for r in index.regions(level):
        hists = {}
        for attr in SUMMARY_ATTRIBUTES:
            c = Counter(p.attrs[attr] for p in members[r.id] if p.attrs.get(attr, "") != "")
            hists[attr] = dict(sorted(c.items()))
        children = index.children(child_level, r.id) if child_level else index.pois_in_street(r.id)
        total = len(members[r.id])
        out.append(RegionSummary(r.id, level, r.name, hists, total, _render_summary(r.name, total, hists), tuple(children)))
    return out


def summarize_all(users_with_anchors, index) -> dict[str, dict[str, RegionSummary]]:
    return {lvl: {s.region_id: s for s in summarize_regions(lvl, users_with_anchors, index)} for lvl in LEVELS}


def region_distribution(poi_ids: Iterable[str], level: str, index: SpatialIndex) -> Counter:
    li = LEVELS.index(level)
    return Counter(index.poi(p).region_path[li] for p in poi_ids)


# ---------------------------------------------------------------------------
# truth anchors


def infer_anchors(trajs: Sequence[Trajectory], utc_offset_hours: float = 8.0) -> dict[str, dict[str, str]]:
    """Most-visited home/work POI per user; falls back to night-time / office-hour visits."""
    out: dict[str, dict[str, str]] = {}
    for uid, days in sorted(by_user(trajs).items()):
        pts = [p for t in days for p in t.points if p.poi_id]
        if not pts:
            continue

        def top(pred) -> Optional[str]:
            c = Counter(p.poi_id for p in pts if pred(p))
            return min(c, key=lambda k: (-c[k], k)) if c else None

        home = top(lambda p: p.intent == "home") or top(
            lambda p: not 6 <= local_hour(p.timestamp, utc_offset_hours) < 22
        ) or top(lambda p: True)
        work = top(lambda p: p.intent == "work") or top(
            lambda p: 9 <= local_hour(p.timestamp, utc_offset_hours) < 18 and p.poi_id != home
        ) or home
        out[uid] = {"home": home, "work": work}
    return out


# ---------------------------------------------------------------------------
# assignment


@dataclass(frozen=True)
class ReflectionAdvice:
    iteration: int
    level: str
    jsd_value: float
    gaps: Mapping[str, float]
    contributions: Mapping[str, float]
    over: tuple[str, ...]
    under: tuple[str, ...]
    directive: str

    def to_json(self) -> str:
        d = asdict(self)
        d["gaps"] = dict(self.gaps)
        d["contributions"] = dict(self.contributions)
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class AnchorAssignment:
    user_id: str
    kind: str
    trail: tuple[str, str, str]
    poi_id: str
    iteration: int
    reasks: int = 0
    fallbacks: int = 0
    backtracks: int = 0


def _onehot_affinity(profile: UserProfile, summary: RegionSummary, universe: Mapping[str, Sequence[str]]) -> float:
    attrs = profile.attrs
    u, r = [], []
    for a in SUMMARY_ATTRIBUTES:
        for v in universe.get(a, ()):
            u.append(1.0 if attrs.get(a) == v else 0.0)
            r.append(summary.histograms.get(a, {}).get(v, 0) / summary.total if summary.total else 0.0)
    nu = math.sqrt(sum(x * x for x in u))
    nr = math.sqrt(sum(x * x for x in r))
    if nu == 0 or nr == 0:
        return 0.0
    return sum(x * y for x, y in zip(u, r)) / (nu * nr)


def affinity_choice(profile: UserProfile, options: Sequence[str], summaries: Mapping[str, RegionSummary]) -> str:
    """Option whose resident histogram is most cosine-similar to the profile; ties by id."""
    universe: dict[str, set[str]] = {a: set() for a in SUMMARY_ATTRIBUTES}
    for o in options:
        for a, h in summaries[o].histograms.items():
            universe.setdefault(a, set()).update(h)
    for a in SUMMARY_ATTRIBUTES:
        if profile.attrs.get(a):
            universe[a].add(profile.attrs[a])
    uni = {a: sorted(v) for a, v in universe.items()}
    return min(options, key=lambda o: (-_onehot_affinity(profile, summaries[o], uni), o))


def fallback_poi(kind: str, street_id: str, index: SpatialIndex, intents: IntentMap) -> str:
    pois = [index.poi(p) for p in index.pois_in_street(street_id)]
    lat = sum(p.lat for p in pois) / len(pois)
    lon = sum(p.lon for p in pois) / len(pois)
    matching = [p for p in pois if intents.intent_of(p.category) == kind] or pois
    return min(matching, key=lambda p: (haversine((lat, lon), p.coord), p.id)).id


@dataclass
class CascadeState:
    advice: Optional[ReflectionAdvice] = None
    iteration: int = 1


def _execute(gateway: Gateway, variables, ctx, correction: str = "") -> Optional[str]:
    try:
        return gateway.complete_structured("region_execute", variables, {"choice": "str"}, ctx, correction).record["choice"]
    except StructuredOutputError as exc:
        log.warning("%s", exc)
        return None


def _resolve_choice(raw: Optional[str], options: Sequence[str], names: Mapping[str, str]) -> Optional[str]:
    if raw is None:
        return None
    raw = str(raw).strip()
    if raw in options:
        return raw
    return names.get(normalize_name(raw))


def assign_anchor(
    gateway: Gateway,
    user: UserProfile,
    kind: str,
    summaries: Mapping[str, Mapping[str, RegionSummary]],
    index: SpatialIndex,
    intents: Optional[IntentMap] = None,
    state: Optional[CascadeState] = None,
) -> AnchorAssignment:
    intents = intents or IntentMap()
    state = state or CascadeState()
    advice_text = state.advice.directive if state.advice else "none"
    ctx = {"user_id": user.user_id, "kind": kind, "iteration": state.iteration}
    reasks = fallbacks = backtracks = 0
    excluded: dict[str, set[str]] = {lvl: set() for lvl in LEVELS}

    def choose(level: str, parent: Optional[str]) -> Optional[str]:
        nonlocal reasks, fallbacks
        options = [o for o in index.children(level, parent) if o not in excluded[level]]
        if not options:
            return None
        book = summaries[level]
        parent_name = index.region(LEVELS[LEVELS.index(level) - 1], parent).name if parent else "the whole city"
        reasoning = gateway.complete(
            "region_reason",
            {
                "profile": user.render(),
                "kind": kind,
                "level": level,
                "parent": parent_name,
                "children": "\n".join(f"- {o}: {book[o].text}" for o in options),
                "advice": advice_text,
            },
            ctx,
        ).strip()
        variables = {
            "profile": user.render(),
            "kind": kind,
            "level": level,
            "reasoning": reasoning,
            "options": "\n".join(f"{o}: {book[o].name}" for o in options),
        }
        names = {normalize_name(book[o].name): o for o in options}
        raw = _execute(gateway, variables, ctx)
        pick = _resolve_choice(raw, options, names)
        if pick is None:
            reasks += 1
            raw = _execute(
                gateway, variables, ctx,
                f"{raw!r} is not one of the options. Pick one of: {', '.join(options)}.",
            )
            pick = _resolve_choice(raw, options, names)
        if pick is None:
            fallbacks += 1
            pick = affinity_choice(user, options, book)
        return pick

    admin = choose("admin", None)
    if admin is None:
        raise AssignmentError("no admin regions")
    sub = street = None
    while True:
        sub = choose("subdistrict", admin)
        if sub is None:
            raise AssignmentError(f"{user.user_id}: no usable subdistrict under {admin}")
        street = choose("street", sub)
        if street is not None and index.pois_in_street(street):
            break
        if backtracks >= MAX_BACKTRACKS:
            raise AssignmentError(f"{user.user_id}: no street with POIs found after {backtracks} backtracks")
        backtracks += 1
        if street is None:
            excluded["subdistrict"].add(sub)
        else:
            excluded["street"].add(street)
            if not [s for s in index.children("street", sub) if s not in excluded["street"]]:
                excluded["subdistrict"].add(sub)

    poi_options = list(index.pois_in_street(street))
    poi_names = {normalize_name(index.poi(p).name): p for p in poi_options}
    raw = _execute(
        gateway,
        {
            "profile": user.render(),
            "kind": kind,
            "level": "poi",
            "reasoning": f"The {kind} lies in {index.region('street', street).name}.",
            "options": "\n".join(f"{p}: {index.poi(p).name} ({index.poi(p).category})" for p in poi_options),
        },
        ctx,
    )
    poi = _resolve_choice(raw, poi_options, poi_names)
    if poi is None:
        fallbacks += 1
        poi = fallback_poi(kind, street, index, intents)
    return AnchorAssignment(user.user_id, kind, (admin, sub, street), poi, state.iteration, reasks, fallbacks, backtracks)


# ---------------------------------------------------------------------------
# reflection


def _directive(level: str, over: Sequence[str], under: Sequence[str]) -> str:
    if not over and not under:
        return f"The {level}-level distribution matches the real one; keep the current choices."
    parts = []
    if over:
        parts.append("assign fewer residents to " + ", ".join(over))
    if under:
        parts.append("assign more residents to " + ", ".join(under))
    return f"At the {level} level, " + " and ".join(parts) + "."


def reflect(
    assignments: Sequence[AnchorAssignment],
    truth_distribution: Mapping[str, float],
    level: str,
    gateway: Optional[Gateway] = None,
    iteration: int = 1,
    kind: str = "home",
) -> ReflectionAdvice:
    if not assignments:
        raise AssignmentError("reflection needs at least one assignment")
    li = LEVELS.index(level)
    generated = Counter(a.trail[li] for a in assignments)
    p, q = aligned(generated, truth_distribution)
    value = jsd(p, q)
    pn, qn = p.normalized(), q.normalized()
    gaps: dict[str, float] = {}
    contributions: dict[str, float] = {}
    for rid, a, b in zip(p.support, pn.mass, qn.mass):
        gaps[rid] = a - b
        m = 0.5 * (a + b)
        contributions[rid] = 0.5 * ((a * math.log2(a / m) if a > 0 else 0.0) + (b * math.log2(b / m) if b > 0 else 0.0))
    over = tuple(r for r, g in sorted(gaps.items(), key=lambda kv: (-kv[1], kv[0])) if g > 0)[:5]
    under = tuple(r for r, g in sorted(gaps.items(), key=lambda kv: (kv[1], kv[0])) if g < 0)[:5]
    directive = _directive(level, over, under)
    if gateway is not None:
        directive = gateway.complete(
            "region_reflect",
            {"kind": kind, "level": level, "jsd": f"{value:.4f}", "over": ", ".join(over) or "none", "under": ", ".join(under) or "none"},
            {"kind": kind, "iteration": iteration},
        ).strip() or directive
    return ReflectionAdvice(iteration, level, value, gaps, contributions, over, under, directive)


@dataclass
class CascadeResult:
    assignments: list[AnchorAssignment]
    advice: list[ReflectionAdvice]
    partial: bool = False
    error: str = ""


def run_anchor_cascade(
    gateway: Gateway,
    users: Sequence[UserProfile],
    kind: str,
    summaries: Mapping[str, Mapping[str, RegionSummary]],
    truth_distribution: Mapping[str, float],
    index: SpatialIndex,
    intents: Optional[IntentMap] = None,
    rounds: int = DEFAULT_ROUNDS,
    threshold: float = DEFAULT_THRESHOLD,
    level: str = "subdistrict",
    reflect_with_llm: bool = False,
) -> CascadeResult:
    """Assign all users, reflect, repeat with the advice until converged or out of rounds."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    advice_log: list[ReflectionAdvice] = []
    assignments: list[AnchorAssignment] = []
    state = CascadeState()
    for r in range(1, rounds + 1):
        state = CascadeState(advice_log[-1] if advice_log else None, r)
        try:
            current = gateway.map(lambda u: assign_anchor(gateway, u, kind, summaries, index, intents, state), users)
        except AssignmentError as exc:
            log.error("anchor cascade aborted in round %d: %s", r, exc)
            return CascadeResult(assignments, advice_log, partial=True, error=str(exc))
        assignments = list(current)
        advice = reflect(assignments, truth_distribution, level, gateway if reflect_with_llm else None, r, kind)
        advice_log.append(advice)
        # JSD never exceeds 1, so a threshold of 1 or more always counts as converged
        if advice.jsd_value < threshold or threshold >= 1.0:
            break
    return CascadeResult(assignments, advice_log)


ANCHOR_FIELDS = ("user_id", "kind", "admin", "subdistrict", "street", "poi_id", "iteration")


def write_anchors(assignments: Iterable[AnchorAssignment], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANCHOR_FIELDS)
        for a in sorted(assignments, key=lambda a: (a.user_id, a.kind)):
            w.writerow([a.user_id, a.kind, *a.trail, a.poi_id, a.iteration])


def read_anchors(path) -> list[AnchorAssignment]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            AnchorAssignment(r["user_id"], r["kind"], (r["admin"], r["subdistrict"], r["street"]), r["poi_id"], int(r["iteration"]))
            for r in csv.DictReader(fh)
        ]
