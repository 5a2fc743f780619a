"""Daily plans, trajectory synthesis, judging and preference-pair construction."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .data import (
    DEFAULT_UTC_OFFSET_HOURS,
    INTENTS,
    IntentMap,
    Trajectory,
    TrajectoryPoint,
    UserProfile,
    day_start,
    trajectory_to_json,
    write_trajectories,
)
from .extractor import FusedPattern, clock_seconds
from .llm import Gateway, StructuredOutputError, TranscriptEntry
from .mapper import CandidateList
from .metrics import EvalConfig, MetricReport, evaluate
from .urban import SpatialIndex, normalize_name

log = logging.getLogger(__name__)

DAY_S = 86400
DEFAULT_THRESHOLD = 5.0
DPO_STAGES = ("r2_reconstruct", "plan_day")
ANCHOR_INTENTS = ("home", "work")


class PlanningError(RuntimeError):
    pass


class JudgeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class Slot:
    intent: str
    start: int
    end: int

    @property
    def anchor(self) -> Optional[str]:
        return self.intent if self.intent in ANCHOR_INTENTS else None


@dataclass(frozen=True)
class ActivityPlan:
    user_id: str
    day: date
    slots: tuple[Slot, ...]
    home_inserted: bool = False
    dropped_slots: int = 0

    def check(self) -> None:
        prev_end = 0
        for s in self.slots:
            if not (prev_end <= s.start < s.end <= DAY_S):
                raise PlanningError(f"slot {s} out of order or outside the day")
            if s.intent not in INTENTS:
                raise PlanningError(f"intent {s.intent!r} not in the taxonomy")
            prev_end = s.end
        if not any(s.intent == "home" for s in self.slots):
            raise PlanningError("plan has no home slot")

    def to_json(self) -> str:
        return json.dumps(
            {
                "user_id": self.user_id,
                "day": self.day.isoformat(),
                "slots": [[s.intent, s.start, s.end] for s in self.slots],
                "home_inserted": self.home_inserted,
                "dropped_slots": self.dropped_slots,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "ActivityPlan":
        d = json.loads(line)
        return cls(
            d["user_id"], date.fromisoformat(d["day"]), tuple(Slot(*s) for s in d["slots"]),
            d.get("home_inserted", False), d.get("dropped_slots", 0),
        )


def normalize_slots(raw: Iterable[tuple[str, int, int]]) -> tuple[list[Slot], bool]:
    """Clip to the day, truncate the earlier of two overlapping slots, ensure a home slot.

    Returns the slots and whether a home slot had to be inserted.
    """
    clipped = []
    for intent, start, end in raw:
        start, end = max(0, min(start, DAY_S)), max(0, min(end, DAY_S))
        if end > start:
            clipped.append(Slot(intent, start, end))
    clipped.sort(key=lambda s: (s.start, s.end))
    slots: list[Slot] = []
    for s in clipped:
        if slots and slots[-1].start == s.start:
            continue  # two slots cannot begin together; keep the first
        if slots and slots[-1].end > s.start:
            slots[-1] = Slot(slots[-1].intent, slots[-1].start, s.start)
        slots.append(s)
    inserted = False
    if not any(s.intent == "home" for s in slots):
        inserted = True
        if slots and slots[0].start == 0:
            first = slots.pop(0)
            end = slots[0].start if slots else DAY_S
            slots.insert(0, Slot("home", 0, min(60, end)))
            if min(60, end) < first.end:
                slots.insert(1, Slot(first.intent, min(60, end), first.end))
        else:
            slots.insert(0, Slot("home", 0, slots[0].start if slots else DAY_S))
    return slots, inserted


def plan_day(
    gateway: Gateway,
    profile: UserProfile,
    pattern: FusedPattern,
    day: date,
    intents: Sequence[str] = INTENTS,
) -> ActivityPlan:
    if not (pattern.fused_c1 and pattern.fused_c2):
        raise PlanningError(f"fused pattern for {profile.user_id} is incomplete")
    ctx = {"user_id": profile.user_id, "day": day.isoformat()}
    try:
        rec = gateway.complete_structured(
            "plan_day",
            {"profile": profile.render(), "pattern": pattern.text(), "day": f"{day.isoformat()} ({day.strftime('%A')})", "intents": ", ".join(intents)},
            {"slots": "list"},
            ctx,
        ).record
    except StructuredOutputError as exc:
        raise PlanningError(f"no usable plan for {profile.user_id} on {day}: {exc}") from exc
    raw, dropped = [], 0
    for s in rec["slots"]:
        try:
            intent = normalize_name(str(s["intent"]))
            if intent not in intents:
                raise ValueError(intent)
            raw.append((intent, clock_seconds(s["start"]), clock_seconds(s["end"])))
        except (KeyError, TypeError, ValueError):
            dropped += 1
    slots, inserted = normalize_slots(raw)
    if inserted:
        log.info("%s %s: plan had no home slot, inserted one at 00:00", profile.user_id, day)
    plan = ActivityPlan(profile.user_id, day, tuple(slots), inserted, dropped)
    plan.check()
    return plan


# ---------------------------------------------------------------------------
# synthesis

# mapper(intent, previous_poi_id, context) -> CandidateList
Mapper = Callable[[str, str, Mapping], CandidateList]


@dataclass
class Synthesis:
    trajectory: Trajectory
    slot_candidates: list[tuple[str, ...]]
    stays: int = 0
    fallbacks: int = 0
    tvr_samples: list[tuple[int, int]] = field(default_factory=list)


def _pick(raw: object, candidates: Sequence[str], index: SpatialIndex) -> Optional[str]:
    text = str(raw).strip()
    if text.isdigit():
        i = int(text)
        return candidates[i - 1] if 1 <= i <= len(candidates) else None
    if text in candidates:
        return text
    norm = normalize_name(text)
    return next((c for c in candidates if normalize_name(index.poi(c).name) == norm), None)


def synthesize_trajectory(
    gateway: Gateway,
    plan: ActivityPlan,
    anchors: Mapping[str, str],
    mapper: Mapper,
    index: SpatialIndex,
    profile: UserProfile,
    pattern: FusedPattern,
    intents: Optional[IntentMap] = None,
    style: str = "hierarchical",
    utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS,
) -> Synthesis:
    """One point per slot at the slot start; anchors bind directly, other slots choose among candidates."""
    if "home" not in anchors:
        raise PlanningError(f"{profile.user_id} has no home anchor")
    plan.check()
    intents = intents or IntentMap()
    base = day_start(plan.day, utc_offset_hours)
    ctx = {"user_id": profile.user_id, "day": plan.day.isoformat()}
    prev = anchors["home"]
    points, slot_cands, tvr = [], [], []
    stays = fallbacks = 0
    for slot in plan.slots:
        if slot.anchor and slot.anchor in anchors:
            chosen = anchors[slot.anchor]
            slot_cands.append((chosen,))
        else:
            cl = mapper(slot.intent, prev, ctx)
            if cl.tvr_sample is not None:
                tvr.append(cl.tvr_sample)
            cands = list(cl.poi_ids)
            slot_cands.append(tuple(cands))
            if not cands:
                stays += 1
                chosen = prev
            else:
                hh = lambda s: f"{s // 3600:02d}:{s % 3600 // 60:02d}"  # noqa: E731
                try:
                    raw = gateway.complete_structured(
                        "synthesize_traj",
                        {
                            "profile": profile.render(),
                            "pattern": pattern.text(),
                            "intent": slot.intent,
                            "start": hh(slot.start),
                            "end": hh(slot.end),
                            "previous": index.address(prev, style),
                            "candidates": "\n".join(
                                f"{i}. {index.poi(c).name} ({index.poi(c).category}) - {index.address(c, style)}"
                                for i, c in enumerate(cands, start=1)
                            ),
                        },
                        {"choice": "str"},
                        ctx,
                    ).record["choice"]
                except StructuredOutputError as exc:
                    log.warning("%s", exc)
                    raw = None
                chosen = _pick(raw, cands, index) if raw is not None else None
                if chosen is None:
                    fallbacks += 1
                    chosen = cands[0]
        p = index.poi(chosen)
        points.append(TrajectoryPoint(base + slot.start, p.lat, p.lon, intents.intent_of(p.category), p.id, p.category))
        prev = chosen
    traj = Trajectory(profile.user_id, plan.day, tuple(points))
    traj.check(utc_offset_hours)
    return Synthesis(traj, slot_cands, stays, fallbacks, tvr)


# ---------------------------------------------------------------------------
# judging and preference data


def judge_quality(gateway: Gateway, output_text: str, context: Optional[Mapping] = None) -> float:
    try:
        rec = gateway.complete_structured("judge_quality", {"output": output_text}, {"score": "float"}, context).record
    except StructuredOutputError as exc:
        raise JudgeError(str(exc)) from exc
    score = rec["score"]
    if not math.isfinite(score):
        raise JudgeError(f"non-finite score {score}")
    return min(10.0, max(0.0, score))


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str
    score: float
    user_id: str
    day: str
    stage: str

    def to_json(self) -> str:
        return json.dumps(
            {"prompt": self.prompt, "chosen": self.chosen, "rejected": self.rejected, "score": self.score,
             "user_id": self.user_id, "day": self.day, "stage": self.stage},
            ensure_ascii=False, sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "PreferencePair":
        return cls(**json.loads(line))


def select_pairs(judged: Iterable[PreferencePair], threshold: float = DEFAULT_THRESHOLD) -> list[PreferencePair]:
    """Keep pairs whose rejected output scored strictly above the threshold."""
    return [p for p in judged if p.score > threshold]


@dataclass
class DpoResult:
    pairs: list[PreferencePair]
    judged: list[PreferencePair]
    skipped_unjoinable: int = 0
    judge_errors: int = 0


def build_dpo_dataset(
    gateway: Gateway,
    transcripts: Iterable[TranscriptEntry],
    real: Sequence[Trajectory],
    threshold: float = DEFAULT_THRESHOLD,
    stages: Sequence[str] = DPO_STAGES,
    utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS,
) -> DpoResult:
    """Judge model outputs and pair each surviving one with the user's real trajectory for that day."""
    truth = {(t.user_id, t.day.isoformat()): t for t in real}
    judged: list[PreferencePair] = []
    skipped = errors = 0
    for e in transcripts:
        if e.stage_id not in stages:
            continue
        key = (e.context.get("user_id"), e.context.get("day"))
        if key not in truth:
            skipped += 1
            continue
        try:
            score = judge_quality(gateway, e.response, {"user_id": key[0], "day": key[1], "judged_stage": e.stage_id})
        except JudgeError as exc:
            log.warning("judge failed: %s", exc)
            errors += 1
            continue
        chosen = json.dumps(trajectory_to_json(truth[key], utc_offset_hours), sort_keys=True)
        judged.append(PreferencePair(e.prompt, chosen, e.response, score, key[0], key[1], e.stage_id))
    if skipped:
        log.warning("%d transcript entries had no matching real trajectory", skipped)
    return DpoResult(select_pairs(judged, threshold), judged, skipped, errors)


def write_pairs(pairs: Iterable[PreferencePair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(p.to_json() + "\n")


def read_pairs(path) -> list[PreferencePair]:
    with open(path, encoding="utf-8") as fh:
        return [PreferencePair.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# improvement rounds


@dataclass
class RoundOutput:
    trajectories: list[Trajectory]
    tvr_samples: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class IterationResult:
    reports: list[MetricReport]
    partial: bool = False
    stopped_at: Optional[int] = None


def iterate_enhancement(
    gateway_for_round: Callable[[int], Optional[Gateway]],
    generate: Callable[[Gateway], RoundOutput],
    real: Sequence[Trajectory],
    eval_config: EvalConfig,
    rounds: int,
    out_dir,
    threshold: float = DEFAULT_THRESHOLD,
    stages: Sequence[str] = DPO_STAGES,
) -> IterationResult:
    """Generate, evaluate and build preference data once per round, each with that round's model.

    Training between rounds happens elsewhere; a round whose model is not configured ends the loop.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    out = Path(out_dir)
    reports: list[MetricReport] = []
    for r in range(1, rounds + 1):
        gateway = gateway_for_round(r)
        if gateway is None:
            log.error("no backend configured for round %d; stopping after %d rounds", r, r - 1)
            return IterationResult(reports, partial=True, stopped_at=r)
        result = generate(gateway)
        report = evaluate(result.trajectories, real, eval_config, result.tvr_samples or None)
        generation_log = list(gateway.transcript)
        dpo = build_dpo_dataset(gateway, generation_log, real, threshold, stages, eval_config.utc_offset_hours)
        rdir = out / f"round_{r}"
        rdir.mkdir(parents=True, exist_ok=True)
        write_trajectories(result.trajectories, rdir / "trajectories.csv", eval_config.utc_offset_hours)
        (rdir / "report.json").write_text(report.to_json(), encoding="utf-8")
        write_pairs(dpo.pairs, rdir / "dpo.jsonl")
        gateway.write_transcript(rdir / "transcripts.jsonl")
        reports.append(report)
    return IterationResult(reports)
