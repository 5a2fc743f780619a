"""Stage runners: each reads earlier artifacts, writes its own plus a manifest."""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Callable, Optional

from . import anchors as anc
from . import enhancer as enh
from . import extractor as ext
from . import mapper as mp
from .config import RunConfig
from .data import (
    IntentMap,
    LoadReport,
    Trajectory,
    UserProfile,
    by_user,
    load_profiles,
    load_trajectories,
    write_profiles,
    write_trajectories,
)
from .llm import Backend, Gateway, make_backend, read_transcript
from .metrics import EvalConfig, cmrr, evaluate, write_plot_data
from .urban import SpatialIndex, ingest_city, write_pois, write_regions

log = logging.getLogger(__name__)

STAGES = (
    "ingest",
    "extract",
    "synthesize-patterns",
    "anchors",
    "build-graph",
    "simulate",
    "evaluate",
    "finetune-data",
    "dpo-data",
    "iterate",
)


class StageError(RuntimeError):
    pass


class DependencyError(StageError):
    def __init__(self, stage: str, artifact: Path):
        super().__init__(f"stage {stage!r} needs {artifact}; run the stage that produces it first")
        self.stage = stage
        self.artifact = artifact


# (stage, round or None) -> backend; lets callers drive the pipeline with an in-process policy
BackendFactory = Callable[[str, Optional[int]], Optional[Backend]]


def _versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for pkg in ("mobsim", "numpy", "scipy", "networkx", "httpx", "pyyaml"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def write_roads(index: SpatialIndex, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["road_name", "lat1", "lon1", "lat2", "lon2"])
        for e in index.roads.edges:
            a, b = index.roads.nodes[e.u], index.roads.nodes[e.v]
            w.writerow([e.name, repr(a[0]), repr(a[1]), repr(b[0]), repr(b[1])])


@dataclass
class Run:
    config: RunConfig
    backend_factory: Optional[BackendFactory] = None
    _cache: dict = field(default_factory=dict)

    # ---- plumbing -------------------------------------------------------
    @property
    def out(self) -> Path:
        return Path(self.config.output_dir)

    def stage_dir(self, stage: str) -> Path:
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def require(self, stage: str, producer: str, name: str) -> Path:
        p = self.out / producer / name
        if not p.exists():
            raise DependencyError(stage, p)
        return p

    def gateway(self, stage: str, round_no: Optional[int] = None) -> Optional[Gateway]:
        """A fresh gateway per stage so scripted call ordinals restart."""
        cfg = self.config
        if self.backend_factory is not None:
            b = self.backend_factory(stage, round_no)
            return Gateway(b) if b is not None else None
        if round_no is not None:
            if round_no > len(cfg.iterate.backends):
                return None
            default = cfg.iterate.backends[round_no - 1]
        else:
            default = cfg.backend

        def build(bc):
            return make_backend(replace(bc, script=bc.script.replace("{stage}", stage)) if bc.script else bc)

        stage_backends = {k: build(v) for k, v in cfg.stage_backends.items()}
        return Gateway(build(default), stage_backends=stage_backends)

    def manifest(self, stage: str, started: float, artifacts: list[Path], extra: Optional[dict] = None) -> None:
        d = self.stage_dir(stage)
        doc = {
            "stage": stage,
            "config_hash": self.config.digest(),
            "rng_seed": self.config.rng_seed,
            "versions": _versions(),
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "artifacts": sorted(str(Path(a).relative_to(d)) for a in artifacts),
        }
        if extra:
            doc.update(extra)
        (d / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # ---- ingested inputs ------------------------------------------------
    def city(self, stage: str) -> SpatialIndex:
        if "city" not in self._cache:
            roads = self.out / "ingest" / "roads.csv"
            self._cache["city"] = ingest_city(
                self.require(stage, "ingest", "pois.csv"),
                self.require(stage, "ingest", "regions.csv"),
                roads if roads.exists() else None,
            )
        return self._cache["city"]

    def intents(self, stage: str) -> IntentMap:
        return IntentMap.load(self.require(stage, "ingest", "intents.csv"))

    def profiles(self, stage: str) -> dict[str, UserProfile]:
        return {p.user_id: p for p in load_profiles(self.require(stage, "ingest", "profiles.csv"))}

    def trajectories(self, stage: str) -> list[Trajectory]:
        if "trajs" not in self._cache:
            self._cache["trajs"] = load_trajectories(
                self.require(stage, "ingest", "trajectories.csv"), self.city(stage), self.intents(stage), self.config.utc_offset_hours
            )
        return self._cache["trajs"]

    def cohort_trajectories(self, stage: str, users) -> list[Trajectory]:
        keep = set(users)
        return [t for t in self.trajectories(stage) if t.user_id in keep]

    def eval_config(self, stage: str) -> EvalConfig:
        return EvalConfig.for_index(self.city(stage), utc_offset_hours=self.config.utc_offset_hours)


# ---------------------------------------------------------------------------
# stages


def stage_ingest(run: Run) -> dict:
    cfg = run.config
    d = run.stage_dir("ingest")
    index = ingest_city(cfg.data.pois, cfg.data.regions or None, cfg.data.roads or None)
    intents = IntentMap.load(cfg.data.intents) if cfg.data.intents else IntentMap()
    profiles = load_profiles(cfg.data.profiles)
    known = {p.user_id for p in profiles}
    missing = sorted((set(cfg.cohort.template_users) | set(cfg.cohort.test_users)) - known)
    if missing:
        raise StageError(f"cohort users without a profile: {', '.join(missing)}")
    report = LoadReport()
    trajs = load_trajectories(cfg.data.trajectories, index, intents, cfg.utc_offset_hours, report)
    files = [d / n for n in ("pois.csv", "regions.csv", "roads.csv", "intents.csv", "profiles.csv", "trajectories.csv", "ingest_report.json")]
    write_pois(index, files[0])
    write_regions(index, files[1])
    write_roads(index, files[2])
    intents.write(files[3])
    write_profiles(profiles, files[4])
    write_trajectories(trajs, files[5], cfg.utc_offset_hours)
    summary = {
        "pois": len(index.pois),
        "pseudo_hierarchy": index.pseudo_hierarchy,
        "road_edges": len(index.roads.edges),
        "users": len(profiles),
        "trajectory_days": len(trajs),
        "dropped_unresolvable": report.dropped_unresolvable,
        "duplicate_timestamps": report.duplicate_timestamps,
    }
    files[6].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    run._cache.clear()
    return {"artifacts": files, "summary": summary}


def stage_extract(run: Run) -> dict:
    cfg = run.config
    st = "extract"
    d = run.stage_dir(st)
    index, intents, profiles = run.city(st), run.intents(st), run.profiles(st)
    trajs = by_user(run.cohort_trajectories(st, cfg.cohort.template_users))
    gw = run.gateway(st)
    users = [u for u in cfg.cohort.template_users if u in trajs]
    if not users:
        raise StageError("no template user has trajectories")

    def one(uid: str):
        prof = profiles[uid]
        days = trajs[uid]
        rec = ext.compress(gw, prof, days, index, cfg.address_style, cfg.utc_offset_hours)
        cands = ext.recovery_candidates(days, index, cfg.extractor.recovery_extra)
        recon = []
        for t in days[: cfg.extractor.reconstruct_days]:
            recon.append(ext.reconstruct(gw, prof, rec, cands, t.day, index, intents, cfg.utc_offset_hours))
        first = recon[0]
        return replace(rec, r1=first.r1, r2=first.r2), recon

    results = gw.map(one, users)
    records = [r for r, _ in results]
    files = [d / "patterns.jsonl", d / "reconstructed.csv", d / "embeddings.csv", d / "transcripts.jsonl"]
    ext.write_patterns(records, files[0])
    write_trajectories([x.trajectory for _, rs in results for x in rs], files[1], cfg.utc_offset_hours)
    ext.EmbeddingMatrix.from_embeddings([ext.embed_profile(profiles[u]) for u in users]).save(files[2])
    files.append(files[2].with_suffix(".ids"))
    gw.write_transcript(files[3])
    dropped = sum(x.dropped_names for _, rs in results for x in rs)
    return {"artifacts": files, "summary": {"templates": len(records), "dropped_names": dropped}}


def stage_synthesize_patterns(run: Run) -> dict:
    cfg = run.config
    st = "synthesize-patterns"
    d = run.stage_dir(st)
    records = {r.user_id: r for r in ext.read_patterns(run.require(st, "extract", "patterns.jsonl"))}
    profiles = run.profiles(st)
    templates = [profiles[u] for u in cfg.cohort.template_users if u in records]
    k = min(cfg.extractor.k, len(templates))
    matrix = ext.EmbeddingMatrix.from_embeddings([ext.embed_profile(p) for p in templates])
    gw = run.gateway(st)

    def one(uid: str) -> ext.FusedPattern:
        target = profiles[uid]
        if cfg.extractor.retrieval == "llm":
            sims = ext.top_k_similar_llm(gw, target, templates, k)
        else:
            sims = ext.top_k_similar(ext.embed_profile(target), matrix, k)
        return ext.fuse(gw, target, [records[u] for u, _ in sims], sims)

    fused = gw.map(one, list(cfg.cohort.test_users))
    files = [d / "fused.jsonl", d / "transcripts.jsonl"]
    ext.write_fused(fused, files[0])
    gw.write_transcript(files[1])
    return {"artifacts": files, "summary": {"test_users": len(fused)}}


def truth_anchors(run: Run, stage: str) -> dict[str, dict[str, str]]:
    cfg = run.config
    if cfg.data.anchors:
        out: dict[str, dict[str, str]] = {}
        with open(cfg.data.anchors, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                out.setdefault(r["user_id"], {})[r["kind"]] = r["poi_id"]
        return out
    return anc.infer_anchors(run.cohort_trajectories(stage, cfg.cohort.template_users), cfg.utc_offset_hours)


def stage_anchors(run: Run) -> dict:
    cfg = run.config
    st = "anchors"
    d = run.stage_dir(st)
    index, intents, profiles = run.city(st), run.intents(st), run.profiles(st)
    truth = truth_anchors(run, st)
    gw = run.gateway(st)
    test = [profiles[u] for u in cfg.cohort.test_users]
    assignments, advice, summary = [], [], {}
    error = ""
    for kind in anc.KINDS:
        known = [(profiles[u], a[kind]) for u, a in sorted(truth.items()) if u in profiles and kind in a and index.has_poi(a[kind])]
        if not known:
            raise StageError(f"no template users with a known {kind} anchor")
        summaries = anc.summarize_all(known, index)
        dist = anc.region_distribution([p for _, p in known], cfg.anchors.level, index)
        res = anc.run_anchor_cascade(
            gw, test, kind, summaries, dist, index, intents,
            cfg.anchors.rounds, cfg.anchors.threshold, cfg.anchors.level, cfg.anchors.reflect_with_llm,
        )
        assignments += res.assignments
        advice += res.advice
        summary[kind] = {
            "rounds": len(res.advice),
            "jsd": [a.jsd_value for a in res.advice],
            "reasks": sum(a.reasks for a in res.assignments),
            "fallbacks": sum(a.fallbacks for a in res.assignments),
            "backtracks": sum(a.backtracks for a in res.assignments),
            "partial": res.partial,
        }
        if res.partial:
            error = res.error
            break
    files = [d / "anchors.csv", d / "advice.jsonl", d / "anchors_report.json", d / "transcripts.jsonl"]
    anc.write_anchors(assignments, files[0])
    files[1].write_text("".join(a.to_json() + "\n" for a in advice), encoding="utf-8")
    files[2].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    gw.write_transcript(files[3])
    if error:
        run.manifest(st, time.time(), files, {"partial": True})
        raise StageError(f"anchor cascade aborted: {error}")
    return {"artifacts": files, "summary": summary}


def stage_build_graph(run: Run) -> dict:
    cfg = run.config
    st = "build-graph"
    d = run.stage_dir(st)
    g = mp.build_transition_graph(
        run.cohort_trajectories(st, cfg.cohort.template_users), cfg.mapper.alpha, cfg.mapper.epsilon, run.city(st)
    )
    path = d / "graph.csv"
    g.write_csv(path)
    return {"artifacts": [path], "summary": {"edges": len(g.edges), "skipped": g.skipped}}


@dataclass
class SimulationInputs:
    fused: dict[str, ext.FusedPattern]
    anchors: dict[str, dict[str, str]]
    graph: Optional[mp.TransitionGraph]


def simulation_inputs(run: Run, stage: str) -> SimulationInputs:
    cfg = run.config
    fused = {f.target_user_id: f for f in ext.read_fused(run.require(stage, "synthesize-patterns", "fused.jsonl"))}
    anchors: dict[str, dict[str, str]] = {}
    for a in anc.read_anchors(run.require(stage, "anchors", "anchors.csv")):
        anchors.setdefault(a.user_id, {})[a.kind] = a.poi_id
    graph = None
    if cfg.mapper.variant == "S":
        graph = mp.TransitionGraph.read_csv(run.require(stage, "build-graph", "graph.csv"), cfg.mapper.alpha, cfg.mapper.epsilon)
    return SimulationInputs(fused, anchors, graph)


def generate(run: Run, stage: str, gw: Gateway, inputs: SimulationInputs) -> tuple[enh.RoundOutput, list[enh.ActivityPlan], dict]:
    """Plan and synthesize every real day of every test user."""
    cfg = run.config
    index, intents, profiles = run.city(stage), run.intents(stage), run.profiles(stage)
    neighbours = by_user(run.cohort_trajectories(stage, cfg.cohort.template_users))
    test_days = by_user(run.cohort_trajectories(stage, cfg.cohort.test_users))
    m = cfg.mapper

    def make_mapper(uid: str) -> enh.Mapper:
        prof = profiles[uid]
        pattern = inputs.fused[uid]
        neigh = [t for u, _ in pattern.sources for t in neighbours.get(u, [])]

        def mapper(intent: str, prev: str, ctx) -> mp.CandidateList:
            if m.variant == "S":
                return mp.candidates_social(prev, neigh, inputs.graph, m.k, index)
            if m.variant == "M":
                try:
                    return mp.candidates_map(intent, index.poi(prev).coord, index, intents, m.radius_km, m.k)
                except mp.MapperError:
                    return mp.CandidateList(())
            return mp.candidates_llm(gw, prev, prof, pattern.text(), intent, index, m.k, cfg.address_style, ctx)

        return mapper

    def one(uid: str):
        if uid not in inputs.fused:
            raise DependencyError(stage, run.out / "synthesize-patterns" / "fused.jsonl")
        if uid not in inputs.anchors or "home" not in inputs.anchors[uid]:
            raise DependencyError(stage, run.out / "anchors" / "anchors.csv")
        mapper = make_mapper(uid)
        out = []
        for t in test_days.get(uid, []):
            plan = enh.plan_day(gw, profiles[uid], inputs.fused[uid], t.day)
            syn = enh.synthesize_trajectory(
                gw, plan, inputs.anchors[uid], mapper, index, profiles[uid], inputs.fused[uid],
                intents, cfg.address_style, cfg.utc_offset_hours,
            )
            out.append((plan, syn))
        return out

    results = gw.map(one, list(cfg.cohort.test_users))
    plans = [p for r in results for p, _ in r]
    syns = [s for r in results for _, s in r]
    tvr = [x for s in syns for x in s.tvr_samples]
    stats = {
        "days": len(syns),
        "stays": sum(s.stays for s in syns),
        "fallbacks": sum(s.fallbacks for s in syns),
        "homes_inserted": sum(p.home_inserted for p in plans),
        "tvr_samples": [list(x) for x in tvr],
    }
    return enh.RoundOutput([s.trajectory for s in syns], tvr), plans, stats


def stage_simulate(run: Run) -> dict:
    st = "simulate"
    inputs = simulation_inputs(run, st)
    d = run.stage_dir(st)
    gw = run.gateway(st)
    out, plans, stats = generate(run, st, gw, inputs)
    files = [d / "trajectories.csv", d / "plans.jsonl", d / "simulate_report.json", d / "transcripts.jsonl"]
    write_trajectories(out.trajectories, files[0], run.config.utc_offset_hours)
    files[1].write_text("".join(p.to_json() + "\n" for p in plans), encoding="utf-8")
    files[2].write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    gw.write_transcript(files[3])
    return {"artifacts": files, "summary": {k: v for k, v in stats.items() if k != "tvr_samples"}}


def stage_evaluate(run: Run) -> dict:
    cfg = run.config
    st = "evaluate"
    d = run.stage_dir(st)
    index, intents = run.city(st), run.intents(st)
    gen = load_trajectories(run.require(st, "simulate", "trajectories.csv"), index, intents, cfg.utc_offset_hours)
    sim_report = json.loads(run.require(st, "simulate", "simulate_report.json").read_text(encoding="utf-8"))
    real = run.cohort_trajectories(st, cfg.cohort.test_users)
    ec = run.eval_config(st)
    tvr = [tuple(x) for x in sim_report.get("tvr_samples", [])] if cfg.mapper.variant == "E" else None
    report = evaluate(gen, real, ec, tvr)
    files = [d / "report.json"]
    files[0].write_text(report.to_json(), encoding="utf-8")
    files += write_plot_data(gen, real, ec, d / "plots")
    if cfg.compare:
        reports = {"mobsim": report}
        for name, path in sorted(cfg.compare.items()):
            other = load_trajectories(path, index, intents, cfg.utc_offset_hours)
            reports[name] = evaluate(other, real, ec)
            (d / f"report_{name}.json").write_text(reports[name].to_json(), encoding="utf-8")
            files.append(d / f"report_{name}.json")
        table = cmrr(reports, tvr_included=False)
        table.write_csv(d / "cmrr.csv")
        files.append(d / "cmrr.csv")
    return {"artifacts": files, "summary": {"mean_jsd": report.mean_jsd()}}


def stage_finetune_data(run: Run) -> dict:
    cfg = run.config
    st = "finetune-data"
    d = run.stage_dir(st)
    index = run.city(st)
    f = cfg.finetune
    radius = f.radius_km if f.radius_km is not None else mp.mean_jump_km(run.trajectories(st))
    pairs = mp.build_finetune_dataset(index, f.n_pairs, radius, f.categories, cfg.rng_seed, f.capture_km, f.step_km, cfg.address_style)
    path = d / "finetune.jsonl"
    mp.write_finetune_dataset(pairs, path)
    return {"artifacts": [path], "summary": {"pairs": len(pairs), "radius_km": radius}}


def stage_dpo_data(run: Run) -> dict:
    cfg = run.config
    st = "dpo-data"
    d = run.stage_dir(st)
    entries = read_transcript(run.require(st, "simulate", "transcripts.jsonl"))
    extract_log = run.out / "extract" / "transcripts.jsonl"
    if extract_log.exists():
        entries = read_transcript(extract_log) + entries
    gw = run.gateway(st)
    res = enh.build_dpo_dataset(gw, entries, run.trajectories(st), cfg.dpo.threshold, cfg.dpo.stages, cfg.utc_offset_hours)
    files = [d / "dpo.jsonl", d / "judged.jsonl", d / "dpo_report.json", d / "transcripts.jsonl"]
    enh.write_pairs(res.pairs, files[0])
    enh.write_pairs(res.judged, files[1])
    summary = {"pairs": len(res.pairs), "judged": len(res.judged), "skipped_unjoinable": res.skipped_unjoinable, "judge_errors": res.judge_errors}
    files[2].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    gw.write_transcript(files[3])
    return {"artifacts": files, "summary": summary}


def stage_iterate(run: Run) -> dict:
    cfg = run.config
    st = "iterate"
    if cfg.iterate.rounds < 1:
        raise StageError("iterate.rounds is 0; configure rounds and per-round backends")
    inputs = simulation_inputs(run, st)
    d = run.stage_dir(st)
    real = run.cohort_trajectories(st, cfg.cohort.test_users)
    ec = run.eval_config(st)
    res = enh.iterate_enhancement(
        lambda r: run.gateway(st, r),
        lambda gw: generate(run, st, gw, inputs)[0],
        real, ec, cfg.iterate.rounds, d, cfg.dpo.threshold, cfg.dpo.stages,
    )
    files = sorted(p for p in d.rglob("*") if p.is_file() and p.name != "manifest.json")
    summary = {"rounds_completed": len(res.reports), "mean_jsd": [r.mean_jsd() for r in res.reports], "partial": res.partial}
    (d / "iterate_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(d / "iterate_report.json")
    if res.partial:
        run.manifest(st, time.time(), files, {"partial": True})
        raise StageError(f"no backend for round {res.stopped_at}; stopped after {len(res.reports)} rounds")
    return {"artifacts": files, "summary": summary}


RUNNERS = {
    "ingest": stage_ingest,
    "extract": stage_extract,
    "synthesize-patterns": stage_synthesize_patterns,
    "anchors": stage_anchors,
    "build-graph": stage_build_graph,
    "simulate": stage_simulate,
    "evaluate": stage_evaluate,
    "finetune-data": stage_finetune_data,
    "dpo-data": stage_dpo_data,
    "iterate": stage_iterate,
}


def run_stage(run: Run, stage: str) -> dict:
    started = time.time()
    result = RUNNERS[stage](run)
    run.manifest(stage, started, result["artifacts"], {"summary": result.get("summary", {})})
    log.info("%s done", stage)
    return result


def run_all(run: Run) -> dict[str, dict]:
    out = {}
    for stage in STAGES:
        if stage == "iterate" and run.config.iterate.rounds < 1:
            continue
        out[stage] = run_stage(run, stage)
    return out
