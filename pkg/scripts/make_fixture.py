"""Regenerate the bundled synthetic city and its recorded model scripts.

The city, users and trajectories come from a seeded generator. The scripts are
recorded by driving every pipeline stage with a rule-based policy backend and
converting each stage's transcript into replayable `{stage_id, ordinal, response}`
entries.

    python3 scripts/make_fixture.py [--dest src/mobsim/fixtures]
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import re
import shutil
import tempfile
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from mobsim.config import load_config
from mobsim.llm import BackendRequest, FunctionBackend, read_transcript, transcript_to_script
from mobsim.pipeline import STAGES, Run, run_stage
from mobsim.urban import ingest_city

SEED = 20240304
LAT0, LON0 = 31.2200, 121.4500
BLOCK_DEG_LAT, BLOCK_DEG_LON = 0.0054, 0.0063  # roughly 600 m x 600 m
DAYS = [date(2024, 3, 4), date(2024, 3, 5), date(2024, 3, 6)]
TZ = timezone(timedelta(hours=8))

ADMINS = [("A1", "Westbank"), ("A2", "Eastgate")]
SUBDISTRICTS = [("S1", "Maple Ward", "A1"), ("S2", "Cedar Ward", "A1"), ("S3", "Harbor Ward", "A2"), ("S4", "Lotus Ward", "A2")]
STREETS = [
    ("T1", "Birch Lane", "S1"), ("T2", "Elm Row", "S1"),
    ("T3", "Willow Street", "S2"), ("T4", "Aspen Way", "S2"),
    ("T5", "Pier Street", "S3"), ("T6", "Anchor Lane", "S3"),
    ("T7", "Jade Street", "S4"), ("T8", "Pearl Lane", "S4"),
]
NS_ROADS = ["West Avenue", "Central Avenue", "East Avenue"]
EW_ROADS = ["South Road", "Middle Road", "North Road"]

# (street, name, category): 30 POIs, 3-4 per street
POIS = [
    ("T1", "Birch Court", "Residence"), ("T1", "Morning Bakery", "Food"), ("T1", "Maple Primary School", "School"), ("T1", "Birch Gym", "Gym"),
    ("T2", "Elm Gardens", "Residence"), ("T2", "Corner Market", "Shopping"), ("T2", "Elm Clinic", "Hospital"),
    ("T3", "Willow Towers", "Office"), ("T3", "Noodle House", "Food"), ("T3", "Willow Apartments", "Residence"), ("T3", "Cedar Cafe", "Cafe"),
    ("T4", "Aspen Park", "Park"), ("T4", "Aspen Residences", "Residence"), ("T4", "Book Nook", "Shopping"),
    ("T5", "Harbor Station", "Transit"), ("T5", "Pier Offices", "Office"), ("T5", "Seafood Grill", "Food"), ("T5", "Harbor Lofts", "Residence"),
    ("T6", "Anchor Mall", "Shopping"), ("T6", "Anchor Cinema", "Arts & Entertainment"), ("T6", "Dockside Homes", "Residence"),
    ("T7", "Jade Tech Park", "Office"), ("T7", "Jade University", "College & University"), ("T7", "Tea Pavilion", "Cafe"), ("T7", "Jade Hospital", "Hospital"),
    ("T8", "Pearl Plaza", "Office"), ("T8", "Pearl Flats", "Residence"), ("T8", "Lotus Sports Center", "Sports"),
    ("T5", "Ferry Terminal", "Transit"), ("T8", "Night Market", "Food"),
]
WEIGHT = {"Residence": 3.0, "Office": 2.0}
STREET_BLOCK = {"T1": (0, 0), "T2": (0, 1), "T3": (1, 0), "T4": (1, 1), "T5": (2, 0), "T6": (2, 1), "T7": (3, 0), "T8": (3, 1)}

OCCUPATIONS = ["engineer", "teacher", "student", "clerk", "nurse", "designer"]
INCOMES = ["low", "middle", "high"]
EDUCATION = ["high school", "bachelor", "master"]
AGES = ["18-24", "25-34", "35-44", "45-54"]


def _h(*parts) -> int:
    return int.from_bytes(hashlib.blake2b("|".join(map(str, parts)).encode(), digest_size=8).digest(), "big")


# ---------------------------------------------------------------------------
# synthetic city and population


def write_city(dest: Path, rng: np.random.Generator) -> list[dict]:
    with open(dest / "regions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "name", "level", "parent_id"])
        for rid, name in ADMINS:
            w.writerow([rid, name, "admin", ""])
        for rid, name, parent in SUBDISTRICTS:
            w.writerow([rid, name, "subdistrict", parent])
        for rid, name, parent in STREETS:
            w.writerow([rid, name, "street", parent])

    sub_of = {s: p for s, _, p in STREETS}
    admin_of = {s: p for s, _, p in SUBDISTRICTS}
    rows = []
    for i, (street, name, cat) in enumerate(POIS, start=1):
        bx, by = STREET_BLOCK[street]
        lat = LAT0 + (by + 0.15 + 0.7 * rng.random()) * BLOCK_DEG_LAT
        lon = LON0 + (bx + 0.15 + 0.7 * rng.random()) * BLOCK_DEG_LON
        rows.append(
            {
                "id": f"P{i:02d}", "name": name, "category": cat, "lat": round(lat, 6), "lon": round(lon, 6),
                "admin": admin_of[sub_of[street]], "subdistrict": sub_of[street], "street": street,
                "population_weight": WEIGHT.get(cat, 1.0),
            }
        )
    with open(dest / "pois.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    # three north-south and three east-west roads, split where they cross
    xs = [LON0 + k * 2 * BLOCK_DEG_LON for k in range(3)]
    ys = [LAT0 + k * BLOCK_DEG_LAT for k in range(3)]
    with open(dest / "roads.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["road_name", "lat1", "lon1", "lat2", "lon2"])
        for name, x in zip(NS_ROADS, xs):
            for y1, y2 in zip(ys, ys[1:]):
                w.writerow([name, round(y1, 6), round(x, 6), round(y2, 6), round(x, 6)])
        for name, y in zip(EW_ROADS, ys):
            for x1, x2 in zip(xs, xs[1:]):
                w.writerow([name, round(y, 6), round(x1, 6), round(y, 6), round(x2, 6)])

    with open(dest / "intents.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "intent"])
        for cat, intent in sorted(
            {
                "Residence": "home", "Office": "work", "Food": "dining", "Cafe": "dining", "Shopping": "shopping",
                "School": "education", "College & University": "education", "Hospital": "medical", "Park": "recreation",
                "Arts & Entertainment": "recreation", "Transit": "transit", "Gym": "sports", "Sports": "sports",
            }.items()
        ):
            w.writerow([cat, intent])
    return rows


def write_population(dest: Path, pois: list[dict], rng: np.random.Generator) -> None:
    by_cat: dict[str, list[dict]] = {}
    for p in pois:
        by_cat.setdefault(p["category"], []).append(p)
    street_name = {t: n for t, n, _ in STREETS}
    homes = by_cat["Residence"]
    offices = by_cat["Office"]
    leisure = [p for p in pois if p["category"] in ("Food", "Cafe", "Shopping", "Park", "Gym", "Sports", "Arts & Entertainment")]
    profiles, points = [], []
    for u in range(1, 13):
        uid = f"u{u:02d}"
        occ = OCCUPATIONS[(u - 1) % len(OCCUPATIONS)]
        home = homes[(u * 5) % len(homes)]
        if occ == "student":
            work = by_cat["College & University"][0]
        elif occ == "teacher":
            work = by_cat["School"][0]
        elif occ == "nurse":
            work = by_cat["Hospital"][u % 2]
        else:
            work = offices[(u * 3) % len(offices)]
        profiles.append(
            {
                "user_id": uid, "age": AGES[u % len(AGES)], "gender": "female" if u % 2 else "male",
                "income": INCOMES[u % 3], "education": EDUCATION[(u // 2) % 3], "occupation": occ,
                "home_hint": street_name[home["street"]],
            }
        )
        favourites = [leisure[int(i)] for i in rng.choice(len(leisure), size=3, replace=False)]
        for d in DAYS:
            def at(h: float, p: dict):
                ts = datetime(d.year, d.month, d.day, tzinfo=TZ) + timedelta(hours=h)
                points.append([uid, ts.isoformat(), p["id"], p["lat"], p["lon"], p["category"]])

            at(7.0 + rng.integers(0, 60) / 60, home)
            at(8.75 + rng.integers(0, 45) / 60, work)
            at(12.0 + rng.integers(0, 30) / 60, favourites[int(rng.integers(0, 2))])
            at(13.25 + rng.integers(0, 30) / 60, work)
            if rng.random() < 0.6:
                at(18.0 + rng.integers(0, 60) / 60, favourites[2])
            at(20.5 + rng.integers(0, 60) / 60, home)
    with open(dest / "profiles.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(profiles[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(profiles)
    with open(dest / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "timestamp_iso8601", "poi_id", "lat", "lon", "category"])
        w.writerows(points)


CONFIG = """\
# Bundled synthetic city: 30 POIs, 2 admin areas / 4 subdistricts / 8 streets,
# 6 roads, 12 users (8 template, 4 test), replayed model scripts.
data:
  pois: pois.csv
  regions: regions.csv
  roads: roads.csv
  profiles: profiles.csv
  trajectories: trajectories.csv
  intents: intents.csv
cohort:
  template_users: [u01, u02, u03, u04, u05, u06, u07, u08]
  test_users: [u09, u10, u11, u12]
backend:
  kind: scripted
  script: scripts/{stage}.jsonl
output_dir: out
address_style: hierarchical
utc_offset_hours: 8
rng_seed: 7
extractor:
  retrieval: embedding
  k: 3
  reconstruct_days: 1
anchors:
  rounds: 3
  threshold: 0.05
  level: subdistrict
  reflect_with_llm: true
mapper:
  variant: E
  k: 5
  alpha: 1.0
  epsilon: 1.0e-6
  radius_km: 2.0
finetune:
  n_pairs: 200
dpo:
  threshold: 5
iterate:
  rounds: 2
  backends:
    - {kind: scripted, script: scripts/iterate_round1.jsonl}
    - {kind: scripted, script: scripts/iterate_round2.jsonl}
"""


# ---------------------------------------------------------------------------
# rule-based policy used to record the scripts


class Policy:
    def __init__(self, index, profiles: dict[str, dict], sloppiness: int = 0):
        self.index = index
        self.profiles = profiles
        self.sloppiness = sloppiness

    def _user(self, profile_text: str) -> dict:
        for p in self.profiles.values():
            if f"occupation: {p['occupation']}" in profile_text and f"home hint: {p['home_hint']}" in profile_text and f"age: {p['age']}" in profile_text:
                return p
        return {}

    def __call__(self, req: BackendRequest) -> str:
        v = req.variables
        fn = getattr(self, "_" + req.stage_id)
        return fn(v)

    def _c1_compress(self, v):
        stats = json.loads(v["stats"])
        top = sorted(stats["visits_per_intent"].items(), key=lambda kv: -kv[1])[:3]
        return (
            f"Over {stats['days']} days this resident made {stats['points']} visits, mostly "
            + ", ".join(f"{k} ({n})" for k, n in top)
            + f". Typical step length is {stats['mean_step_km']:.2f} km."
        )

    def _c2_compress(self, v):
        return "Leaves home between 07:00 and 08:00, works until late afternoon, lunches nearby and returns home in the evening."

    def _r1_reconstruct(self, v):
        return json.dumps({"description": f"A resident whose routine reads: {v['c1'][:120]}", "rules": "home early, work by nine, lunch at noon, home after dark"})

    def _r2_reconstruct(self, v):
        cands = re.findall(r"^- (.+) \(([^()]+)\)$", v["candidates"], flags=re.M)
        def first(cats, default):
            return next((n for n, c in cands if c in cats), default)
        home = first({"Residence"}, cands[0][0])
        work = first({"Office", "School", "College & University", "Hospital"}, cands[-1][0])
        lunch = first({"Food", "Cafe"}, work)
        visits = [{"time": "07:30", "place": home}, {"time": "09:00", "place": work}, {"time": "12:10", "place": lunch},
                  {"time": "13:30", "place": work}, {"time": "20:45", "place": home}]
        return json.dumps({"rules": "weekday commute with a lunch break", "visits": visits})

    def _retrieve_similar(self, v):
        ids = re.findall(r"^(\S+):", v["templates"], flags=re.M)
        return json.dumps({"users": [{"id": i, "score": 0.5} for i in ids[: int(v["k"])]]})

    def _fuse_c1(self, v):
        return "Neighbours share an early commute and a noon meal close to work."

    def _gen_description(self, v):
        return "A weekday commuter with a short lunch trip and occasional evening errands."

    def _fuse_c2(self, v):
        return "Home before 08:00, work 09:00-18:00 with lunch at 12:00, optional shopping or leisure at 18:30, home by 21:00."

    def _region_reason(self, v):
        return f"For the {v['kind']} at {v['level']} level, weigh the resident profile against the listed residents. Advice: {v['advice']}"

    def _region_execute(self, v):
        opts = re.findall(r"^(\S+): (.+?)(?: \(([^()]+)\))?$", v["options"], flags=re.M)
        user = self._user(v["profile"])
        ids = [o[0] for o in opts]
        if v["level"] == "poi":
            want = "Residence" if v["kind"] == "home" else "Office"
            pick = next((o[0] for o in opts if o[2] == want), ids[0])
        else:
            pick = None
            if v["kind"] == "home" and user:
                street = next((r for r in self.index.regions("street") if r.name == user["home_hint"]), None)
                if street is not None:
                    sub = self.index.region("subdistrict", street.parent_id)
                    target = {"admin": sub.parent_id, "subdistrict": sub.id, "street": street.id}[v["level"]]
                    pick = target if target in ids else None
            if pick is None or _h(v["profile"], v["kind"], v["level"]) % 4 < self.sloppiness:
                pick = ids[_h(v["profile"], v["kind"], v["level"], v["options"]) % len(ids)]
        return json.dumps({"choice": pick})

    def _region_reflect(self, v):
        return f"Move some residents away from {v['over']} and towards {v['under']}."

    def _mapper_candidates(self, v):
        from mobsim.data import IntentMap

        cats = set(IntentMap().categories_for(v["intent"]))
        pool = [p for p in self.index.pois if p.category in cats] or list(self.index.pois)
        pool.sort(key=lambda p: _h(v["current"], v["intent"], p.id))
        names = [p.name for p in pool[: int(v["k"]) - 1]] + ["Moonlight Arcade"]
        return json.dumps({"places": names})

    def _plan_day(self, v):
        user = self._user(v["profile"])
        day = v["day"][:10]
        evening = _h(v["profile"], day) % 3
        slots = [("home", "00:00", "07:40"), ("work", "08:50", "12:00"), ("dining", "12:05", "13:15"), ("work", "13:20", "18:00")]
        if user.get("occupation") == "student":
            slots[1] = ("education", "08:50", "12:00")
            slots[3] = ("education", "13:20", "18:00")
        if evening == 1:
            slots.append(("shopping", "18:30", "20:00"))
        elif evening == 2:
            slots.append(("recreation", "18:30", "20:00"))
        slots.append(("home", "20:40", "23:59"))
        return json.dumps({"slots": [{"intent": i, "start": s, "end": e} for i, s, e in slots]})

    def _synthesize_traj(self, v):
        n = len(re.findall(r"^\d+\. ", v["candidates"], flags=re.M))
        pick = 1 if self.sloppiness == 0 else 1 + _h(v["candidates"], v["start"]) % n
        return json.dumps({"choice": pick})

    def _judge_quality(self, v):
        return json.dumps({"score": _h(v["output"]) % 11})


def record_scripts(dest: Path) -> None:
    cfg = load_config(dest / "config.yaml")
    index = ingest_city(dest / "pois.csv", dest / "regions.csv", dest / "roads.csv")
    with open(dest / "profiles.csv", newline="") as fh:
        profiles = {r["user_id"]: r for r in csv.DictReader(fh)}

    def factory(stage, round_no):
        if round_no is not None:
            if round_no > cfg.iterate.rounds:
                return None
            return FunctionBackend(Policy(index, profiles, sloppiness=cfg.iterate.rounds - round_no), order_sensitive=True)
        return FunctionBackend(Policy(index, profiles), order_sensitive=True)

    scripts = dest / "scripts"
    if scripts.exists():
        shutil.rmtree(scripts)
    scripts.mkdir()
    with tempfile.TemporaryDirectory() as tmp:
        from dataclasses import replace

        run = Run(replace(cfg, output_dir=tmp), backend_factory=factory)
        for stage in STAGES:
            run_stage(run, stage)
            log = Path(tmp) / stage / "transcripts.jsonl"
            if log.exists():
                _dump(scripts / f"{stage}.jsonl", transcript_to_script(read_transcript(log)))
        for r in range(1, cfg.iterate.rounds + 1):
            _dump(scripts / f"iterate_round{r}.jsonl", transcript_to_script(read_transcript(Path(tmp) / "iterate" / f"round_{r}" / "transcripts.jsonl")))


def _dump(path: Path, entries: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, ensure_ascii=False, sort_keys=True) + "\n")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dest", default=str(Path(__file__).resolve().parents[1] / "src" / "mobsim" / "fixtures"))
    args = ap.parse_args()
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(SEED)
    pois = write_city(dest, rng)
    write_population(dest, pois, rng)
    (dest / "config.yaml").write_text(CONFIG)
    record_scripts(dest)
    print(f"fixture written to {dest}")


if __name__ == "__main__":
    main()
