import math
import random
import re
from datetime import date

import pytest

from mobsim.anchors import (
    AnchorAssignment,
    AssignmentError,
    affinity_choice,
    assign_anchor,
    fallback_poi,
    infer_anchors,
    read_anchors,
    reflect,
    region_distribution,
    run_anchor_cascade,
    summarize_all,
    summarize_regions,
    write_anchors,
)
from mobsim.data import IntentMap, UserProfile
from mobsim.llm import FunctionBackend, Gateway, scripted_gateway
from mobsim.urban import LEVELS, Poi, Region, SpatialIndex

from conftest import make_traj, structured, tiny_city

PROF = UserProfile("u1", (("age", "30"), ("occupation", "engineer")))


def _summaries(index, users=()):
    return summarize_all(list(users), index)


def _script(choices):
    return scripted_gateway({"region_reason": ["thinking"] * 20, "region_execute": [structured(choice=c) for c in choices]})


def test_valid_cascade_by_id_and_name():
    idx = tiny_city()
    gw = _script(["A1", "hill", "T2", "Tower One"])
    a = assign_anchor(gw, PROF, "work", _summaries(idx), idx)
    assert (a.trail, a.poi_id) == (("A1", "S1", "T2"), "P3")
    assert (a.reasks, a.fallbacks, a.backtracks) == (0, 0, 0)
    assert [e.stage_id for e in gw.transcript] == ["region_reason", "region_execute"] * 3 + ["region_execute"]
    assert all(e.context == {"user_id": "u1", "kind": "work", "iteration": 1} for e in gw.transcript)


def test_invalid_then_valid_choice():
    idx = tiny_city()
    gw = _script(["Atlantis", "A1", "S1", "T1", "P2"])
    a = assign_anchor(gw, PROF, "home", _summaries(idx), idx)
    assert a.trail == ("A1", "S1", "T1") and a.poi_id == "P2"
    assert a.reasks == 1 and a.fallbacks == 0
    assert "Atlantis" in gw.transcript[2].prompt


def test_double_invalid_uses_affinity_fallback():
    idx = tiny_city()
    gw = _script(["nope", "nope2", "S1", "T1", "P2"])
    a = assign_anchor(gw, PROF, "home", _summaries(idx), idx)
    # empty summaries score every option zero, so the lowest id wins
    assert a.trail == ("A1", "S1", "T1")
    assert (a.reasks, a.fallbacks) == (1, 1)


def test_poi_outside_street_falls_back():
    idx = tiny_city()
    gw = _script(["A1", "S1", "T1", "P5"])
    a = assign_anchor(gw, PROF, "home", _summaries(idx), idx, IntentMap())
    assert a.poi_id == "P2" == fallback_poi("home", "T1", idx, IntentMap())
    assert a.fallbacks == 1
    assert fallback_poi("work", "T1", idx, IntentMap()) in ("P1", "P2")


def test_backtracks_from_empty_street():
    idx = tiny_city()
    gw = _script(["A2", "S2", "T4", "S2", "T3", "P4"])
    a = assign_anchor(gw, PROF, "home", _summaries(idx), idx)
    assert a.trail == ("A2", "S2", "T3") and a.poi_id == "P4" and a.backtracks == 1
    # the re-asked street options no longer offer T4
    street_prompts = [e.prompt for e in gw.transcript if e.stage_id == "region_reason" and "Fourth St" in e.prompt]
    assert len(street_prompts) == 1


def test_backtrack_limit_raises():
    regions = [Region("A", "A", "admin"), Region("S", "S", "subdistrict", "A")] + [
        Region(t, t, "street", "S") for t in ("T0", "E1", "E2", "E3")
    ]
    idx = SpatialIndex([Poi("p", "P", "Residence", 40, 116, ("A", "S", "T0", "p"))], regions)
    gw = _script(["A", "S", "E1", "S", "E2", "S", "E3", "S", "T0", "p"])
    with pytest.raises(AssignmentError, match="backtrack"):
        assign_anchor(gw, PROF, "home", _summaries(idx), idx)


def _random_users(n, rng):
    ages = ["20", "30", "40", "50"]
    occ = ["student", "engineer", "teacher", "retired"]
    return [UserProfile(f"u{i:02d}", (("age", rng.choice(ages)), ("occupation", rng.choice(occ)))) for i in range(n)]


@pytest.mark.parametrize("seed", range(5))
def test_fuzzed_cascade_keeps_poi_inside_street(seed, city):
    rng = random.Random(seed)
    regions = {r.id: r for lvl in LEVELS for r in city.regions(lvl)}
    junk = ["", "{}", "not json", structured(choice="Atlantis"), structured(choice=42)]

    def policy(req):
        if req.stage_id in ("region_reason", "region_reflect"):
            return "some reasoning"
        opts = [line.split(":")[0] for line in req.variables["options"].splitlines()]
        roll = rng.random()
        if roll < 0.2:
            return rng.choice(junk)
        if roll < 0.3:
            return structured(choice=rng.choice(list(regions) + [p.id for p in city.pois]))
        pick = rng.choice(opts)
        if roll < 0.5 and pick in regions:
            pick = regions[pick].name.upper()
        return structured(choice=pick)

    users = _random_users(50, rng)
    gw = Gateway(FunctionBackend(policy))
    truth = {r.id: 1 for r in city.regions("subdistrict")}
    res = run_anchor_cascade(gw, users, "home", _summaries(city), truth, city, rounds=2, threshold=0.0)
    assert not res.partial and len(res.assignments) == 50
    for a in res.assignments:
        assert city.poi(a.poi_id).region_path[:3] == a.trail
        assert city.region("street", a.trail[2]).parent_id == a.trail[1]
        assert city.region("subdistrict", a.trail[1]).parent_id == a.trail[0]


def _four_district_city():
    regions = [Region("A1", "Centre", "admin")]
    pois = []
    for i in range(1, 5):
        regions += [Region(f"S{i}", f"District {i}", "subdistrict", "A1"), Region(f"T{i}", f"Road {i}", "street", f"S{i}")]
        pois += [Poi(f"H{i}{j}", f"Homes {i}-{j}", "Residence", 40 + i * 0.01, 116 + j * 0.001, ("A1", f"S{i}", f"T{i}", f"H{i}{j}")) for j in range(2)]
    return SpatialIndex(pois, regions)


class Corrective:
    """Everyone starts in S1; each round the first under-served district pulls in its one resident."""

    def __init__(self):
        self.moved: set[str] = set()

    def __call__(self, req):
        v = req.variables
        if req.stage_id == "region_reason":
            target = re.search(r"wants (S\d)", v["profile"]).group(1)
            m = re.search(r"assign more residents to ([^.]*)\.", v["advice"])
            under = m.group(1).split(", ") if m else []
            if v["level"] == "subdistrict" and under and under[0] == target:
                self.moved.add(target)
            if v["level"] != "subdistrict":
                return "first option"
            return target if target in self.moved else "S1"
        opts = [line.split(":")[0] for line in v["options"].splitlines()]
        if v["level"] == "subdistrict":
            return structured(choice=v["reasoning"])
        return structured(choice=opts[0])


def test_corrective_script_drives_jsd_to_zero():
    idx = _four_district_city()
    users = [UserProfile(f"u{i}", (("occupation", f"wants S{i}"),)) for i in range(1, 5)]
    truth = {f"S{i}": 1 for i in range(1, 5)}
    gw = Gateway(FunctionBackend(Corrective(), order_sensitive=True))
    res = run_anchor_cascade(gw, users, "home", _summaries(idx), truth, idx, rounds=5, threshold=0.05)
    values = [a.jsd_value for a in res.advice]
    assert len(values) <= 5
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] == 0.0
    assert sorted(a.trail[1] for a in res.assignments) == ["S1", "S2", "S3", "S4"]
    assert res.assignments[0].iteration == len(values)


def test_reflect_delta_vs_uniform():
    assigns = [AnchorAssignment(f"u{i}", "home", ("A1", "S1", "T1"), "H10", 1) for i in range(4)]
    adv = reflect(assigns, {f"S{i}": 5 for i in range(1, 5)}, "subdistrict")
    m1, m0 = 0.625, 0.125
    oracle = 0.5 * (math.log2(1 / m1) + 0.25 * math.log2(0.25 / m1) + 0.75 * math.log2(0.25 / m0))
    assert abs(adv.jsd_value - oracle) < 1e-12
    assert adv.gaps == {"S1": 0.75, "S2": -0.25, "S3": -0.25, "S4": -0.25}
    assert adv.over == ("S1",) and adv.under == ("S2", "S3", "S4")
    assert abs(sum(adv.contributions.values()) - adv.jsd_value) < 1e-12
    same = reflect(assigns, {"S1": 1}, "subdistrict")
    assert same.jsd_value == 0.0 and same.over == () and same.under == ()


def test_reflect_with_llm_uses_reply():
    assigns = [AnchorAssignment("u", "home", ("A1", "S1", "T1"), "H10", 1)]
    gw = scripted_gateway({"region_reflect": ["Move people east."]})
    assert reflect(assigns, {"S2": 1}, "subdistrict", gw).directive == "Move people east."


def test_summaries_conserve_counts():
    idx = _four_district_city()
    rng = random.Random(1)
    users = _random_users(30, rng)
    anchored = [(u, rng.choice(idx.pois).id) for u in users]
    book = summarize_all(anchored, idx)
    for lvl in LEVELS:
        assert sum(s.total for s in book[lvl].values()) == 30
    for s in book["subdistrict"].values():
        kids = [book["street"][c] for c in s.child_ids]
        assert sum(k.total for k in kids) == s.total
        for attr in ("age", "occupation"):
            assert sum(s.histograms[attr].values()) == s.total
        assert s.histograms["income"] == {}
    dist = region_distribution([p for _, p in anchored], "subdistrict", idx)
    assert {k: v for k, v in dist.items()} == {s.region_id: s.total for s in book["subdistrict"].values() if s.total}
    assert summarize_regions("admin", [], idx)[0].text.endswith("no known residents")


def test_affinity_prefers_matching_residents():
    idx = _four_district_city()
    students = [UserProfile(f"s{i}", (("occupation", "student"),)) for i in range(3)]
    teachers = [UserProfile(f"t{i}", (("occupation", "teacher"),)) for i in range(3)]
    book = summarize_all([(u, "H10") for u in students] + [(u, "H30") for u in teachers], idx)["subdistrict"]
    opts = ["S1", "S2", "S3", "S4"]
    assert affinity_choice(UserProfile("q", (("occupation", "teacher"),)), opts, book) == "S3"
    assert affinity_choice(UserProfile("q", (("occupation", "student"),)), opts, book) == "S1"
    assert affinity_choice(UserProfile("q", (("occupation", "pilot"),)), opts, book) == "S1"


def test_infer_anchors_and_csv_roundtrip(tmp_path):
    idx = tiny_city()
    trajs = [make_traj("u1", date(2024, 3, 4), [(7, "P2"), (10, "P3"), (13, "P1"), (22, "P2")], idx)]
    assert infer_anchors(trajs) == {"u1": {"home": "P2", "work": "P3"}}
    assigns = [AnchorAssignment("u1", "work", ("A1", "S1", "T2"), "P3", 2), AnchorAssignment("u1", "home", ("A1", "S1", "T1"), "P2", 2)]
    write_anchors(assigns, tmp_path / "a.csv")
    assert read_anchors(tmp_path / "a.csv") == sorted(assigns, key=lambda a: a.kind)


def test_cascade_threshold_one_stops_after_first_round():
    idx = tiny_city()
    gw = scripted_gateway({"region_reason": ["x"] * 10, "region_execute": [structured(choice=c) for c in ("A1", "S1", "T1", "P2")] * 3})
    res = run_anchor_cascade(gw, [PROF], "home", _summaries(idx), {"S2": 1}, idx, rounds=3, threshold=1.0)
    assert len(res.advice) == 1 and res.advice[0].jsd_value == 1.0
