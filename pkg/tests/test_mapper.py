import random
from collections import Counter
from datetime import date

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mobsim.data import UserProfile
from mobsim.geo import haversine
from mobsim.llm import Gateway, FunctionBackend, scripted_gateway
from mobsim.mapper import (
    Edge,
    MapperError,
    TransitionGraph,
    build_finetune_dataset,
    build_transition_graph,
    candidates_llm,
    candidates_map,
    candidates_social,
    count_toponyms,
    edge_weight,
    mean_jump_km,
    read_finetune_dataset,
    write_finetune_dataset,
)
from mobsim.urban import Poi, Region, SpatialIndex

from conftest import make_traj, structured, tiny_city

D = date(2024, 3, 4)
PROF = UserProfile("u1", (("age", "30"),))


def test_edge_weight_examples():
    assert edge_weight(5, 2.0, 1.0, 0.1) == 5 / 2.1
    assert edge_weight(3, 7.5, 0.0, 1e-6) == 3 / (1 + 1e-6)
    assert edge_weight(4, 2.0, 2.0, 0.0) == 1.0


def test_graph_tally_matches_oracle(city):
    rng = random.Random(5)
    ids = [p.id for p in city.pois]
    trajs = []
    for u in range(6):
        for d in range(3):
            n = rng.randint(2, 7)
            visits = [(h + 0.5, rng.choice(ids[:8])) for h, _ in zip(sorted(rng.sample(range(24), n)), range(n))]
            trajs.append(make_traj(f"u{u}", date(2024, 3, 4 + d), visits, city))
    g = build_transition_graph(trajs, alpha=1.5, epsilon=0.01, index=city)
    tally = Counter()
    for t in trajs:
        for a, b in zip(t.points, t.points[1:]):
            if a.poi_id != b.poi_id:
                tally[frozenset((a.poi_id, b.poi_id))] += 1
    assert {frozenset(k): e.n for k, e in g.edges.items()} == dict(tally)
    for (a, b), e in g.edges.items():
        assert a < b
        assert e.d_km == haversine(city.poi(a).coord, city.poi(b).coord)
        assert e.w == e.n / (e.d_km**1.5 + 0.01)
        assert g.weight(a, b) == g.weight(b, a) == e.w


def test_graph_skips_missing_coordinates(city):
    t = make_traj("u", D, [(8, "P01"), (9, "P02")], city)
    g = build_transition_graph([t], index=SpatialIndex([city.poi("P01")], [city.region(l, r) for l, r in zip(("admin", "subdistrict", "street"), city.poi("P01").region_path[:3])]))
    assert g.skipped == 1 and not g.edges
    with pytest.raises(MapperError):
        build_transition_graph([t], epsilon=0)


def test_graph_csv_roundtrip(tmp_path, fixture_trajs, city):
    g = build_transition_graph(fixture_trajs, index=city)
    g.write_csv(tmp_path / "g.csv")
    back = TransitionGraph.read_csv(tmp_path / "g.csv")
    assert back.edges == g.edges


def test_social_ranking_on_hand_built_graph():
    # A-B: n=4, d=2 -> 4/2; A-C: n=1, d=0.25 -> 4; A-D: n=3, d=1 -> 3
    g = TransitionGraph(
        {
            ("P1", "P2"): Edge(4, 2.0, edge_weight(4, 2.0, 1.0, 1e-9)),
            ("P1", "P3"): Edge(1, 0.25, edge_weight(1, 0.25, 1.0, 1e-9)),
            ("P1", "P4"): Edge(3, 1.0, edge_weight(3, 1.0, 1.0, 1e-9)),
        },
        epsilon=1e-9,
    )
    idx = tiny_city()
    neighbours = [make_traj("n1", D, [(8, "P2"), (9, "P3"), (10, "P4"), (11, "P5"), (12, "P1")], idx)]
    manual = sorted(["P2", "P3", "P4", "P5"], key=lambda x: -g.weight("P1", x))
    got = candidates_social("P1", neighbours, g, k=10, index=idx)
    assert list(got.poi_ids) == manual == ["P3", "P4", "P2", "P5"]
    assert not got.fallback
    assert candidates_social("P1", neighbours, g, k=2, index=idx).poi_ids == ("P3", "P4")


def test_social_fallback_for_unknown_current():
    idx = tiny_city()
    neighbours = [make_traj("n1", D, [(8, "P2"), (9, "P3"), (10, "P2")], idx), make_traj("n2", D, [(8, "P4")], idx)]
    got = candidates_social("P5", neighbours, TransitionGraph({}), k=5, index=idx)
    assert got.fallback and got.poi_ids == ("P2", "P3", "P4")


def test_map_candidates():
    idx = tiny_city()
    got = candidates_map("home", idx.poi("P1").coord, idx, radius_km=5.0)
    assert got.poi_ids == ("P2", "P4")
    assert candidates_map("home", idx.poi("P1").coord, idx, radius_km=0.2).poi_ids == ("P2",)
    with pytest.raises(MapperError, match="medical"):
        candidates_map("medical", idx.poi("P1").coord, idx)


def test_llm_candidates_tvr_two_of_four():
    idx = tiny_city()
    reply = structured(places=[{"name": "Cafe X"}, {"name": "Market"}, {"name": "Atlantis"}, {"name": "Moon Base"}])
    gw = scripted_gateway({"mapper_candidates": [reply]})
    got = candidates_llm(gw, "P2", PROF, "pattern", "dining", idx, k=5)
    assert got.tvr_sample == (2, 4)
    assert got.poi_ids == ("P1", "P5")
    assert count_toponyms(reply, idx) == (2, 4)


def test_llm_candidates_reask_pools_both_attempts():
    idx = tiny_city()
    gw = scripted_gateway({"mapper_candidates": [structured(places=["Nowhere", "Elsewhere"]), structured(places=["Tower One", "Nope"])]})
    got = candidates_llm(gw, "P2", PROF, "p", "work", idx)
    assert got.tvr_sample == (1, 4) and got.poi_ids == ("P3",)
    assert "None of those places" in gw.transcript[-1].prompt


def test_llm_candidate_resolves_nearest_duplicate_name():
    regions = [Region("A", "A", "admin"), Region("S", "S", "subdistrict", "A"), Region("T", "T", "street", "S")]
    pois = [
        Poi("h", "Home", "Residence", 40.0, 116.0, ("A", "S", "T", "h")),
        Poi("far", "Cafe", "Food", 40.1, 116.0, ("A", "S", "T", "far")),
        Poi("near", "Cafe", "Food", 40.001, 116.0, ("A", "S", "T", "near")),
    ]
    idx = SpatialIndex(pois, regions)
    gw = scripted_gateway({"mapper_candidates": [structured(places=["cafe"])]})
    assert candidates_llm(gw, "h", PROF, "p", "dining", idx).poi_ids == ("near",)


@given(st.lists(st.sampled_from(["Cafe X", "Market", "Oak Homes", "Atlantis", "Zed", "Hill"]), min_size=1, max_size=8))
def test_tvr_sample_counts_valid_names(names):
    idx = tiny_city()
    gw = Gateway(FunctionBackend(lambda r: structured(places=names)))
    got = candidates_llm(gw, "P1", PROF, "p", "dining", idx)
    valid = sum(n not in ("Atlantis", "Zed") for n in names)
    if valid:
        assert got.tvr_sample == (valid, len(names))
    else:
        assert got.tvr_sample == (0, 2 * len(names))


def test_mean_jump(fixture_trajs):
    assert mean_jump_km(fixture_trajs) > 0
    with pytest.raises(MapperError):
        mean_jump_km([])


def test_finetune_determinism_and_oracle(city):
    a = build_finetune_dataset(city, 60, 0.8, seed=3)
    b = build_finetune_dataset(city, 60, 0.8, seed=3)
    c = build_finetune_dataset(city, 60, 0.8, seed=4)
    assert a == b and a != c and len(a) == 60
    for qa in a:
        assert qa.origin_poi != qa.dest_poi
        wp = city.poi(qa.waypoint)
        oracle = sorted((haversine(wp.coord, p.coord), p.id) for p in city.pois if p.category == qa.category and haversine(wp.coord, p.coord) <= 0.8)
        assert list(qa.answer_ids) == [pid for _, pid in oracle]
        assert qa.answer == ("; ".join(city.poi(i).name for i in qa.answer_ids) or "none")
        assert qa.question.startswith(f"Which {qa.category} places are within 0.8 km of ")


def test_finetune_roundtrip_and_errors(tmp_path, city):
    pairs = build_finetune_dataset(city, 10, 1.0, categories=["Food"], seed=1)
    write_finetune_dataset(pairs, tmp_path / "qa.jsonl")
    assert read_finetune_dataset(tmp_path / "qa.jsonl") == pairs
    assert build_finetune_dataset(city, 0, 1.0) == []
    with pytest.raises(MapperError):
        build_finetune_dataset(city, 5, 0.0)


def test_finetune_respects_zero_population_weight():
    regions = [Region("A", "A", "admin"), Region("S", "S", "subdistrict", "A"), Region("T", "T", "street", "S")]
    pois = [
        Poi(f"p{i}", f"n{i}", "Food", 40 + i * 0.001, 116.0, ("A", "S", "T", f"p{i}"), 0.0 if i == 0 else 1.0)
        for i in range(4)
    ]
    idx = SpatialIndex(pois, regions)
    qa = build_finetune_dataset(idx, 200, 0.5, seed=0)
    assert all("p0" not in (q.origin_poi, q.dest_poi) for q in qa)
    with pytest.raises(MapperError):
        build_finetune_dataset(SpatialIndex([replace_weight(p, 0.0) for p in pois[:3]] + [pois[3]], regions), 5, 0.5)


def replace_weight(p, w):
    return Poi(p.id, p.name, p.category, p.lat, p.lon, p.region_path, w)
