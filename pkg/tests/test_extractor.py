import math
import random
from datetime import date

import numpy as np
import pytest

from mobsim.data import UserProfile, day_start
from mobsim.extractor import (
    DegenerateProfileError,
    EmbeddingMatrix,
    ExtractionError,
    PatternRecord,
    ProfileEmbedding,
    ReconstructionError,
    RetrievalError,
    clock_seconds,
    compress,
    embed_profile,
    fuse,
    read_fused,
    read_patterns,
    reconstruct,
    recovery_candidates,
    top_k_similar,
    top_k_similar_llm,
    write_fused,
    write_patterns,
)
from mobsim.llm import scripted_gateway

from conftest import make_traj, structured, tiny_city

D = date(2024, 3, 4)
PROF = UserProfile("u1", (("age", "30"), ("occupation", "engineer")))
REC = PatternRecord("u1", c1="goes to work", c2="8am cafe", r1="", r2="")


def test_clock_seconds():
    assert clock_seconds("08:30") == 30600
    assert clock_seconds("7:05:09") == 25509
    assert clock_seconds("24:00") == 86400
    for bad in ("24:01", "8h", "12:60", ""):
        with pytest.raises(ValueError):
            clock_seconds(bad)


def test_compress_renders_addresses_and_order():
    idx = tiny_city()
    gw = scripted_gateway({"c1_compress": ["  pattern one "], "c2_compress": ["pattern two"]})
    rec = compress(gw, PROF, [make_traj("u1", D, [(8, "P2"), (12, "P1")], idx)], idx)
    assert (rec.c1, rec.c2) == ("pattern one", "pattern two")
    assert [e.stage_id for e in gw.transcript] == ["c1_compress", "c2_compress"]
    assert "North, Hill, First St, Oak Homes" in gw.transcript[0].prompt
    assert "pattern one" in gw.transcript[1].prompt
    with pytest.raises(ExtractionError):
        compress(gw, PROF, [], idx)


def test_reconstruct_valid_first_time():
    idx = tiny_city()
    gw = scripted_gateway({
        "r1_reconstruct": [structured(description="desc", rules="rules")],
        "r2_reconstruct": [structured(rules="r2", visits=[{"time": "12:00", "place": "cafe x"}, {"time": "08:00", "place": "Oak Homes"}])],
    })
    r = reconstruct(gw, PROF, REC, idx.pois, D, idx)
    assert [p.poi_id for p in r.trajectory.points] == ["P2", "P1"]
    assert r.trajectory.points[0].timestamp == day_start(D) + 8 * 3600
    assert r.reordered == 1 and r.dropped_names == 0
    r.trajectory.check()


def test_reconstruct_reasks_then_drops():
    idx = tiny_city()
    gw = scripted_gateway({
        "r1_reconstruct": [structured(description="d", rules="x")],
        "r2_reconstruct": [
            structured(rules="a", visits=[{"time": "09:00", "place": "Atlantis"}]),
            structured(rules="b", visits=[{"time": "09:00", "place": "Market"}, {"time": "25:00", "place": "Cafe X"}, {"time": "10:00", "place": "Nowhere"}]),
        ],
    })
    r = reconstruct(gw, PROF, REC, idx.pois, D, idx)
    assert [p.poi_id for p in r.trajectory.points] == ["P5"]
    assert r.dropped_names == 2
    assert "Atlantis" in gw.transcript[-1].prompt


def test_reconstruct_nothing_valid():
    idx = tiny_city()
    gw = scripted_gateway({
        "r1_reconstruct": [structured(description="d", rules="x")],
        "r2_reconstruct": [structured(rules="a", visits=[])],
    })
    with pytest.raises(ReconstructionError):
        reconstruct(gw, PROF, REC, idx.pois, D, idx)


def test_recovery_candidates_include_visited(city, fixture_trajs):
    mine = [t for t in fixture_trajs if t.user_id == "u01"]
    cands = recovery_candidates(mine, city, extra=5)
    visited = {p.poi_id for t in mine for p in t.points}
    assert visited <= {c.id for c in cands}
    assert len(cands) == len(visited) + 5


def test_embedding_deterministic_and_self_similar():
    e1, e2 = embed_profile(PROF), embed_profile(UserProfile("u9", PROF.attributes))
    assert np.array_equal(e1.vector, e2.vector)
    assert abs(np.linalg.norm(e1.vector) - 1.0) < 1e-12
    with pytest.raises(DegenerateProfileError):
        embed_profile(UserProfile("z", (("age", ""),)))


def _brute_force(target, embs, k):
    scored = []
    for e in embs:
        dot = math.fsum(float(a) * float(b) for a, b in zip(target, e.vector))
        na = math.sqrt(math.fsum(float(a) ** 2 for a in target))
        nb = math.sqrt(math.fsum(float(b) ** 2 for b in e.vector))
        scored.append((e.user_id, dot / (na * nb)))
    scored.sort(key=lambda kv: (-round(kv[1], 12), kv[0]))
    return scored[:k]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_top_k_equals_brute_force_with_ties(seed):
    rng = np.random.default_rng(seed)
    base = [rng.normal(size=16) for _ in range(150)]
    vecs = base + [base[i] * 2.0 for i in rng.integers(0, 150, 50)]  # scaled copies tie exactly in cosine
    ids = [f"t{i:03d}" for i in range(200)]
    order = list(range(200))
    random.Random(seed).shuffle(order)
    embs = [ProfileEmbedding(ids[i], vecs[i]) for i in order]
    m = EmbeddingMatrix.from_embeddings(embs)
    target = embs[3].vector
    for k in (1, 5, 25, 200):
        got = top_k_similar(ProfileEmbedding("q", target), m, k)
        ref = _brute_force(target, embs, k)
        assert [g[0] for g in got] == [r[0] for r in ref]
        assert all(abs(g[1] - r[1]) < 1e-12 for g, r in zip(got, ref))
    with pytest.raises(RetrievalError):
        top_k_similar(ProfileEmbedding("q", target), m, 201)


def test_embedding_matrix_roundtrip(tmp_path):
    embs = [embed_profile(UserProfile(f"u{i}", (("age", str(i)), ("gender", "f")))) for i in range(5)]
    m = EmbeddingMatrix.from_embeddings(embs)
    m.save(tmp_path / "e.csv")
    back = EmbeddingMatrix.load(tmp_path / "e.csv")
    assert back.ids == m.ids
    assert np.array_equal(back.matrix, m.matrix)


def test_llm_retrieval_reasks_and_ranks():
    temps = [UserProfile(f"t{i}", (("age", str(20 + i)),)) for i in range(4)]
    gw = scripted_gateway({"retrieve_similar": [
        structured(users=[{"id": "t1", "score": 0.5}, {"id": "ghost", "score": 0.9}]),
        structured(users=[{"id": "t3", "score": 0.5}, {"id": "t1", "score": 0.1}, {"id": "t0", "score": 2}]),
    ]})
    got = top_k_similar_llm(gw, PROF, temps, k=3)
    assert got == [("t0", 1.0), ("t1", 0.5), ("t3", 0.5)]
    gw2 = scripted_gateway({"retrieve_similar": [structured(users=[]), structured(users=[{"id": "t1"}])]})
    with pytest.raises(RetrievalError):
        top_k_similar_llm(gw2, PROF, temps, k=2)


def test_fuse_stage_order_and_roundtrip(tmp_path):
    recs = [PatternRecord(f"t{i}", "c1", "c2", "r1", "r2") for i in range(2)]
    gw = scripted_gateway({"fuse_c1": ["F1"], "gen_description": ["DESC"], "fuse_c2": ["F2"]})
    fp = fuse(gw, PROF, recs, [("t0", 0.9), ("t1", 0.8)])
    assert [e.stage_id for e in gw.transcript] == ["fuse_c1", "gen_description", "fuse_c2"]
    assert "similarity 0.900" in gw.transcript[0].prompt
    assert "F1" in gw.transcript[2].prompt and "DESC" in gw.transcript[2].prompt
    assert fp.text() == "F1\n\nDESC\n\nF2"
    write_fused([fp], tmp_path / "f.jsonl")
    assert read_fused(tmp_path / "f.jsonl") == [fp]
    with pytest.raises(ExtractionError):
        fuse(gw, PROF, [PatternRecord("x", "c1")])
    write_patterns(recs, tmp_path / "p.jsonl")
    assert read_patterns(tmp_path / "p.jsonl") == recs
