from __future__ import annotations

import json
import math
from datetime import date
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from mobsim.data import IntentMap, TrajectoryPoint, Trajectory, day_start, load_trajectories
from mobsim.urban import Poi, Region, RoadGraph, SpatialIndex, ingest_city

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "mobsim" / "fixtures"

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def city() -> SpatialIndex:
    return ingest_city(FIXTURES / "pois.csv", FIXTURES / "regions.csv", FIXTURES / "roads.csv")


@pytest.fixture(scope="session")
def intents() -> IntentMap:
    return IntentMap.load(FIXTURES / "intents.csv")


@pytest.fixture(scope="session")
def fixture_trajs(city, intents):
    return load_trajectories(FIXTURES / "trajectories.csv", city, intents)


def tiny_city() -> SpatialIndex:
    """Two admins, one subdistrict each, two streets each; street T4 is empty."""
    regions = [
        Region("A1", "North", "admin"),
        Region("A2", "South", "admin"),
        Region("S1", "Hill", "subdistrict", "A1"),
        Region("S2", "Lake", "subdistrict", "A2"),
        Region("T1", "First St", "street", "S1"),
        Region("T2", "Second St", "street", "S1"),
        Region("T3", "Third St", "street", "S2"),
        Region("T4", "Fourth St", "street", "S2"),
    ]
    pois = [
        Poi("P1", "Cafe X", "Food", 40.000, 116.000, ("A1", "S1", "T1", "P1")),
        Poi("P2", "Oak Homes", "Residence", 40.001, 116.001, ("A1", "S1", "T1", "P2")),
        Poi("P3", "Tower One", "Office", 40.002, 116.002, ("A1", "S1", "T2", "P3")),
        Poi("P4", "Pine Homes", "Residence", 39.990, 116.000, ("A2", "S2", "T3", "P4")),
        Poi("P5", "Market", "Shopping", 39.991, 116.003, ("A2", "S2", "T3", "P5")),
    ]
    roads = RoadGraph.from_segments(
        [
            ("Rd B", (40.0, 116.0), (40.0, 116.01)),
            ("Rd C", (40.0, 116.0), (40.01, 116.0)),
        ]
    )
    return SpatialIndex(pois, regions, roads)


@pytest.fixture
def small_city() -> SpatialIndex:
    return tiny_city()


def make_traj(user: str, day: date, visits, index: SpatialIndex, intents: IntentMap | None = None, offset: float = 8.0) -> Trajectory:
    """visits: [(hour_float, poi_id)]"""
    intents = intents or IntentMap()
    base = day_start(day, offset)
    pts = []
    for h, pid in visits:
        p = index.poi(pid)
        pts.append(TrajectoryPoint(base + h * 3600, p.lat, p.lon, intents.intent_of(p.category), p.id, p.category))
    return Trajectory(user, day, tuple(pts))


def structured(**kw) -> str:
    return json.dumps(kw)


def close(a: float, b: float, tol: float) -> bool:
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)


# ---- acceptance reporting ----------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    ok = rep.passed if rep.when == "call" else not rep.failed
    prev = _CRITERIA.get(n, (title, True))[1]
    _CRITERIA[n] = (title, prev and ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {title}")
