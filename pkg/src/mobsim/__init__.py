"""Agentic human-mobility simulation pipeline with a trajectory-fidelity evaluation suite."""

from .data import IntentMap, Trajectory, TrajectoryPoint, UserProfile
from .geo import haversine
from .llm import FunctionBackend, Gateway, ScriptedBackend
from .metrics import MetricReport, cmrr, evaluate, jsd
from .urban import Poi, Region, SpatialIndex, ingest_city

__version__ = "0.1.0"

__all__ = [
    "FunctionBackend",
    "Gateway",
    "IntentMap",
    "MetricReport",
    "Poi",
    "Region",
    "ScriptedBackend",
    "SpatialIndex",
    "Trajectory",
    "TrajectoryPoint",
    "UserProfile",
    "cmrr",
    "evaluate",
    "haversine",
    "ingest_city",
    "jsd",
]
