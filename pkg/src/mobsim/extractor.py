"""Linguistic mobility patterns: compress template users, reconstruct, retrieve and fuse."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import httpx
import numpy as np

from .data import (
    DEFAULT_UTC_OFFSET_HOURS,
    IntentMap,
    Trajectory,
    UserProfile,
    day_start,
    format_ts,
    group_days,
    make_point,
)
from .llm import Gateway
from .metrics import user_summary
from .urban import Poi, SpatialIndex, normalize_name

log = logging.getLogger(__name__)

EMBED_DIM = 256
DEFAULT_K = 3
TIE_DECIMALS = 12


class ExtractionError(ValueError):
    pass


class ReconstructionError(ExtractionError):
    pass


class RetrievalError(ExtractionError):
    pass


class DegenerateProfileError(ExtractionError):
    pass


@dataclass(frozen=True)
class PatternRecord:
    user_id: str
    c1: str = ""
    c2: str = ""
    r1: str = ""
    r2: str = ""

    @property
    def complete(self) -> bool:
        return all((self.c1, self.c2, self.r1, self.r2))


def write_patterns(records: Iterable[PatternRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), ensure_ascii=False, sort_keys=True) + "\n")


def read_patterns(path) -> list[PatternRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PatternRecord(**json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# rendering


def place_label(index: SpatialIndex, poi_id: Optional[str], style: str = "hierarchical") -> str:
    if poi_id is None:
        return "(unnamed location)"
    return index.address(poi_id, style)


def render_trajectory(
    traj: Trajectory, index: SpatialIndex, style: str = "hierarchical", utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS
) -> str:
    lines = []
    for p in traj.points:
        when = format_ts(p.timestamp, utc_offset_hours)[11:16]
        where = place_label(index, p.poi_id, style) if p.poi_id else f"({p.lat:.5f}, {p.lon:.5f})"
        lines.append(f"{traj.day.isoformat()} {when} [{p.intent}] {where}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# compression / reconstruction


def compress(
    gateway: Gateway,
    profile: UserProfile,
    trajectories: Sequence[Trajectory],
    index: SpatialIndex,
    style: str = "hierarchical",
    utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS,
) -> PatternRecord:
    if not trajectories:
        raise ExtractionError(f"user {profile.user_id} has no trajectories to compress")
    stats = json.dumps(user_summary(trajectories), sort_keys=True)
    rendered = "\n".join(render_trajectory(t, index, style, utc_offset_hours) for t in trajectories)
    ctx = {"user_id": profile.user_id}
    c1 = gateway.complete(
        "c1_compress", {"profile": profile.render(), "stats": stats, "trajectories": rendered}, ctx
    ).strip()
    c2 = gateway.complete(
        "c2_compress", {"profile": profile.render(), "c1": c1, "stats": stats, "trajectories": rendered}, ctx
    ).strip()
    return PatternRecord(profile.user_id, c1=c1, c2=c2)


@dataclass(frozen=True)
class Reconstruction:
    description: str
    trajectory: Trajectory
    r1: str
    r2: str
    dropped_names: int = 0
    reordered: int = 0


_TIME = re.compile(r"^\s*(\d{1,2}):(\d{2})(?::(\d{2}))?\s*$")


def clock_seconds(text: str) -> int:
    """Seconds after local midnight for 'HH:MM[:SS]'; 24:00 is accepted as end of day."""
    m = _TIME.match(str(text))
    if not m:
        raise ValueError(f"bad clock time {text!r}")
    h, mi, s = int(m.group(1)), int(m.group(2)), int(m.group(3) or 0)
    if mi >= 60 or s >= 60 or h > 24 or (h == 24 and (mi or s)):
        raise ValueError(f"bad clock time {text!r}")
    return h * 3600 + mi * 60 + s


def recovery_candidates(trajectories: Sequence[Trajectory], index: SpatialIndex, extra: int = 10) -> list[Poi]:
    """The user's visited POIs plus the nearest others around their visit centroid."""
    visited = sorted({p.poi_id for t in trajectories for p in t.points if p.poi_id})
    pois = [index.poi(i) for i in visited]
    coords = [p.coord for t in trajectories for p in t.points]
    if coords and extra > 0:
        centre = (sum(c[0] for c in coords) / len(coords), sum(c[1] for c in coords) / len(coords))
        seen = set(visited)
        for p in index.nearest_pois(centre, extra + len(seen)):
            if p.id not in seen and len(pois) < len(visited) + extra:
                pois.append(p)
                seen.add(p.id)
    return pois


def _check_visits(visits: list, by_name: Mapping[str, str]) -> tuple[list[tuple[int, str]], list[str]]:
    good, bad = [], []
    for v in visits:
        if not isinstance(v, Mapping):
            bad.append(str(v))
            continue
        place = str(v.get("place", v.get("poi", "")))
        try:
            secs = clock_seconds(v.get("time", ""))
        except ValueError:
            bad.append(place)
            continue
        pid = by_name.get(normalize_name(place))
        if pid is None or secs >= 86400:
            bad.append(place)
        else:
            good.append((secs, pid))
    return good, bad


def reconstruct(
    gateway: Gateway,
    profile: UserProfile,
    record: PatternRecord,
    candidates: Sequence[Poi],
    day: date,
    index: SpatialIndex,
    intents: Optional[IntentMap] = None,
    utc_offset_hours: float = DEFAULT_UTC_OFFSET_HOURS,
) -> Reconstruction:
    if not (record.c1 and record.c2):
        raise ExtractionError(f"pattern record for {record.user_id} lacks c1/c2")
    if not candidates:
        raise ExtractionError("reconstruction needs candidate POIs")
    intents = intents or IntentMap()
    ctx = {"user_id": profile.user_id, "day": day.isoformat()}
    first = gateway.complete_structured(
        "r1_reconstruct", {"profile": profile.render(), "c1": record.c1},
        {"description": "str", "rules": "str"}, ctx,
    ).record
    by_name: dict[str, str] = {}
    for p in candidates:
        by_name.setdefault(normalize_name(p.name), p.id)
        by_name.setdefault(normalize_name(p.id), p.id)
    variables = {
        "profile": profile.render(),
        "c2": record.c2,
        "description": first["description"],
        "candidates": "\n".join(f"- {p.name} ({p.category})" for p in candidates),
        "day": day.isoformat(),
    }
    schema = {"rules": "str", "visits": "list"}
    second = gateway.complete_structured("r2_reconstruct", variables, schema, ctx).record
    good, bad = _check_visits(second["visits"], by_name)
    if bad:
        correction = (
            "These places are not among the candidates or have invalid times: "
            + ", ".join(sorted(set(bad)))
            + ". Use only candidate names exactly as listed."
        )
        second = gateway.complete_structured("r2_reconstruct", variables, schema, ctx, correction=correction).record
        good, bad = _check_visits(second["visits"], by_name)
    if not good:
        raise ReconstructionError(f"no valid visits reconstructed for {profile.user_id} on {day}")
    reordered = sum(1 for a, b in zip(good, good[1:]) if b[0] <= a[0])
    base = day_start(day, utc_offset_hours)
    points = [make_point(base + secs, index, intents, pid) for secs, pid in good]
    traj = group_days({profile.user_id: points}, utc_offset_hours)[0]
    if reordered:
        log.warning("%s %s: %d out-of-order visits re-sorted", profile.user_id, day, reordered)
    return Reconstruction(first["description"], traj, first["rules"], second["rules"], len(bad), reordered)


# ---------------------------------------------------------------------------
# profile embeddings


@dataclass(frozen=True)
class ProfileEmbedding:
    user_id: str
    vector: np.ndarray

    def __post_init__(self):
        if not np.linalg.norm(self.vector) > 0:
            raise DegenerateProfileError(f"zero embedding for {self.user_id}")


def _hash_token(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")


def embed_profile(profile: UserProfile, dim: int = EMBED_DIM) -> ProfileEmbedding:
    """Signed feature hashing of key=value tokens, L2-normalised."""
    vec = np.zeros(dim)
    for key, value in profile.attributes:
        if value == "":
            continue
        h = _hash_token(f"{key}={normalize_name(value)}")
        vec[h % dim] += 1.0 if (h >> 63) == 0 else -1.0
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise DegenerateProfileError(f"profile {profile.user_id} has no usable attributes")
    return ProfileEmbedding(profile.user_id, vec / norm)


class HttpEmbedder:
    """Profile embeddings from an OpenAI-compatible /embeddings endpoint."""

    def __init__(self, endpoint: str, model: str, api_key: str = "", client: Optional[httpx.Client] = None):
        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/embeddings"):
            self.url += "/embeddings"
        self.model = model
        self.api_key = api_key
        self._client = client or httpx.Client(timeout=60)

    def __call__(self, profile: UserProfile) -> ProfileEmbedding:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        resp = self._client.post(self.url, json={"model": self.model, "input": profile.render()}, headers=headers)
        resp.raise_for_status()
        vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=float)
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise DegenerateProfileError(f"endpoint returned a zero embedding for {profile.user_id}")
        return ProfileEmbedding(profile.user_id, vec / norm)


@dataclass(frozen=True)
class EmbeddingMatrix:
    ids: tuple[str, ...]
    matrix: np.ndarray

    @classmethod
    def from_embeddings(cls, embs: Sequence[ProfileEmbedding]) -> "EmbeddingMatrix":
        dims = {e.vector.shape[0] for e in embs}
        if len(dims) != 1:
            raise ExtractionError(f"mixed embedding dimensions {sorted(dims)}")
        return cls(tuple(e.user_id for e in embs), np.vstack([e.vector for e in embs]))

    def save(self, path) -> None:
        path = Path(path)
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.17g")
        path.with_suffix(".ids").write_text("\n".join(self.ids) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        path = Path(path)
        ids = tuple(path.with_suffix(".ids").read_text(encoding="utf-8").split())
        return cls(ids, np.atleast_2d(np.loadtxt(path, delimiter=",")))


def cosine_scores(target: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return (matrix @ target) / (np.linalg.norm(matrix, axis=1) * np.linalg.norm(target))


def top_k_similar(target: ProfileEmbedding, templates: EmbeddingMatrix, k: int = DEFAULT_K) -> list[tuple[str, float]]:
    m = len(templates.ids)
    if k < 1 or k > m:
        raise RetrievalError(f"k={k} outside 1..{m}")
    scores = cosine_scores(target.vector, templates.matrix)
    # scores equal up to rounding noise count as ties and fall back to id order
    order = sorted(range(m), key=lambda i: (-round(float(scores[i]), TIE_DECIMALS), templates.ids[i]))
    return [(templates.ids[i], float(scores[i])) for i in order[:k]]


def _parse_users(users: list, valid: set[str]) -> dict[str, float]:
    out: dict[str, float] = {}
    for u in users:
        if not isinstance(u, Mapping):
            continue
        uid = str(u.get("id", "")).strip()
        if uid not in valid or uid in out:
            continue
        try:
            score = float(u.get("score", 0.0))
        except (TypeError, ValueError):
            score = 0.0
        out[uid] = min(1.0, max(0.0, score)) if math.isfinite(score) else 0.0
    return out


def top_k_similar_llm(
    gateway: Gateway,
    target: UserProfile,
    templates: Sequence[UserProfile],
    k: int = DEFAULT_K,
) -> list[tuple[str, float]]:
    if k < 1 or k > len(templates):
        raise RetrievalError(f"k={k} outside 1..{len(templates)}")
    valid = {t.user_id for t in templates}
    variables = {
        "profile": target.render(),
        "templates": "\n".join(f"{t.user_id}: {t.render()}" for t in templates),
        "k": k,
    }
    ctx = {"user_id": target.user_id}
    got = _parse_users(gateway.complete_structured("retrieve_similar", variables, {"users": "list"}, ctx).record["users"], valid)
    if len(got) < k:
        correction = f"Only {len(got)} of your ids are valid template ids. Return {k} distinct ids from the list."
        retry = gateway.complete_structured("retrieve_similar", variables, {"users": "list"}, ctx, correction=correction)
        for uid, s in _parse_users(retry.record["users"], valid).items():
            got.setdefault(uid, s)
    if len(got) < k:
        raise RetrievalError(f"only {len(got)} valid template ids for {target.user_id}, need {k}")
    ranked = sorted(got.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


# ---------------------------------------------------------------------------
# fusion


@dataclass(frozen=True)
class FusedPattern:
    target_user_id: str
    fused_c1: str
    description: str
    fused_c2: str
    sources: tuple[tuple[str, float], ...] = ()

    def text(self) -> str:
        return f"{self.fused_c1}\n\n{self.description}\n\n{self.fused_c2}".strip()

    def to_json(self) -> str:
        d = asdict(self)
        d["sources"] = [list(s) for s in self.sources]
        return json.dumps(d, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "FusedPattern":
        d = json.loads(line)
        d["sources"] = tuple((s[0], float(s[1])) for s in d.get("sources", ()))
        return cls(**d)


def _neighbors(records: Sequence[PatternRecord], scores: Mapping[str, float], attr: str) -> str:
    blocks = []
    for r in records:
        s = scores.get(r.user_id)
        head = f"[template user {r.user_id}" + (f", similarity {s:.3f}]" if s is not None else "]")
        blocks.append(f"{head}\n{getattr(r, attr)}")
    return "\n\n".join(blocks)


def fuse(
    gateway: Gateway,
    target: UserProfile,
    neighbor_records: Sequence[PatternRecord],
    sources: Sequence[tuple[str, float]] = (),
) -> FusedPattern:
    if not neighbor_records:
        raise ExtractionError("fusion needs at least one neighbour record")
    for r in neighbor_records:
        if not r.complete:
            raise ExtractionError(f"neighbour record {r.user_id} is incomplete")
    scores = dict(sources)
    ctx = {"user_id": target.user_id}
    prof = target.render()
    fused_c1 = gateway.complete("fuse_c1", {"profile": prof, "neighbor_c1": _neighbors(neighbor_records, scores, "c1")}, ctx).strip()
    description = gateway.complete(
        "gen_description",
        {
            "profile": prof,
            "fused_c1": fused_c1,
            "neighbor_r1": _neighbors(neighbor_records, scores, "r1"),
            "neighbor_r2": _neighbors(neighbor_records, scores, "r2"),
        },
        ctx,
    ).strip()
    fused_c2 = gateway.complete(
        "fuse_c2",
        {"profile": prof, "fused_c1": fused_c1, "description": description, "neighbor_c2": _neighbors(neighbor_records, scores, "c2")},
        ctx,
    ).strip()
    src = tuple(sources) if sources else tuple((r.user_id, 1.0) for r in neighbor_records)
    return FusedPattern(target.user_id, fused_c1, description, fused_c2, src)


def write_fused(patterns: Iterable[FusedPattern], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in patterns:
            fh.write(p.to_json() + "\n")


def read_fused(path) -> list[FusedPattern]:
    with open(path, encoding="utf-8") as fh:
        return [FusedPattern.from_json(line) for line in fh if line.strip()]
