"""Run configuration: YAML tree with ${ENV} interpolation, resolved to dataclasses."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .llm import BackendConfig

_ENV = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
MAPPER_VARIANTS = ("E", "M", "S")
ADDRESS_STYLES = ("hierarchical", "human")
RETRIEVAL_MODES = ("embedding", "llm")


class ConfigError(ValueError):
    pass


def interpolate_env(value: Any, env: Optional[Mapping[str, str]] = None) -> Any:
    env = os.environ if env is None else env
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            if m.group(1) not in env:
                raise ConfigError(f"environment variable {m.group(1)} is not set")
            return env[m.group(1)]

        return _ENV.sub(sub, value)
    if isinstance(value, list):
        return [interpolate_env(v, env) for v in value]
    if isinstance(value, dict):
        return {k: interpolate_env(v, env) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class DataPaths:
    pois: str
    profiles: str
    trajectories: str
    regions: str = ""
    roads: str = ""
    intents: str = ""
    anchors: str = ""


@dataclass(frozen=True)
class Cohort:
    template_users: tuple[str, ...]
    test_users: tuple[str, ...]


@dataclass(frozen=True)
class ExtractorSettings:
    retrieval: str = "embedding"
    k: int = 3
    reconstruct_days: int = 1
    recovery_extra: int = 10


@dataclass(frozen=True)
class AnchorSettings:
    rounds: int = 3
    threshold: float = 0.05
    level: str = "subdistrict"
    reflect_with_llm: bool = False


@dataclass(frozen=True)
class MapperSettings:
    variant: str = "S"
    k: int = 10
    alpha: float = 1.0
    epsilon: float = 1e-6
    radius_km: float = 3.0


@dataclass(frozen=True)
class FinetuneSettings:
    n_pairs: int = 200
    radius_km: Optional[float] = None
    categories: Optional[tuple[str, ...]] = None
    capture_km: float = 0.05
    step_km: float = 0.2


@dataclass(frozen=True)
class DpoSettings:
    threshold: float = 5.0
    stages: tuple[str, ...] = ("r2_reconstruct", "plan_day")


@dataclass(frozen=True)
class IterateSettings:
    rounds: int = 0
    backends: tuple[BackendConfig, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    data: DataPaths
    cohort: Cohort
    backend: BackendConfig = BackendConfig()
    stage_backends: Mapping[str, BackendConfig] = field(default_factory=dict)
    output_dir: str = "out"
    address_style: str = "hierarchical"
    utc_offset_hours: float = 8.0
    rng_seed: int = 0
    extractor: ExtractorSettings = ExtractorSettings()
    anchors: AnchorSettings = AnchorSettings()
    mapper: MapperSettings = MapperSettings()
    finetune: FinetuneSettings = FinetuneSettings()
    dpo: DpoSettings = DpoSettings()
    iterate: IterateSettings = IterateSettings()
    compare: Mapping[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        for f in fields(DataPaths):
            p = getattr(self.data, f.name)
            if p and not Path(p).exists():
                raise ConfigError(f"data.{f.name}: {p} does not exist")
        for name, p in self.compare.items():
            if not Path(p).exists():
                raise ConfigError(f"compare.{name}: {p} does not exist")
        overlap = set(self.cohort.template_users) & set(self.cohort.test_users)
        if overlap:
            raise ConfigError(f"users in both template and test cohorts: {', '.join(sorted(overlap))}")
        if not self.cohort.template_users or not self.cohort.test_users:
            raise ConfigError("both cohorts need at least one user")
        if self.mapper.variant not in MAPPER_VARIANTS:
            raise ConfigError(f"mapper.variant must be one of {MAPPER_VARIANTS}")
        if self.address_style not in ADDRESS_STYLES:
            raise ConfigError(f"address_style must be one of {ADDRESS_STYLES}")
        if self.extractor.retrieval not in RETRIEVAL_MODES:
            raise ConfigError(f"extractor.retrieval must be one of {RETRIEVAL_MODES}")
        if self.extractor.k < 1 or self.mapper.k < 1:
            raise ConfigError("K and k must be >= 1")
        if self.anchors.rounds < 1:
            raise ConfigError("anchors.rounds must be >= 1")
        if self.anchors.level not in ("admin", "subdistrict", "street"):
            raise ConfigError("anchors.level must be admin, subdistrict or street")
        if not self.mapper.epsilon > 0 or not self.mapper.radius_km > 0:
            raise ConfigError("mapper.epsilon and mapper.radius_km must be > 0")
        if self.iterate.rounds < 0:
            raise ConfigError("iterate.rounds must be >= 0")

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, rng_seed=seed)
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(Path(output_dir).resolve()))
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))

    def digest(self) -> str:
        """sha256 over the canonical JSON form; any field change changes it."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _section(cls, raw: Any, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name} must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown keys in {name}: {', '.join(sorted(extra))}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


def _backend(raw: Any, base: Path, name: str) -> BackendConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name} must be a mapping")
    try:
        return BackendConfig.from_dict(raw, base_dir=base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(raw: Mapping[str, Any], base_dir=".", env: Optional[Mapping[str, str]] = None) -> RunConfig:
    raw = interpolate_env(dict(raw), env)
    base = Path(base_dir).resolve()
    known = {f.name for f in fields(RunConfig)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(extra))}")
    if "data" not in raw or "cohort" not in raw:
        raise ConfigError("config needs data and cohort sections")

    data = dict(raw["data"])
    for k, v in list(data.items()):
        data[k] = str((base / v).resolve()) if v else ""
    try:
        paths = DataPaths(**data)
        cohort = Cohort(tuple(map(str, raw["cohort"]["template_users"])), tuple(map(str, raw["cohort"]["test_users"])))
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad data/cohort section: {exc}") from exc

    it = dict(raw.get("iterate") or {})
    rounds_backends = tuple(_backend(b, base, f"iterate.backends[{i}]") for i, b in enumerate(it.pop("backends", []) or []))
    iterate = _section(IterateSettings, it, "iterate")
    iterate = replace(iterate, backends=rounds_backends)

    cfg = RunConfig(
        data=paths,
        cohort=cohort,
        backend=_backend(raw.get("backend", {"kind": "scripted"}), base, "backend"),
        stage_backends={k: _backend(v, base, f"stage_backends.{k}") for k, v in (raw.get("stage_backends") or {}).items()},
        output_dir=str((base / raw.get("output_dir", "out")).resolve()),
        address_style=raw.get("address_style", "hierarchical"),
        utc_offset_hours=float(raw.get("utc_offset_hours", 8.0)),
        rng_seed=int(raw.get("rng_seed", 0)),
        extractor=_section(ExtractorSettings, raw.get("extractor"), "extractor"),
        anchors=_section(AnchorSettings, raw.get("anchors"), "anchors"),
        mapper=_section(MapperSettings, raw.get("mapper"), "mapper"),
        finetune=_section(FinetuneSettings, raw.get("finetune"), "finetune"),
        dpo=_section(DpoSettings, raw.get("dpo"), "dpo"),
        iterate=iterate,
        compare={k: str((base / v).resolve()) for k, v in (raw.get("compare") or {}).items()},
    )
    return cfg


def load_config(path, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw, path.parent, env)
