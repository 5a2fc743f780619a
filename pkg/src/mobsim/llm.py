"""Chat-completion gateway with a prompt-stage registry and a scripted offline backend.

Every call goes through :class:`Gateway`, which renders the stage template,
routes it to the backend bound to that stage, and appends one
:class:`TranscriptEntry` per attempt.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from string import Template
from typing import Any, Callable, Iterable, Mapping, Optional, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)

FREE_TEXT = "free_text"
STRUCTURED = "structured"

# stage_id -> (declared variables, expected output)
STAGE_SCHEMA: dict[str, tuple[tuple[str, ...], str]] = {
    "c1_compress": (("profile", "stats", "trajectories"), FREE_TEXT),
    "c2_compress": (("profile", "c1", "stats", "trajectories"), FREE_TEXT),
    "r1_reconstruct": (("profile", "c1"), STRUCTURED),
    "r2_reconstruct": (("profile", "c2", "description", "candidates", "day"), STRUCTURED),
    "retrieve_similar": (("profile", "templates", "k"), STRUCTURED),
    "fuse_c1": (("profile", "neighbor_c1"), FREE_TEXT),
    "gen_description": (("profile", "fused_c1", "neighbor_r1", "neighbor_r2"), FREE_TEXT),
    "fuse_c2": (("profile", "fused_c1", "description", "neighbor_c2"), FREE_TEXT),
    "region_reason": (("profile", "kind", "level", "parent", "children", "advice"), FREE_TEXT),
    "region_execute": (("profile", "kind", "level", "reasoning", "options"), STRUCTURED),
    "region_reflect": (("kind", "level", "jsd", "over", "under"), FREE_TEXT),
    "mapper_candidates": (("profile", "pattern", "intent", "current", "k"), STRUCTURED),
    "plan_day": (("profile", "pattern", "day", "intents"), STRUCTURED),
    "synthesize_traj": (("profile", "pattern", "intent", "start", "end", "previous", "candidates"), STRUCTURED),
    "judge_quality": (("output",), STRUCTURED),
}
STAGE_IDS = tuple(STAGE_SCHEMA)
JUDGE_STAGES = frozenset({"judge_quality"})
GENERATION_TEMPERATURE = 0.7
JUDGE_TEMPERATURE = 0.0


class GatewayError(RuntimeError):
    pass


class TemplateError(GatewayError):
    pass


class BackendError(GatewayError):
    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message if status is None else f"{message} (last status {status})")
        self.status = status


class ScriptExhausted(BackendError):
    pass


class StructuredOutputError(GatewayError):
    def __init__(self, stage_id: str, raw: Sequence[str], reason: str):
        self.stage_id = stage_id
        self.raw = list(raw)
        joined = "\n---\n".join(self.raw)
        super().__init__(f"{stage_id}: no parsable reply after {len(raw)} attempts ({reason}); raw replies:\n{joined}")


# ---------------------------------------------------------------------------
# prompt stages


@dataclass(frozen=True)
class PromptStage:
    stage_id: str
    template: str
    variables: tuple[str, ...]
    expected_output: str
    version: str = "1"

    def render(self, variables: Mapping[str, Any]) -> str:
        missing = [v for v in self.variables if v not in variables]
        if missing:
            raise TemplateError(f"{self.stage_id}: missing template variable(s) {', '.join(missing)}")
        return Template(self.template).substitute({k: str(variables[k]) for k in self.variables})


def placeholders(template: str) -> set[str]:
    names = set()
    for m in Template.pattern.finditer(template):
        name = m.group("named") or m.group("braced")
        if name:
            names.add(name)
    return names


def _parse_template_file(text: str) -> tuple[dict[str, str], str]:
    header, sep, body = text.partition("\n---\n")
    if not sep:
        return {}, text
    meta = {}
    for line in header.splitlines():
        line = line.lstrip("# ").strip()
        if ":" in line:
            k, v = line.split(":", 1)
            meta[k.strip()] = v.strip()
    return meta, body


def load_stages(override_dir=None) -> dict[str, PromptStage]:
    """Shipped templates, with any `<stage_id>.txt` in override_dir taking precedence."""
    stages = {}
    shipped = resources.files("mobsim") / "prompts"
    for stage_id, (variables, kind) in STAGE_SCHEMA.items():
        path = Path(override_dir) / f"{stage_id}.txt" if override_dir else None
        if path is not None and path.exists():
            text = path.read_text(encoding="utf-8")
        else:
            text = (shipped / f"{stage_id}.txt").read_text(encoding="utf-8")
        meta, body = _parse_template_file(text)
        found = placeholders(body)
        if found != set(variables):
            raise TemplateError(
                f"{stage_id}: template placeholders {sorted(found)} != declared {sorted(variables)}"
            )
        stages[stage_id] = PromptStage(stage_id, body, variables, kind, meta.get("version", "1"))
    return stages


# ---------------------------------------------------------------------------
# backends


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_s: float = 0.5

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = ""
    temperature: Optional[float] = None
    max_tokens: int = 1024
    max_concurrency: int = 4
    retry: RetryPolicy = RetryPolicy()
    script: str = ""
    timeout_s: float = 120.0

    def __post_init__(self):
        if self.kind not in ("http_openai_compatible", "scripted"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir=None) -> "BackendConfig":
        d = dict(d)
        retry = d.pop("retry", None)
        if isinstance(retry, Mapping):
            d["retry"] = RetryPolicy(**retry)
        if d.get("script") and base_dir is not None:
            d["script"] = str((Path(base_dir) / d["script"]).resolve())
        return cls(**d)


@dataclass(frozen=True)
class BackendRequest:
    stage_id: str
    prompt: str
    temperature: float
    max_tokens: int
    variables: Mapping[str, Any] = field(default_factory=dict)


class Backend(Protocol):
    max_concurrency: int

    def generate(self, request: BackendRequest) -> str: ...


class ScriptedBackend:
    """Replays replies keyed by (stage_id, per-stage call ordinal).

    An entry with ordinal "*" answers any ordinal that has no specific entry.
    Replies depend on call order, so callers must not run it concurrently.
    """

    order_sensitive = True
    virtual_latency = True

    def __init__(self, entries: Iterable[Mapping[str, Any]] = (), max_concurrency: int = 1):
        self.replies: dict[tuple[str, Any], str] = {}
        for e in entries:
            ordinal = e.get("ordinal", "*")
            key = (e["stage_id"], "*" if ordinal in (None, "*") else int(ordinal))
            self.replies[key] = e["response"]
        self.max_concurrency = max_concurrency
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_replies(cls, replies: Mapping[str, Sequence[str]]) -> "ScriptedBackend":
        return cls({"stage_id": s, "ordinal": i, "response": r} for s, rs in replies.items() for i, r in enumerate(rs))

    @classmethod
    def load(cls, path) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    def generate(self, request: BackendRequest) -> str:
        with self._lock:
            n = self._counters.get(request.stage_id, 0)
            self._counters[request.stage_id] = n + 1
        reply = self.replies.get((request.stage_id, n), self.replies.get((request.stage_id, "*")))
        if reply is None:
            raise ScriptExhausted(f"script has no reply for {request.stage_id} call #{n}")
        return reply

    def calls(self, stage_id: str) -> int:
        return self._counters.get(stage_id, 0)


class FunctionBackend:
    """Backend driven by a Python callable; used for policies and instrumented fakes."""

    order_sensitive = False
    virtual_latency = True

    def __init__(self, fn: Callable[[BackendRequest], str], max_concurrency: int = 1, order_sensitive: bool = False):
        self.fn = fn
        self.max_concurrency = max_concurrency
        self.order_sensitive = order_sensitive

    def generate(self, request: BackendRequest) -> str:
        return self.fn(request)


class OpenAICompatibleBackend:
    """POSTs to an OpenAI-compatible /chat/completions endpoint."""

    order_sensitive = False
    virtual_latency = False

    def __init__(self, config: BackendConfig, client: Optional[httpx.Client] = None):
        self.config = config
        self.max_concurrency = config.max_concurrency
        self.url = config.endpoint.rstrip("/")
        if not self.url.endswith("/chat/completions"):
            self.url += "/chat/completions"
        self._client = client or httpx.Client(timeout=config.timeout_s)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "") if self.config.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def generate(self, request: BackendRequest) -> str:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        status: Optional[int] = None
        policy = self.config.retry
        for attempt in range(1, policy.max_attempts + 1):
            try:
                resp = self._client.post(self.url, json=payload, headers=self._headers())
                status = resp.status_code
                if resp.status_code == 200:
                    return resp.json()["choices"][0]["message"]["content"]
                log.warning("%s: HTTP %s on attempt %d", request.stage_id, status, attempt)
                if 400 <= status < 500 and status != 429:
                    break
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                log.warning("%s: %s on attempt %d", request.stage_id, exc, attempt)
            if attempt < policy.max_attempts:
                time.sleep(policy.backoff_s * 2 ** (attempt - 1))
        raise BackendError(f"{request.stage_id}: backend request failed", status)


def make_backend(config: BackendConfig) -> Backend:
    if config.kind == "scripted":
        if not config.script:
            raise ValueError("scripted backend needs a script path")
        return ScriptedBackend.load(config.script)
    return OpenAICompatibleBackend(config)


# ---------------------------------------------------------------------------
# structured output


def first_json_block(text: str) -> Optional[str]:
    """Return the first balanced {...} block, skipping braces inside strings."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_str = False
        esc = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start : i + 1]
        start = text.find("{", start + 1)
    return None


def _as_str(v: Any) -> str:
    if isinstance(v, str):
        return v
    return json.dumps(v) if isinstance(v, (list, dict)) else str(v)


def _as_int(v: Any) -> int:
    if isinstance(v, bool):
        raise TypeError("boolean")
    return int(round(float(v)))


def _as_list(v: Any) -> list:
    if not isinstance(v, list):
        raise TypeError("not a list")
    return v


_KINDS: dict[str, Callable[[Any], Any]] = {
    "str": _as_str,
    "int": _as_int,
    "float": float,
    "list": _as_list,
    "any": lambda v: v,
}


def parse_structured(text: str, schema: Mapping[str, str]) -> dict[str, Any]:
    """Parse the first JSON object in `text` and coerce `schema` fields (name -> kind)."""
    block = first_json_block(text)
    if block is None:
        raise ValueError("no JSON object found")
    try:
        doc = json.loads(block)
    except json.JSONDecodeError:
        doc = json.loads(re.sub(r",\s*([}\]])", r"\1", block))
    if not isinstance(doc, dict):
        raise ValueError("structured block is not an object")
    out = {}
    for name, kind in schema.items():
        if name not in doc:
            raise ValueError(f"missing field {name!r}")
        try:
            out[name] = _KINDS[kind](doc[name])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"field {name!r} is not {kind}: {exc}") from None
    return out


def describe_schema(schema: Mapping[str, str]) -> str:
    return "{" + ", ".join(f'"{k}": <{v}>' for k, v in schema.items()) + "}"


# ---------------------------------------------------------------------------
# gateway


@dataclass
class TranscriptEntry:
    stage_id: str
    prompt: str
    response: str
    latency_ms: float
    attempt: int
    context: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TranscriptEntry":
        return cls(**json.loads(line))


@dataclass(frozen=True)
class StructuredResult:
    record: dict
    attempts: int
    raw: str


class Gateway:
    def __init__(
        self,
        backend: Backend,
        stage_backends: Optional[Mapping[str, Backend]] = None,
        stages: Optional[Mapping[str, PromptStage]] = None,
        temperatures: Optional[Mapping[str, float]] = None,
        max_tokens: int = 1024,
        structured_attempts: int = 2,
    ):
        self.stages = dict(stages) if stages is not None else load_stages()
        self.default_backend = backend
        self.stage_backends = dict(stage_backends or {})
        self.temperatures = dict(temperatures or {})
        self.max_tokens = max_tokens
        self.structured_attempts = structured_attempts
        self.transcript: list[TranscriptEntry] = []
        self._lock = threading.Lock()
        self._semaphores: dict[int, threading.BoundedSemaphore] = {}

    # -- plumbing --------------------------------------------------------
    def backend_for(self, stage_id: str) -> Backend:
        return self.stage_backends.get(stage_id, self.default_backend)

    def _semaphore(self, backend: Backend) -> threading.BoundedSemaphore:
        with self._lock:
            sem = self._semaphores.get(id(backend))
            if sem is None:
                sem = threading.BoundedSemaphore(max(1, getattr(backend, "max_concurrency", 1)))
                self._semaphores[id(backend)] = sem
            return sem

    @property
    def order_sensitive(self) -> bool:
        backends = [self.default_backend, *self.stage_backends.values()]
        return any(getattr(b, "order_sensitive", False) for b in backends)

    @property
    def max_concurrency(self) -> int:
        if self.order_sensitive:
            return 1
        backends = [self.default_backend, *self.stage_backends.values()]
        return max(getattr(b, "max_concurrency", 1) for b in backends)

    def map(self, fn: Callable, items: Sequence) -> list:
        """Apply fn over items, concurrently when no bound backend depends on call order."""
        items = list(items)
        workers = self.max_concurrency
        if workers <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))

    def temperature(self, stage_id: str) -> float:
        if stage_id in self.temperatures:
            return self.temperatures[stage_id]
        return JUDGE_TEMPERATURE if stage_id in JUDGE_STAGES else GENERATION_TEMPERATURE

    def render(self, stage_id: str, variables: Mapping[str, Any]) -> str:
        try:
            stage = self.stages[stage_id]
        except KeyError:
            raise TemplateError(f"unknown stage {stage_id!r}") from None
        return stage.render(variables)

    def _call(self, stage_id: str, prompt: str, variables, attempt: int, context) -> str:
        backend = self.backend_for(stage_id)
        req = BackendRequest(stage_id, prompt, self.temperature(stage_id), self.max_tokens, dict(variables))
        t0 = time.perf_counter()
        with self._semaphore(backend):
            reply = backend.generate(req)
        latency = 0.0 if getattr(backend, "virtual_latency", False) else (time.perf_counter() - t0) * 1000
        with self._lock:
            self.transcript.append(TranscriptEntry(stage_id, prompt, reply, latency, attempt, dict(context or {})))
        return reply

    # -- public ----------------------------------------------------------
    def complete(self, stage_id: str, variables: Mapping[str, Any], context=None, correction: str = "") -> str:
        prompt = self.render(stage_id, variables)
        if correction:
            prompt = f"{prompt}\n\n{correction}"
        return self._call(stage_id, prompt, variables, 1, context)

    def complete_structured(
        self,
        stage_id: str,
        variables: Mapping[str, Any],
        schema: Mapping[str, str],
        context=None,
        correction: str = "",
    ) -> StructuredResult:
        base = self.render(stage_id, variables)
        if correction:
            base = f"{base}\n\n{correction}"
        raws: list[str] = []
        reason = ""
        prompt = base
        for attempt in range(1, self.structured_attempts + 1):
            raw = self._call(stage_id, prompt, variables, attempt, context)
            raws.append(raw)
            try:
                return StructuredResult(parse_structured(raw, schema), attempt, raw)
            except (ValueError, json.JSONDecodeError) as exc:
                reason = str(exc)
                prompt = (
                    f"{base}\n\nYour previous reply could not be used ({reason}). "
                    f"Answer with exactly one JSON object of the form {describe_schema(schema)}."
                )
        raise StructuredOutputError(stage_id, raws, reason)

    def write_transcript(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.transcript:
                fh.write(e.to_json() + "\n")


def read_transcript(path) -> list[TranscriptEntry]:
    with open(path, encoding="utf-8") as fh:
        return [TranscriptEntry.from_json(line) for line in fh if line.strip()]


def transcript_to_script(entries: Iterable[TranscriptEntry]) -> list[dict]:
    """Turn a recorded transcript into scripted-backend entries that replay it."""
    counters: dict[str, int] = {}
    out = []
    for e in entries:
        n = counters.get(e.stage_id, 0)
        counters[e.stage_id] = n + 1
        out.append({"stage_id": e.stage_id, "ordinal": n, "response": e.response})
    return out


def scripted_gateway(replies: Mapping[str, Sequence[str]], **kw) -> Gateway:
    return Gateway(ScriptedBackend.from_replies(replies), **kw)
