import json
import threading
import time

import httpx
import pytest

from mobsim.llm import (
    STAGE_SCHEMA,
    BackendConfig,
    BackendError,
    FunctionBackend,
    Gateway,
    OpenAICompatibleBackend,
    RetryPolicy,
    ScriptedBackend,
    ScriptExhausted,
    StructuredOutputError,
    TemplateError,
    first_json_block,
    load_stages,
    make_backend,
    parse_structured,
    read_transcript,
    scripted_gateway,
    transcript_to_script,
)

JUDGE = {"score": "int", "rationale": "str"}


def test_shipped_templates_declare_their_placeholders():
    stages = load_stages()
    assert set(stages) == set(STAGE_SCHEMA)
    for sid, st in stages.items():
        assert st.variables == STAGE_SCHEMA[sid][0]
        st.render({v: f"<{v}>" for v in st.variables})


def test_missing_variable_names_it():
    gw = scripted_gateway({})
    with pytest.raises(TemplateError, match="output"):
        gw.render("judge_quality", {})
    with pytest.raises(TemplateError):
        gw.render("no_such_stage", {})


def test_override_dir_validates_placeholders(tmp_path):
    (tmp_path / "judge_quality.txt").write_text("# version: 9\n---\nRate $output and $extra\n")
    with pytest.raises(TemplateError, match="extra"):
        load_stages(tmp_path)
    (tmp_path / "judge_quality.txt").write_text("# version: 9\n---\nRate: $output\n")
    st = load_stages(tmp_path)["judge_quality"]
    assert st.version == "9"
    assert st.render({"output": "xyz"}) == "Rate: xyz\n"


def test_scripted_replies_by_ordinal_and_exhaustion():
    gw = Gateway(ScriptedBackend([
        {"stage_id": "judge_quality", "ordinal": 0, "response": "first"},
        {"stage_id": "judge_quality", "ordinal": 1, "response": "second"},
    ]))
    assert gw.complete("judge_quality", {"output": "a"}) == "first"
    assert gw.complete("judge_quality", {"output": "a"}) == "second"
    with pytest.raises(ScriptExhausted):
        gw.complete("judge_quality", {"output": "a"})


def test_scripted_wildcard():
    gw = Gateway(ScriptedBackend([
        {"stage_id": "judge_quality", "ordinal": "*", "response": "any"},
        {"stage_id": "judge_quality", "ordinal": 1, "response": "special"},
    ]))
    assert [gw.complete("judge_quality", {"output": ""}) for _ in range(3)] == ["any", "special", "any"]


def test_scripted_echo_is_deterministic():
    def run():
        gw = scripted_gateway({"judge_quality": ['{"score": 3, "rationale": "x"}', '{"score": 8, "rationale": "y"}']})
        return [gw.complete_structured("judge_quality", {"output": str(i)}, JUDGE).record for i in range(2)]

    assert run() == run() == [{"score": 3, "rationale": "x"}, {"score": 8, "rationale": "y"}]


def test_structured_retry_then_success_and_failure():
    gw = scripted_gateway({"judge_quality": ["no json here", 'sure: {"score": 6, "rationale": "ok",}']})
    res = gw.complete_structured("judge_quality", {"output": "t"}, JUDGE)
    assert res.attempts == 2 and res.record["score"] == 6
    assert "could not be used" in gw.transcript[1].prompt
    assert [e.attempt for e in gw.transcript] == [1, 2]

    bad = scripted_gateway({"judge_quality": ["nope", '{"score": "high"}']})
    with pytest.raises(StructuredOutputError) as e:
        bad.complete_structured("judge_quality", {"output": "t"}, JUDGE)
    assert e.value.raw == ["nope", '{"score": "high"}']
    assert "nope" in str(e.value)


def test_first_json_block_skips_braces_in_strings():
    assert first_json_block('x {"a": "}{", "b": {"c": 1}} y {"z": 2}') == '{"a": "}{", "b": {"c": 1}}'
    assert first_json_block("none") is None
    assert parse_structured('{"n": 2.6, "l": [1]}', {"n": "int", "l": "list"}) == {"n": 3, "l": [1]}
    with pytest.raises(ValueError):
        parse_structured('{"n": true}', {"n": "int"})


def test_transcript_records_every_call_and_replays(tmp_path):
    gw = scripted_gateway({"judge_quality": ["bad", '{"score": 1, "rationale": ""}', "free"]})
    gw.complete_structured("judge_quality", {"output": "x"}, JUDGE, context={"user_id": "u1"})
    gw.complete("judge_quality", {"output": "y"})
    assert len(gw.transcript) == 3
    assert gw.transcript[0].context == {"user_id": "u1"}
    path = tmp_path / "t.jsonl"
    gw.write_transcript(path)
    entries = read_transcript(path)
    assert [e.response for e in entries] == ["bad", '{"score": 1, "rationale": ""}', "free"]
    replay = Gateway(ScriptedBackend(transcript_to_script(entries)))
    assert replay.complete("judge_quality", {"output": "q"}) == "bad"


def test_temperatures():
    gw = scripted_gateway({})
    assert gw.temperature("judge_quality") == 0.0
    assert gw.temperature("plan_day") == 0.7
    gw2 = scripted_gateway({}, temperatures={"plan_day": 0.2})
    assert gw2.temperature("plan_day") == 0.2


def test_concurrency_limit_is_respected():
    active = 0
    peak = 0
    lock = threading.Lock()

    def slow(req):
        nonlocal active, peak
        with lock:
            active += 1
            peak = max(peak, active)
        time.sleep(0.01)
        with lock:
            active -= 1
        return "ok"

    backend = FunctionBackend(slow, max_concurrency=3)
    gw = Gateway(backend)
    # the executor is wider than the backend limit; the semaphore must cap it
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=10) as pool:
        list(pool.map(lambda i: gw.complete("judge_quality", {"output": str(i)}), range(30)))
    assert peak == 3
    assert len(gw.transcript) == 30
    out = gw.map(lambda i: gw.complete("judge_quality", {"output": str(i)}), range(12))
    assert out == ["ok"] * 12 and peak <= 3


def test_order_sensitive_backend_forces_sequential():
    gw = Gateway(FunctionBackend(lambda r: "x", max_concurrency=8), stage_backends={"plan_day": ScriptedBackend()})
    assert gw.order_sensitive and gw.max_concurrency == 1
    assert Gateway(FunctionBackend(lambda r: "x", max_concurrency=8)).max_concurrency == 8


def _http_backend(handler, attempts=3, key_env=""):
    cfg = BackendConfig(kind="http_openai_compatible", endpoint="http://llm.test/v1", model="m", api_key_env=key_env,
                        retry=RetryPolicy(attempts, 0.0))
    return OpenAICompatibleBackend(cfg, httpx.Client(transport=httpx.MockTransport(handler)))


def test_http_backend_payload_and_auth(monkeypatch):
    seen = {}

    def handler(request: httpx.Request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": '{"score": 4, "rationale": "r"}'}}]})

    monkeypatch.setenv("TEST_LLM_KEY", "sekrit")
    gw = Gateway(_http_backend(handler, key_env="TEST_LLM_KEY"))
    rec = gw.complete_structured("judge_quality", {"output": "o"}, JUDGE).record
    assert rec == {"score": 4, "rationale": "r"}
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sekrit"
    assert seen["body"]["temperature"] == 0.0 and seen["body"]["model"] == "m"
    assert seen["body"]["messages"][0]["role"] == "user"
    assert gw.transcript[0].latency_ms >= 0


def test_http_backend_retries_then_fails():
    calls = []

    def flaky(request):
        calls.append(1)
        return httpx.Response(503) if len(calls) < 3 else httpx.Response(200, json={"choices": [{"message": {"content": "fine"}}]})

    assert Gateway(_http_backend(flaky)).complete("judge_quality", {"output": ""}) == "fine"
    assert len(calls) == 3

    calls.clear()
    with pytest.raises(BackendError, match="503"):
        Gateway(_http_backend(lambda r: (calls.append(1), httpx.Response(503))[1], attempts=2)).complete("judge_quality", {"output": ""})
    assert len(calls) == 2

    calls.clear()
    with pytest.raises(BackendError, match="401"):
        Gateway(_http_backend(lambda r: (calls.append(1), httpx.Response(401))[1])).complete("judge_quality", {"output": ""})
    assert len(calls) == 1


def test_make_backend(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps({"stage_id": "judge_quality", "ordinal": 0, "response": "r"}) + "\n")
    b = make_backend(BackendConfig(script=str(path)))
    assert isinstance(b, ScriptedBackend)
    with pytest.raises(ValueError):
        make_backend(BackendConfig())
    with pytest.raises(ValueError):
        BackendConfig(kind="carrier_pigeon")
