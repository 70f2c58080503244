import base64
import json
import math
import threading
import time
from dataclasses import replace

import httpx
import pytest
from hypothesis import given, strategies as st

from facility_enum.core import DoorBox, FacilityType, Plan, Verdict
from facility_enum.errors import ConfigError, ParseError, ProtocolError, TransportError, ValidationError
from facility_enum.gateway import (
    PROMPT_SUFFIX, CacheKey, ConnectionQuery, CountQuery, DiskCache, LLMGateway, MemoryCache, ModelAnswer,
    OmissionQuery, OracleBackend, OracleFixture, RemoteBackend, SameRoomQuery, build_prompt, facility_profile,
    parse_count, parse_verdict,
)
from facility_enum.gateway.backends import BackendRequest
from facility_enum.gateway.parsing import extract_reason
from facility_enum.overlay import BoxRole, OverlaySpec

from conftest import ScriptedBackend, blank_png

TOILET = FacilityType.TOILET


# -- parsing -----------------------------------------------------------------------

@pytest.mark.parametrize("raw, expected", [
    ("YES, it is a toilet", Verdict.YES),
    ("The answer is no.", Verdict.NO),
    ("facing north, yes", Verdict.YES),
    ("Nope... actually no", Verdict.NO),
    ("Yes \u2014 the door opens into a small room with a WC. Reason: there is a pan.", Verdict.YES),
    ("It is not a toilet; answer: no", Verdict.NO),
])
def test_parse_verdict(raw, expected):
    assert parse_verdict(raw) is expected


@pytest.mark.parametrize("raw", ["maybe", "north annotation", "", "yesterday nothing"])
def test_parse_verdict_failure(raw):
    with pytest.raises(ParseError) as err:
        parse_verdict(raw)
    assert err.value.raw_text == raw


@pytest.mark.parametrize("raw, expected", [
    ("There are 2 missing toilets", 2),
    ("zero missing instances", 0),
    ("Ten more, then 3", 10),
    ("I count 12 rooms; 3 are toilets", 12),
    ("0", 0),
])
def test_parse_count(raw, expected):
    assert parse_count(raw) == expected


@pytest.mark.parametrize("raw", ["I see none", "several", "-2 toilets"])
def test_parse_count_failure(raw):
    with pytest.raises(ParseError):
        parse_count(raw)


@given(st.integers(0, 10**6), st.text(alphabet="abc ,.", max_size=10))
def test_parse_count_reads_leading_integer(n, tail):
    assert parse_count(f"{n} {tail}") == n


def test_extract_reason():
    raw = "Yes \u2014 the door opens into a small room with a WC. Reason: WC pan drawn inside."
    assert parse_verdict(raw) is Verdict.YES
    assert extract_reason(raw) == "WC pan drawn inside."
    assert extract_reason("no reason marker") == "no reason marker"


# -- answers and queries -------------------------------------------------------------

def test_model_answer_rejects_negative_count():
    with pytest.raises(ParseError):
        ModelAnswer(-1, "-1")


def test_model_answer_round_trip():
    for a in (ModelAnswer(Verdict.NO, "No.", "x"), ModelAnswer(3, "3", "y")):
        assert ModelAnswer.from_dict(a.to_dict()) == a


def test_same_room_query_is_unordered_and_distinct():
    assert SameRoomQuery(5, 2) == SameRoomQuery(2, 5)
    with pytest.raises(ValidationError):
        SameRoomQuery(3, 3)


def test_omission_query_rejects_duplicates():
    with pytest.raises(ValidationError):
        OmissionQuery(TOILET, (1, 1))


# -- prompts ----------------------------------------------------------------------------

BOXES = {3: DoorBox(3, (10, 20, 30, 40), 0.9), 4: DoorBox(4, (50, 20, 70, 40), 0.8)}


def test_connection_prompt_contains_profile_and_suffix():
    profile = facility_profile(TOILET)
    p = build_prompt(ConnectionQuery(TOILET, 3), profile, BOXES)
    assert profile in p
    assert p.endswith(PROMPT_SUFFIX)
    assert "red bounding box" in p and "x=10..30" in p


def test_prompt_is_deterministic():
    args = (ConnectionQuery(TOILET, 3), facility_profile(TOILET), BOXES)
    assert build_prompt(*args) == build_prompt(*args)


def test_empty_profile_rejected_for_connection():
    with pytest.raises(ConfigError):
        build_prompt(ConnectionQuery(TOILET, 3), "  ", BOXES)


def test_unknown_template_version():
    with pytest.raises(ConfigError):
        build_prompt(CountQuery(TOILET), "x", version="v999")


@pytest.mark.parametrize("query", [
    ConnectionQuery(FacilityType.KITCHEN, 3), SameRoomQuery(3, 4, TOILET),
    OmissionQuery(TOILET, (3,)), CountQuery(FacilityType.EXIT),
])
def test_every_template_ends_with_suffix(query):
    fac = getattr(query, "facility", None)
    assert build_prompt(query, facility_profile(fac) if fac else "", BOXES).endswith(PROMPT_SUFFIX)


# -- cache ----------------------------------------------------------------------------------

KEY = CacheKey("a" * 64, "b" * 64, '{"kind":"count"}', "v1", "oracle")


def test_cache_key_sensitive_to_every_field():
    fields = dict(image_bytes_digest="c" * 64, overlay_digest="d", query="{}", prompt_template_version="v2",
                  backend_name="other")
    for name, value in fields.items():
        assert replace(KEY, **{name: value}).digest != KEY.digest
    assert replace(KEY).digest == KEY.digest


@pytest.mark.parametrize("make", [MemoryCache, lambda: DiskCache(pytest.tmp_dir)])
def test_cache_first_writer_wins(make, tmp_path):
    pytest.tmp_dir = tmp_path
    cache = make()
    assert cache.get(KEY) is None
    assert cache.put(KEY, ModelAnswer(2, "2", "")) is True
    assert cache.put(KEY, ModelAnswer(5, "5", "")) is False
    assert cache.get(KEY).count == 2


def test_disk_cache_concurrent_writers(tmp_path):
    cache = DiskCache(tmp_path)
    results = []

    def write(n):
        results.append(cache.put(KEY, ModelAnswer(n, str(n), "")))

    threads = [threading.Thread(target=write, args=(i,)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count(True) == 1
    winner = cache.get(KEY).count
    assert DiskCache(tmp_path).get(KEY).count == winner
    assert len(list(tmp_path.rglob("*.tmp"))) == 0


# -- gateway ----------------------------------------------------------------------------------

@pytest.fixture
def plan():
    return Plan.from_bytes(blank_png(100, 80), "p1")


def fixture_for(plan_id="p1"):
    return OracleFixture.from_dict({
        "plan_id": plan_id,
        "connection": {"toilet": {"1": True, "3": True, "0": False}},
        "same_room": [[3, 1]],
        "missing": {"toilet": 2},
    })


def test_oracle_passthrough(plan):
    gw = LLMGateway(OracleBackend(fixture_for()))
    assert gw.ask(ConnectionQuery(TOILET, 1), plan)[0].verdict is Verdict.YES
    assert gw.ask(ConnectionQuery(TOILET, 0), plan)[0].verdict is Verdict.NO
    assert gw.ask(ConnectionQuery(TOILET, 7), plan)[0].verdict is Verdict.NO
    assert gw.ask(SameRoomQuery(1, 3), plan)[0].verdict is Verdict.YES
    assert gw.ask(SameRoomQuery(0, 3), plan)[0].verdict is Verdict.NO
    assert gw.ask(OmissionQuery(TOILET, (1,)), plan)[0].count == 2
    assert gw.ask(CountQuery(TOILET), plan)[0].count == 3


def test_repeat_call_hits_cache(plan):
    backend = OracleBackend(fixture_for())
    gw = LLMGateway(backend)
    overlay = OverlaySpec(((DoorBox(1, (0, 0, 5, 5)), BoxRole.QUERIED),))
    a1, k1 = gw.ask(ConnectionQuery(TOILET, 1), plan, overlay)
    a2, k2 = gw.ask(ConnectionQuery(TOILET, 1), plan, overlay)
    assert a1 == a2 and k1 == k2
    assert backend.invocations == 1 and gw.hits == 1


def test_disk_cache_survives_new_gateway(plan, tmp_path):
    b1 = OracleBackend(fixture_for())
    LLMGateway(b1, DiskCache(tmp_path)).ask(ConnectionQuery(TOILET, 1), plan)
    b2 = OracleBackend(fixture_for())
    ans, _ = LLMGateway(b2, DiskCache(tmp_path)).ask(ConnectionQuery(TOILET, 1), plan)
    assert ans.verdict is Verdict.YES and b2.invocations == 0


def test_concurrent_asks_invoke_backend_once(plan):
    class Slow(OracleBackend):
        def complete(self, request):
            time.sleep(0.01)
            return super().complete(request)

    backend = Slow(fixture_for())
    gw = LLMGateway(backend)
    threads = [threading.Thread(target=gw.ask, args=(ConnectionQuery(TOILET, 1), plan)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert backend.invocations == 1


def test_reprompt_then_success(plan):
    backend = ScriptedBackend(["maybe", "Yes. Reason: WC symbol"])
    ans, _ = LLMGateway(backend).ask(ConnectionQuery(TOILET, 1), plan)
    assert ans.verdict is Verdict.YES and ans.reason_text == "WC symbol"
    assert backend.prompts[1].endswith("Answer strictly 'yes' or 'no'.")


def test_reprompt_then_parse_error(plan):
    backend = ScriptedBackend(["maybe", "still unsure"])
    with pytest.raises(ParseError) as err:
        LLMGateway(backend).ask(ConnectionQuery(TOILET, 1), plan)
    assert err.value.raw_text == "still unsure"
    assert backend.invocations == 2


def test_negative_count_is_parse_error(plan):
    backend = ScriptedBackend(["-2", "-2"])
    with pytest.raises(ParseError):
        LLMGateway(backend).ask(OmissionQuery(TOILET, ()), plan)


def test_image_backend_receives_overlay(plan):
    backend = ScriptedBackend(["no"])
    overlay = OverlaySpec(((DoorBox(1, (10, 10, 30, 30)), BoxRole.QUERIED),))
    LLMGateway(backend).ask(ConnectionQuery(TOILET, 1), plan, overlay)
    from facility_enum.overlay import render_overlay

    assert backend.images[0] == render_overlay(plan.image, overlay)[0]


def test_oracle_with_zero_error_matches_fixture_everywhere(plan):
    fx = fixture_for()
    gw = LLMGateway(OracleBackend(fx))
    for d in range(6):
        assert bool(gw.ask(ConnectionQuery(TOILET, d), plan)[0].verdict) == fx.connects(TOILET, d)
    for a in range(5):
        for b in range(a + 1, 5):
            assert bool(gw.ask(SameRoomQuery(a, b), plan)[0].verdict) == fx.same(a, b)


@pytest.mark.parametrize("eps", [0.05, 0.2])
def test_injected_flip_rate_within_three_sigma(eps):
    fx = OracleFixture("p", {TOILET: {i: i % 2 == 0 for i in range(12000)}})
    backend = OracleBackend(fx, error_rate=eps, seed=11)
    n = 12000
    flips = 0
    for i in range(n):
        raw = backend.complete(BackendRequest("p", ConnectionQuery(TOILET, i), ""))
        flips += parse_verdict(raw) is not Verdict.of(fx.connects(TOILET, i))
    sigma = math.sqrt(eps * (1 - eps) / n)
    assert abs(flips / n - eps) <= 3 * sigma
    assert flips == backend.flips


def test_flips_nest_across_rates():
    fx = OracleFixture("p", {TOILET: {i: True for i in range(2000)}})
    lo, hi = OracleBackend(fx, 0.05, seed=3), OracleBackend(fx, 0.2, seed=3)
    flipped = lambda b, i: parse_verdict(b.complete(BackendRequest("p", ConnectionQuery(TOILET, i), ""))) is Verdict.NO
    assert all(flipped(hi, i) for i in range(2000) if flipped(lo, i))


def test_oracle_unknown_plan(plan):
    with pytest.raises(ConfigError):
        LLMGateway(OracleBackend(fixture_for("other"))).ask(CountQuery(TOILET), plan)


def test_fixture_round_trip():
    fx = fixture_for()
    assert OracleFixture.from_dict(json.loads(json.dumps(fx.to_dict()))) == fx


# -- remote backend ------------------------------------------------------------------------------

def remote(handler, **kw):
    return RemoteBackend("http://llm/v1", "sk-test", "test-model", backoff_s=0,
                         client=httpx.Client(transport=httpx.MockTransport(handler)), **kw)


def chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def test_remote_request_shape(plan):
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return chat_reply("Yes \u2014 the door opens into a small room with a WC. Reason: pan and basin visible.")

    gw = LLMGateway(remote(handler))
    overlay = OverlaySpec(((DoorBox(1, (10, 10, 30, 30)), BoxRole.QUERIED),))
    ans, _ = gw.ask(ConnectionQuery(TOILET, 1), plan, overlay, {1: DoorBox(1, (10, 10, 30, 30))})
    assert ans.verdict is Verdict.YES and ans.reason_text == "pan and basin visible."
    assert seen["url"] == "http://llm/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    body = seen["body"]
    assert body["model"] == "test-model"
    text, image = body["messages"][0]["content"]
    assert text["type"] == "text" and text["text"].endswith(PROMPT_SUFFIX)
    assert image["image_url"]["url"].startswith("data:image/png;base64,")
    png = base64.b64decode(image["image_url"]["url"].split(",", 1)[1])
    assert png[:4] == b"\x89PNG"


def test_remote_retries_on_5xx_then_succeeds(plan):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(502) if len(calls) < 3 else chat_reply("no")

    assert LLMGateway(remote(handler)).ask(ConnectionQuery(TOILET, 1), plan)[0].verdict is Verdict.NO
    assert len(calls) == 3


def test_remote_gives_up(plan):
    def handler(request):
        raise httpx.ReadTimeout("slow")

    with pytest.raises(TransportError) as err:
        LLMGateway(remote(handler, max_attempts=2)).ask(ConnectionQuery(TOILET, 1), plan)
    assert err.value.attempts == 2


def test_remote_4xx_is_protocol_error(plan):
    with pytest.raises(ProtocolError):
        LLMGateway(remote(lambda r: httpx.Response(400))).ask(ConnectionQuery(TOILET, 1), plan)


def test_remote_bad_payload(plan):
    with pytest.raises(ProtocolError):
        LLMGateway(remote(lambda r: httpx.Response(200, json={"x": 1}))).ask(ConnectionQuery(TOILET, 1), plan)


def test_remote_requires_key(monkeypatch):
    monkeypatch.delenv("FE_LLM_KEY", raising=False)
    with pytest.raises(ConfigError, match="FE_LLM_KEY"):
        RemoteBackend("http://llm")


def test_remote_env_configuration(monkeypatch):
    monkeypatch.setenv("FE_LLM_URL", "http://env-llm/v1/chat/completions")
    monkeypatch.setenv("FE_LLM_KEY", "k")
    monkeypatch.setenv("FE_LLM_MODEL", "m")
    b = RemoteBackend(client=object())
    assert b.endpoint == "http://env-llm/v1/chat/completions" and b.model == "m"


def test_remote_in_flight_limit(plan):
    active, peak = [0], [0]
    lock = threading.Lock()

    def handler(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return chat_reply("yes")

    backend = remote(handler, max_in_flight=2)
    threads = [threading.Thread(target=backend.complete, args=(BackendRequest("p", CountQuery(TOILET), "q"),))
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2 and backend.invocations == 8


def test_remote_rate_limit():
    backend = remote(lambda r: chat_reply("yes"), max_in_flight=1, rate_per_s=50.0)
    start = time.monotonic()
    for _ in range(6):
        backend.complete(BackendRequest("p", CountQuery(TOILET), "q"))
    # one token of burst, then 50/s: five waits of 20 ms
    assert time.monotonic() - start >= 0.09
