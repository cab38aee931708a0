import json
import socket
import threading

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from popsim.backend import (
    HttpBackend,
    PromptKind,
    PromptRequest,
    ReplayBackend,
    ScriptedBackend,
    TemplateStore,
    hash_vector,
    render_template,
    truncate_memory,
)
from popsim.errors import BackendUnavailable, MalformedResponse, PreconditionError, TemplateError

from conftest import scripted


def choose_request(seed=0, **slots):
    base = {"separated": "s", "fused": "f", "shared": "none", "domain": "Books",
            "neg": "[j] neg text", "pos": "[i] pos text"}
    base.update(slots)
    return PromptRequest(PromptKind.CHOOSE_POSITIVE, "choose_positive", base, seed)


# ---------------------------------------------------------------- templates

def test_render_substitutes():
    assert render_template("User likes: {prefs}", {"prefs": "jazz"}) == "User likes: jazz"


def test_render_missing_slot():
    with pytest.raises(TemplateError):
        render_template("User likes: {prefs}", {})


def test_render_unused_slot():
    with pytest.raises(TemplateError):
        render_template("User likes: {prefs}", {"prefs": "jazz", "extra": "x"})


def test_render_literal_braces():
    assert render_template("{{x}} {a}", {"a": "1"}) == "{x} 1"


def test_slot_values_are_not_reinterpreted():
    out = render_template("say {a}", {"a": "{b}"})
    assert out == "say {b}"


def test_negative_rendered_before_positive(templates):
    out = templates.render("choose_positive", choose_request().slots)
    assert out.index("neg text") < out.index("pos text")


def test_template_with_pos_first_is_rejected():
    with pytest.raises(TemplateError):
        TemplateStore({"bad": "{pos} then {neg}"})


def test_template_file_sections():
    store = TemplateStore.parse("# c\n=== a ===\nhello {x}\n\n=== b ===\nbye\n")
    assert store.templates == {"a": "hello {x}", "b": "bye"}
    with pytest.raises(TemplateError):
        TemplateStore.parse("stray text\n=== a ===\nx")
    with pytest.raises(TemplateError):
        TemplateStore.parse("=== a ===\nx\n=== a ===\ny")


def test_shipped_templates_cover_every_kind(templates):
    for tid in ("choose_positive", "rank_candidates", "llmrank", "update_user_memory",
                "extract_relevant_preferences", "fuse_preferences", "update_item_memory",
                "extract_tags", "name_group"):
        assert tid in templates.templates


@given(st.text(), st.integers(min_value=0, max_value=50))
def test_truncate_keeps_newest(text, budget):
    out = truncate_memory(text, budget)
    if budget == 0 or len(text) <= budget:
        assert out == text
    else:
        assert len(out) == budget and text.endswith(out)


# ------------------------------------------------------------------ requests

def test_request_requires_kind_slots():
    req = PromptRequest(PromptKind.NAME_GROUP, "name_group", {})
    with pytest.raises(PreconditionError):
        req.validate()


def test_cache_key_ignores_slot_order():
    a = PromptRequest("name-group", "name_group", {"tags": "x", "z": "1"}, 3)
    b = PromptRequest("name-group", "name_group", {"z": "1", "tags": "x"}, 3)
    assert a.key() == b.key()
    assert a.key() != PromptRequest("name-group", "name_group", {"tags": "x", "z": "1"}, 4).key()


# ------------------------------------------------------------------ scripted

def test_scripted_first_match_wins():
    b = scripted([{"kind": "choose-positive", "response": "B"},
                  {"kind": "choose-positive", "response": "A"}])
    assert b.complete(choose_request()).text == "B"


def test_scripted_slot_predicates_and_interpolation():
    b = scripted([{"kind": "choose-positive", "slot_contains": {"pos": "special"}, "response": "A {domain}"},
                  {"kind": "choose-positive", "response": "B"}])
    assert b.complete(choose_request(pos="[i] special")).text == "A Books"
    assert b.complete(choose_request()).text == "B"


def test_scripted_needs_catch_all():
    with pytest.raises(ValueError):
        ScriptedBackend.from_dict({"completions": [{"kind": "name-group", "response": "x"}]})


def test_scripted_empty_generation_is_malformed():
    b = scripted([{"kind": "name-group", "response": ""}])
    with pytest.raises(MalformedResponse):
        b.complete(PromptRequest("name-group", "name_group", {"tags": "a"}))


def test_scripted_embeddings():
    b = scripted([], [{"text": "rock music", "vector": [1, 0]},
                      {"text": "classical music", "vector": [0, 1]}], dimension=2)
    assert list(b.embed("rock music")) == [1, 0]
    assert list(b.embed("classical music")) == [0, 1]
    np.testing.assert_array_equal(b.embed("jazz"), b.embed("jazz"))


def test_embed_empty_text_rejected():
    with pytest.raises(PreconditionError):
        scripted([]).embed("")


def test_hash_vector_is_stable():
    v = hash_vector("board games", 8)
    # frozen: sha256 bytes mapped to [-1, 1]; independent of platform
    assert v.shape == (8,)
    np.testing.assert_array_equal(v, hash_vector("Board Games ", 8))
    assert np.linalg.norm(v) > 0


def test_scripted_run_makes_no_network_calls(monkeypatch, golden_backend):
    def boom(*a, **k):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket, "socket", boom)
    monkeypatch.setattr(socket, "create_connection", boom)
    from popsim.simulation import rain_gear_scenario
    assert rain_gear_scenario("agentcf++")


# -------------------------------------------------------------------- replay

def test_replay_identical_responses(tmp_path):
    inner = scripted([{"kind": "name-group", "response": "{tags}!"}])
    cache = tmp_path / "cache.jsonl"
    rb = ReplayBackend(cache, inner=inner)
    req = PromptRequest("name-group", "name_group", {"tags": "a"}, 1)
    first = rb.complete(req).text
    second = rb.complete(req).text
    assert first == second == "a!"
    assert rb.hits == 1 and rb.misses == 1
    rec = json.loads(cache.read_text().splitlines()[0])
    assert set(rec) == {"digest", "kind", "response", "timestamp"}
    # a fresh read-only replay serves the same bytes with no inner backend
    offline = ReplayBackend(cache, templates=inner.templates)
    assert offline.complete(req).text == first
    with pytest.raises(BackendUnavailable):
        offline.complete(PromptRequest("name-group", "name_group", {"tags": "b"}, 1))


def test_replay_embeddings(tmp_path):
    inner = scripted([], dimension=6)
    rb = ReplayBackend(tmp_path / "c.jsonl", inner=inner)
    v = rb.embed("hiking")
    offline = ReplayBackend(tmp_path / "c.jsonl", templates=inner.templates, dimension=6)
    np.testing.assert_allclose(offline.embed("hiking"), v)


def test_replay_skips_torn_record(tmp_path):
    cache = tmp_path / "c.jsonl"
    inner = scripted([{"kind": "name-group", "response": "n"}])
    rb = ReplayBackend(cache, inner=inner)
    rb.complete(PromptRequest("name-group", "name_group", {"tags": "a"}))
    with cache.open("a") as fh:
        fh.write('{"digest": "abc", "kin')
    again = ReplayBackend(cache, templates=inner.templates)
    assert len(again.entries) == 1


def test_replay_concurrent_calls(tmp_path):
    inner = scripted([{"kind": "name-group", "response": "{tags}"}])
    rb = ReplayBackend(tmp_path / "c.jsonl", inner=inner)
    out = {}

    def work(n):
        out[n] = rb.complete(PromptRequest("name-group", "name_group", {"tags": f"t{n}"})).text

    threads = [threading.Thread(target=work, args=(n,)) for n in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert out == {n: f"t{n}" for n in range(16)}
    assert len((tmp_path / "c.jsonl").read_text().splitlines()) == 16


# ---------------------------------------------------------------------- live

def _mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_http_backend_completion_and_embedding(templates):
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((request.url.path, body))
        if request.url.path.endswith("/chat/completions"):
            return httpx.Response(200, json={"choices": [{"message": {"content": " B\nbecause "}}],
                                             "usage": {"prompt_tokens": 10, "completion_tokens": 2}})
        return httpx.Response(200, json={"data": [{"embedding": [0.5, 0.5, 0.0]}]})

    b = HttpBackend("http://llm.test/v1", "some-model", templates=templates, dimension=3,
                    client=_mock_client(handler))
    resp = b.complete(choose_request(seed=7))
    assert resp.text == "B\nbecause"
    assert resp.usage == {"prompt_tokens": 10, "completion_tokens": 2}
    assert seen[0][1]["seed"] == 7 and seen[0][1]["model"] == "some-model"
    assert list(b.embed("x")) == [0.5, 0.5, 0.0]


def test_http_backend_retries_then_unavailable(templates):
    attempts = []

    def handler(request):
        attempts.append(1)
        raise httpx.ConnectError("refused", request=request)

    b = HttpBackend("http://unreachable.test/v1", "m", templates=templates, retries=3,
                    backoff=0.0, client=_mock_client(handler))
    with pytest.raises(BackendUnavailable):
        b.complete(choose_request())
    assert len(attempts) == 3


def test_http_backend_unreachable_endpoint(templates):
    # a real socket: nothing listens on port 9 of localhost
    b = HttpBackend("http://127.0.0.1:9/v1", "m", templates=templates, retries=2, backoff=0.0,
                    timeout=1.0)
    with pytest.raises(BackendUnavailable):
        b.embed("x")


def test_http_backend_recovers_after_transient_error(templates):
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            return httpx.Response(503)
        return httpx.Response(200, json={"choices": [{"message": {"content": "A"}}]})

    b = HttpBackend("http://llm.test/v1", "m", templates=templates, backoff=0.0,
                    client=_mock_client(handler))
    assert b.complete(choose_request()).text == "A"
    assert len(calls) == 2


def test_http_backend_empty_generation(templates):
    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": ""}}]})

    b = HttpBackend("http://llm.test/v1", "m", templates=templates, client=_mock_client(handler))
    with pytest.raises(MalformedResponse):
        b.complete(choose_request())
