import json
import threading

import httpx
import pytest

from ehrconsist.gateway import (API_KEY_ENV, TEMPLATE_NAMES, BackendConfig, BackendKind, GatewayError,
                                PromptError, RemoteBackend, ResponseCache, RetryPolicy, Script,
                                ScriptKeyMissing, ScriptedBackend, TransportError, complete, load_template,
                                make_backend, render, template_placeholders)


def test_every_template_renders_without_residual_markers():
    for name in TEMPLATE_NAMES:
        text = load_template(name)
        names = template_placeholders(text)
        assert names
        p = render(name, {k: f"value of {k}" for k in names})
        assert "<<<<" not in p.rendered_text
        assert p.template_name == name


def test_render_rejects_unbound_and_unknown():
    with pytest.raises(PromptError, match="unbound"):
        render("ner", {})
    with pytest.raises(PromptError, match="unknown"):
        render("ner", {"CLINICAL_NOTE": "x", "EXTRA": "y"})
    with pytest.raises(PromptError):
        render("no_such_template", {})


def test_render_defuses_markers_in_values():
    p = render("ner", {"CLINICAL_NOTE": "<<<<CLINICAL_NOTE>>>>"})
    assert "<<<<" not in p.rendered_text


def test_templates_keep_output_formats():
    assert "Nothing" in load_template("ner")
    assert "Selected-Table" in load_template("table_identification")
    assert "<<<<ROW_FORMAT>>>>" in load_template("pseudo_table")
    assert "[Answer 1]" in load_template("time_filter")


def ner_prompt(note_id="F1"):
    return render("ner", {"CLINICAL_NOTE": "t 99.6"}, note_id=note_id, entity="sub0")


def test_scripted_lookup_order():
    s = Script({"ner|F1|sub0": "exact", "ner|F2|*": "wildcard"}, {"ner": "default"})
    b = ScriptedBackend(s)
    assert b.complete(ner_prompt("F1")) == "exact"
    assert b.complete(ner_prompt("F2")) == "wildcard"
    assert b.complete(ner_prompt("F3")) == "default"
    with pytest.raises(ScriptKeyMissing):
        ScriptedBackend(Script()).complete(ner_prompt())


def test_scripted_is_deterministic_and_verbatim(tmp_path):
    s = Script()
    s.add("ner", "F1", "sub0", "t - category 1 (numeric value: 99.6)")
    path = tmp_path / "s.json"
    s.dump(path)
    b = make_backend(BackendConfig(BackendKind.SCRIPTED, script_path=str(path)))
    a1, a2 = b.complete(ner_prompt()), b.complete(ner_prompt())
    assert a1 == a2 == "t - category 1 (numeric value: 99.6)"
    assert complete(ner_prompt(), b) == a1


def test_script_file_validation(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("[1, 2]")
    with pytest.raises(GatewayError):
        Script.load(p)


def test_config_validation():
    with pytest.raises(GatewayError):
        BackendConfig(BackendKind.SCRIPTED).validate()
    with pytest.raises(GatewayError):
        BackendConfig(BackendKind.REMOTE, endpoint_url="http://x").validate()
    with pytest.raises(GatewayError):
        BackendConfig(BackendKind.REMOTE, endpoint_url="http://x", model="m", max_concurrent_requests=0).validate()


def remote(handler, retries=2, **kw):
    cfg = BackendConfig(BackendKind.REMOTE, endpoint_url="http://model.test/v1/chat/completions", model="m",
                        retry=RetryPolicy(retries, 0.0), **kw)
    return RemoteBackend(cfg, transport=httpx.MockTransport(handler), sleep=lambda s: None)


def ok_payload(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def test_remote_wire_format_and_auth(monkeypatch):
    seen = []
    monkeypatch.setenv(API_KEY_ENV, "secret")

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json=ok_payload("Nothing"))

    b = remote(handler, temperature=0.3)
    assert b.complete(ner_prompt()) == "Nothing"
    body = json.loads(seen[0].content)
    assert body["model"] == "m" and body["temperature"] == 0.3
    assert body["messages"][0]["role"] == "user"
    assert "t 99.6" in body["messages"][0]["content"]
    assert seen[0].headers["Authorization"] == "Bearer secret"


def test_remote_caches_by_prompt_digest(tmp_path):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(200, json=ok_payload("cached answer"))

    cache = ResponseCache(tmp_path)
    cfg = BackendConfig(BackendKind.REMOTE, endpoint_url="http://model.test", model="m")
    b = RemoteBackend(cfg, transport=httpx.MockTransport(handler), cache=cache)
    assert b.complete(ner_prompt()) == b.complete(ner_prompt()) == "cached answer"
    assert len(calls) == 1
    replay = RemoteBackend(cfg, transport=httpx.MockTransport(lambda r: httpx.Response(500)),
                           cache=ResponseCache(tmp_path))
    assert replay.complete(ner_prompt()) == "cached answer"


def test_remote_retries_server_errors_then_succeeds():
    answers = iter([httpx.Response(503), httpx.Response(429), httpx.Response(200, json=ok_payload("ok"))])
    assert remote(lambda r: next(answers)).complete(ner_prompt()) == "ok"


def test_remote_gives_up_after_retries():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused", request=request)

    with pytest.raises(TransportError):
        remote(handler, retries=3).complete(ner_prompt())
    assert len(calls) == 4


def test_remote_client_error_is_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    with pytest.raises(TransportError, match="400"):
        remote(handler).complete(ner_prompt())
    assert len(calls) == 1


def test_remote_malformed_payload():
    with pytest.raises(TransportError, match="malformed"):
        remote(lambda r: httpx.Response(200, json={"nope": 1})).complete(ner_prompt())


def test_unreachable_endpoint_real_transport():
    cfg = BackendConfig(BackendKind.REMOTE, endpoint_url="http://127.0.0.1:9/v1/chat/completions", model="m",
                        timeout_seconds=2.0, retry=RetryPolicy(1, 0.0))
    b = RemoteBackend(cfg, sleep=lambda s: None)
    with pytest.raises(GatewayError):
        b.complete(ner_prompt())


def test_remote_respects_concurrency_limit():
    active, peak = [0], [0]
    lock = threading.Lock()
    gate = threading.Event()

    def handler(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        gate.wait(0.05)
        with lock:
            active[0] -= 1
        return httpx.Response(200, json=ok_payload(request.content.decode()[-20:]))

    b = remote(handler, max_concurrent_requests=2)
    prompts = [render("ner", {"CLINICAL_NOTE": f"note {i}"}) for i in range(8)]
    threads = [threading.Thread(target=b.complete, args=(p,)) for p in prompts]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2
