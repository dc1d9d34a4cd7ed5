import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from rulebook.errors import BackendError, MockScriptError, ProtocolError
from rulebook.gateway import CACHE_BYPASS, ChatRequest, ChatResponse, Gateway, HttpBackend
from rulebook.mock import MockBackend, MockScript

from conftest import mock_gateway


def request_for(text="hello", **kwargs):
    defaults = dict(model="m", messages=(("user", text),), template_id="t")
    defaults.update(kwargs)
    return ChatRequest(**defaults)


class TestCanonicalization:
    def test_digest_stable_across_processes(self):
        # frozen expectation: the canonical form must not drift, or on-disk
        # caches from earlier runs would be silently invalidated
        req = ChatRequest(model="m", messages=(("user", "hi"),), temperature=0.0)
        assert req.canonical() == (
            '{"messages":[["user","hi"]],"model":"m","seed_tag":null,'
            '"temperature":0.0,"want_top_logprobs":null}'
        )

    def test_seed_tag_distinguishes_requests(self):
        a = request_for(seed_tag="attempt-1")
        b = request_for(seed_tag="attempt-2")
        assert a.digest() != b.digest()

    def test_metadata_not_in_cache_key(self):
        a = request_for(template_id="t", bindings={"x": "1"})
        b = request_for(template_id="other", bindings={"x": "2"})
        assert a.digest() == b.digest()


class TestCaching:
    def test_repeat_request_hits_cache(self):
        script = MockScript().add_response("t", "LABEL: accept")
        gw = mock_gateway(script)
        req = request_for()
        first = gw.complete(req)
        second = gw.complete(req)
        assert first.content == second.content == "LABEL: accept"
        assert script.total_calls == 1
        assert gw.stats.backend_calls == 1
        assert gw.stats.cache_hits == 1

    def test_bypass_always_calls_backend(self):
        script = MockScript().add_response("t", "x")
        gw = mock_gateway(script)
        req = request_for()
        gw.complete(req, CACHE_BYPASS)
        gw.complete(req, CACHE_BYPASS)
        assert script.total_calls == 2

    def test_distinct_canonical_requests_each_call_backend(self):
        script = MockScript().add_response("t", "x")
        gw = mock_gateway(script)
        seen = set()
        for text in ("a", "b", "a", "c", "b"):
            gw.complete(request_for(text))
            seen.add(text)
        assert gw.stats.backend_calls == len(seen)

    def test_disk_cache_survives_restart(self, tmp_path):
        script = MockScript().add_response("t", "persisted")
        gw1 = mock_gateway(script, cache_dir=tmp_path / "cache")
        gw1.complete(request_for())
        # a fresh gateway over the same directory serves from disk
        gw2 = mock_gateway(script, cache_dir=tmp_path / "cache")
        response = gw2.complete(request_for())
        assert response.content == "persisted"
        assert script.total_calls == 1
        entries = list((tmp_path / "cache").glob("*.json"))
        assert len(entries) == 1
        payload = json.loads(entries[0].read_text())
        assert payload["request"]["messages"] == [["user", "hello"]]

    def test_logprobs_round_trip_through_disk(self, tmp_path):
        response = ChatResponse(content="3", top_logprobs=((("3", 0.6), ("4", 0.3)),))
        script = MockScript().add_handler("t", lambda b, r: response)
        gw1 = mock_gateway(script, cache_dir=tmp_path)
        gw1.complete(request_for(want_top_logprobs=5))
        gw2 = mock_gateway(script, cache_dir=tmp_path)
        again = gw2.complete(request_for(want_top_logprobs=5))
        assert again.top_logprobs == ((("3", 0.6), ("4", 0.3)),)


class TestRetries:
    def test_transport_errors_retried(self):
        script = MockScript().add_response("t", "ok")
        backend = MockBackend(script, fail_first=2, failure=BackendError("boom"))
        gw = Gateway(backend, retries=3, backoff=0.0)
        assert gw.complete(request_for()).content == "ok"

    def test_retries_exhausted_raises(self):
        script = MockScript().add_response("t", "ok")
        backend = MockBackend(script, fail_first=5, failure=BackendError("boom"))
        gw = Gateway(backend, retries=3, backoff=0.0)
        with pytest.raises(BackendError):
            gw.complete(request_for())

    def test_protocol_errors_not_retried(self):
        script = MockScript().add_response("t", "ok")
        backend = MockBackend(script, fail_first=1, failure=ProtocolError("bad payload"))
        gw = Gateway(backend, retries=3, backoff=0.0)
        with pytest.raises(ProtocolError):
            gw.complete(request_for())
        assert script.total_calls == 0


class TestMockDispatch:
    def test_static_when_clause_matches_selected_bindings(self):
        script = (
            MockScript()
            .add_response("t", "special", when={"example_id": "e7"})
            .add_response("t", "generic")
        )
        gw = mock_gateway(script)
        special = gw.complete(request_for(bindings={"example_id": "e7"}, seed_tag="a"))
        generic = gw.complete(request_for(bindings={"example_id": "e1"}, seed_tag="b"))
        assert special.content == "special"
        assert generic.content == "generic"

    def test_unscripted_template_raises(self):
        gw = mock_gateway(MockScript())
        with pytest.raises(MockScriptError):
            gw.complete(request_for())

    def test_handler_sees_seed_tag(self):
        script = MockScript().add_handler("t", lambda b, r: f"tag={r.seed_tag}")
        gw = mock_gateway(script)
        assert gw.complete(request_for(seed_tag="s3")).content == "tag=s3"


class TestConcurrency:
    def test_concurrent_same_key_misses_never_corrupt(self, tmp_path):
        script = MockScript().add_response("t", "stable answer")
        gw = mock_gateway(script, cache_dir=tmp_path)
        results = []

        def worker():
            results.append(gw.complete(request_for()).content)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == ["stable answer"] * 8
        # duplicate backend calls are allowed, corruption is not
        assert 1 <= script.total_calls <= 8
        assert len(list(tmp_path.glob("*.json"))) == 1
        assert gw.complete(request_for()).content == "stable answer"


class _StubHandler(BaseHTTPRequestHandler):
    behavior = "ok"
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.path, body, self.headers.get("Authorization")))
        if type(self).behavior == "flaky" and len(type(self).seen) == 1:
            self.send_response(500)
            self.end_headers()
            return
        if type(self).behavior == "malformed":
            payload = {"unexpected": True}
        else:
            payload = {
                "choices": [
                    {
                        "message": {"content": "REASONING:\nok\n\nLABEL: 1"},
                        "logprobs": {
                            "content": [
                                {"top_logprobs": [{"token": "4", "logprob": -0.5}]}
                            ]
                        },
                    }
                ]
            }
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.seen = []
    _StubHandler.behavior = "ok"
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestHttpBackend:
    def test_wire_protocol(self, stub_server, monkeypatch):
        monkeypatch.setenv("RULEBOOK_API_KEY", "sk-test")
        backend = HttpBackend(stub_server)
        response = backend.send(
            ChatRequest(
                model="live-model",
                messages=(("system", "sys"), ("user", "usr")),
                temperature=0.25,
                want_top_logprobs=5,
            )
        )
        assert response.content == "REASONING:\nok\n\nLABEL: 1"
        assert response.top_logprobs is not None
        token, prob = response.top_logprobs[0][0]
        assert token == "4" and prob == pytest.approx(0.6065, abs=1e-3)
        path, body, auth = _StubHandler.seen[0]
        assert path == "/chat/completions"
        assert body["model"] == "live-model"
        assert body["messages"][0] == {"role": "system", "content": "sys"}
        assert body["temperature"] == 0.25
        assert body["top_logprobs"] == 5
        assert auth == "Bearer sk-test"

    def test_server_error_retried_by_gateway(self, stub_server):
        _StubHandler.behavior = "flaky"
        gw = Gateway(HttpBackend(stub_server), retries=3, backoff=0.0)
        response = gw.complete(request_for())
        assert "LABEL" in response.content

    def test_malformed_payload_is_protocol_error(self, stub_server):
        _StubHandler.behavior = "malformed"
        backend = HttpBackend(stub_server)
        with pytest.raises(ProtocolError):
            backend.send(request_for())
