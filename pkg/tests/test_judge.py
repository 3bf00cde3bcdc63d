import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from safemerge.errors import JudgeError, UnparseableVerdictError
from safemerge.judge import (
    JudgeConfig,
    classify_harmfulness,
    label_records,
    parse_verdict,
)
from safemerge.metrics import EvalRecord, attack_success_rate


class ScriptedJudge:
    """Mock chat-completions endpoint replaying a scripted response list.

    Script entries are either an int (HTTP error status) or a string
    (the assistant message content of a 200 reply).
    """

    def __init__(self, script):
        self.script = list(script)
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                outer.requests.append((self.path, body))
                step = outer.script.pop(0) if outer.script else "safe"
                if isinstance(step, int):
                    self.send_response(step)
                    self.end_headers()
                    return
                payload = {"choices": [{"message": {"content": step}}]}
                data = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def judge_factory():
    servers = []

    def make(script):
        server = ScriptedJudge(script)
        servers.append(server)
        return server

    yield make
    for server in servers:
        server.stop()


def config(url, **kw):
    defaults = dict(base_url=url, model_name="guard", max_retries=3,
                    backoff_base=0.01, timeout=5.0, max_concurrency=1)
    defaults.update(kw)
    return JudgeConfig(**defaults)


class TestVerdictParsing:
    def test_safe(self):
        label = parse_verdict("safe")
        assert (label.verdict, label.category) == ("safe", None)

    def test_unsafe_with_category(self):
        label = parse_verdict("unsafe\nS9")
        assert (label.verdict, label.category) == ("unsafe", "S9")

    def test_garbage_is_loud(self):
        with pytest.raises(UnparseableVerdictError) as err:
            parse_verdict("maybe")
        assert err.value.raw == "maybe"


class TestClassify:
    def test_safe_roundtrip(self, judge_factory):
        server = judge_factory(["safe"])
        label = classify_harmfulness("p", "r", config(server.url))
        assert label.verdict == "safe"
        path, body = server.requests[0]
        assert path == "/v1/chat/completions"
        assert body["temperature"] == 0
        assert body["model"] == "guard"
        assert "p" in body["messages"][0]["content"]

    def test_unsafe_category(self, judge_factory):
        server = judge_factory(["unsafe\nS9"])
        label = classify_harmfulness("p", "r", config(server.url))
        assert (label.verdict, label.category) == ("unsafe", "S9")

    def test_retry_on_429_then_success(self, judge_factory):
        server = judge_factory([429, "safe"])
        label = classify_harmfulness("p", "r", config(server.url))
        assert label.verdict == "safe"
        assert len(server.requests) == 2

    def test_gives_up_after_retries(self, judge_factory):
        server = judge_factory([500, 500, 500, 500, 500])
        with pytest.raises(JudgeError, match="attempts"):
            classify_harmfulness("p", "r", config(server.url, max_retries=2))
        assert len(server.requests) == 3

    def test_non_transient_http_error(self, judge_factory):
        server = judge_factory([404])
        with pytest.raises(JudgeError, match="404"):
            classify_harmfulness("p", "r", config(server.url))
        assert len(server.requests) == 1


def records(n):
    return [EvalRecord(id=f"r{i}", prompt=f"q{i}", response=f"a{i}",
                       benchmark="b", modality="text_only") for i in range(n)]


class TestLabelRecords:
    def test_labels_feed_asr(self, judge_factory, tmp_path):
        server = judge_factory(["safe", "unsafe\nS1", "safe"])
        out = label_records(records(3), config(server.url),
                            cache_path=tmp_path / "cache.jsonl")
        assert [r.label for r in out] == ["safe", "unsafe", "safe"]
        assert attack_success_rate(out) == pytest.approx(100 / 3)

    def test_rerun_hits_only_cache(self, judge_factory, tmp_path):
        server = judge_factory(["safe", "unsafe\nS1", "safe"])
        cache = tmp_path / "cache.jsonl"
        cfg = config(server.url)
        first = label_records(records(3), cfg, cache_path=cache)
        calls_after_first = len(server.requests)
        second = label_records(records(3), cfg, cache_path=cache)
        assert len(server.requests) == calls_after_first
        assert [r.label for r in second] == [r.label for r in first]

    def test_partial_failure_preserves_progress(self, judge_factory, tmp_path):
        # record r1 draws the garbage verdict; r0 and r2 must land in the cache
        server = judge_factory(["safe", "maybe", "safe"])
        cache = tmp_path / "cache.jsonl"
        with pytest.raises(JudgeError, match="r1"):
            label_records(records(3), config(server.url), cache_path=cache)
        cached_ids = {json.loads(line)["id"] for line in cache.read_text().splitlines()}
        assert cached_ids == {"r0", "r2"}
        # rerun only re-asks for the failed record
        server.script.extend(["unsafe\nS2"])
        before = len(server.requests)
        out = label_records(records(3), config(server.url), cache_path=cache)
        assert len(server.requests) == before + 1
        assert [r.label for r in out] == ["safe", "unsafe", "safe"]

    def test_prelabeled_records_skip_network(self, judge_factory, tmp_path):
        server = judge_factory([])
        recs = records(2)
        recs[0].label = "safe"
        recs[1].label = "unsafe"
        out = label_records(recs, config(server.url), cache_path=tmp_path / "c.jsonl")
        assert len(server.requests) == 0
        assert [r.label for r in out] == ["safe", "unsafe"]

    def test_no_secret_in_cache(self, judge_factory, tmp_path, monkeypatch):
        monkeypatch.setenv("JUDGE_API_KEY", "hunter2-secret")
        server = judge_factory(["safe"])
        cache = tmp_path / "cache.jsonl"
        label_records(records(1), config(server.url), cache_path=cache)
        assert "hunter2-secret" not in cache.read_text()
