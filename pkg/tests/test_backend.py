import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from cotseg.backend import (
    CREDENTIALS_ENV,
    BackendDescriptor,
    GenerationResult,
    RecordingBackend,
    RemoteBackend,
    ScriptedBackend,
    SequenceBackend,
    mock_result,
    request_digest,
    slice_embeddings,
)
from cotseg.errors import BackendError, InvalidSpanError, ScriptMissError

IMAGE = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)


class EchoStub(BaseHTTPRequestHandler):
    """Echo the prompt's whitespace words back with a fixed embedding per word."""

    width = 4
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        EchoStub.seen.append((dict(self.headers), body))
        text = "echo " + body["prompt"].split()[-1]
        tokens, pos = [], 0
        for w in text.split(" "):
            tokens.append([w, pos, pos + len(w)])
            pos += len(w) + 1
        emb = np.array([[i] * self.width for i in range(len(tokens))], dtype="<f4")
        payload = {
            "text": text,
            "tokens": tokens,
            "embeddings": {"shape": list(emb.shape), "data": base64.b64encode(emb.tobytes()).decode()},
        }
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub():
    EchoStub.seen = []
    server = HTTPServer(("127.0.0.1", 0), EchoStub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/generate"
    server.shutdown()


def test_remote_round_trip(stub, monkeypatch):
    monkeypatch.setenv(CREDENTIALS_ENV, "s3cret")
    backend = RemoteBackend(stub, embedding_width=4)
    result = backend.generate(IMAGE, "USER: hello there\nASSISTANT:", max_tokens=7)
    assert result.text == "echo ASSISTANT:"
    assert len(result) == len(result.text.split(" ")) == 2
    assert np.array_equal(result.embeddings[:, 0], [0.0, 1.0])
    headers, body = EchoStub.seen[0]
    assert headers["Authorization"] == "Bearer s3cret"
    assert body["max_tokens"] == 7 and body["layer"] == "final"
    assert base64.b64decode(body["image"])[:4] == b"\x89PNG"


def test_remote_width_mismatch_and_unreachable(stub):
    with pytest.raises(BackendError):
        RemoteBackend(stub, embedding_width=5).generate(IMAGE, "x")
    with pytest.raises(BackendError):
        RemoteBackend("http://127.0.0.1:9/none", 4, timeout_s=0.5).generate(IMAGE, "x")


def test_descriptor_connects_to_remote(tmp_path, stub):
    path = tmp_path / "backend.json"
    path.write_text(json.dumps({"endpoint": stub, "embedding_width": 4}))
    backend = BackendDescriptor.load(path).connect()
    assert isinstance(backend, RemoteBackend)
    assert backend.generate(IMAGE, "hi").text == "echo hi"


def test_scripted_replay_is_bit_exact(tmp_path):
    script = ScriptedBackend(embedding_width=8)
    script.add(IMAGE, "USER: q\nASSISTANT:", "It is the fire.")
    script.save(tmp_path / "s.json")
    replay = ScriptedBackend.from_file(tmp_path / "s.json")
    a = script.generate(IMAGE, "USER: q\nASSISTANT:")
    b = replay.generate(IMAGE, "USER: q\nASSISTANT:")
    assert a.text == b.text and a.tokens == b.tokens
    assert a.embeddings.tobytes() == b.embeddings.tobytes()
    assert [t for t, _, _ in a.tokens] == ["It", "is", "the", "fire", "."]
    assert (tmp_path / "s.json").read_bytes() == (replay.save(tmp_path / "t.json") or (tmp_path / "t.json").read_bytes())


def test_script_miss_names_nearest():
    script = ScriptedBackend()
    near = script.add(IMAGE, "USER: what is hot?\nASSISTANT:", "fire")
    script.add(np.zeros((2, 2, 3), np.uint8), "USER: what is hot?\nASSISTANT:", "other")
    with pytest.raises(ScriptMissError) as err:
        script.generate(IMAGE, "USER: what is warm?\nASSISTANT:")
    assert err.value.nearest == near
    assert err.value.digest == request_digest(IMAGE, "USER: what is warm?\nASSISTANT:")


def test_recording_produces_replayable_script():
    rec = RecordingBackend(SequenceBackend(["first answer", "second answer"], 4))
    outs = [rec.generate(IMAGE, h).text for h in ("h1", "h2")]
    assert [rec.script.generate(IMAGE, h).text for h in ("h1", "h2")] == outs
    with pytest.raises(BackendError):
        rec.generate(IMAGE, "h3")


def test_slice_embeddings_cases():
    r = mock_result("a b c d e f", 3)
    assert len(r) == 6
    assert np.array_equal(slice_embeddings(r, [(0, 6)]), r.embeddings)
    assert slice_embeddings(r, []).shape == (0, 3)
    assert np.array_equal(slice_embeddings(r, [(2, 4)]), r.embeddings[2:4])
    assert slice_embeddings(r, [(1, 2), (4, 6)]).shape == (3, 3)
    with pytest.raises(InvalidSpanError):
        slice_embeddings(r, [(5, 7)])
    with pytest.raises(InvalidSpanError):
        slice_embeddings(r, [(3, 2)])


def test_generation_result_invariants():
    with pytest.raises(ValueError):
        GenerationResult("ab", (("ab", 0, 2),), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        GenerationResult("ab", (("ab", 0, 3),), np.zeros((1, 4)))
    r = mock_result("x y", 4)
    with pytest.raises(ValueError):
        r.embeddings[0, 0] = 1.0
    joined = GenerationResult.concat([mock_result("ab", 2), mock_result("cd e", 2)])
    assert joined.text == "ab\ncd e"
    assert [joined.text[s:e] for _, s, e in joined.tokens] == ["ab", "cd", "e"]


def test_token_embeddings_are_unit_variance():
    r = mock_result(" ".join(f"w{i}" for i in range(400)), 64)
    assert abs(float(r.embeddings.var()) - 1.0) < 0.05
    assert np.array_equal(mock_result("w3", 64).embeddings[0], r.embeddings[3])
