from __future__ import annotations

import base64
import io
import json
import struct
import subprocess
import sys

import pytest

from refscorer.framing import FrameError, read_frame, write_frame
from refscorer.models import EchoModel, IntensityRuleModel, LoadedModel
from refscorer.server import serve

PATCH_BYTES = 128 * 128 * 3

HELLO = {"type": "hello", "protocol": 1, "patch_size": 128, "channels": 3}


def frame(obj) -> bytes:
    payload = json.dumps(obj).encode()
    return struct.pack(">I", len(payload)) + payload


def b64_patch(value: int, n: int = PATCH_BYTES) -> str:
    return base64.b64encode(bytes([value]) * n).decode()


def run_serve(*messages, model=None) -> tuple[int, list[dict]]:
    stdin = io.BytesIO(b"".join(frame(m) for m in messages))
    stdout = io.BytesIO()
    code = serve(stdin, stdout, model or IntensityRuleModel())
    stdout.seek(0)
    replies = []
    while True:
        try:
            msg = read_frame(stdout)
        except FrameError:
            break
        if msg is None:
            break
        replies.append(msg)
    return code, replies


class TestHandshake:
    def test_hello_ready(self):
        code, replies = run_serve(HELLO, {"type": "bye"})
        assert code == 0
        assert replies[0] == {"type": "ready", "name": "intensity-rule", "classes": 2}

    def test_wrong_protocol_version(self):
        code, replies = run_serve({"type": "hello", "protocol": 99, "patch_size": 128, "channels": 3})
        assert code == 2
        assert replies[0]["type"] == "error"

    def test_wrong_first_message(self):
        code, replies = run_serve({"type": "score", "id": 0, "patches": []})
        assert code == 2
        assert replies[0]["type"] == "error"


class TestScoring:
    def test_intensity_black_patch(self):
        code, replies = run_serve(
            HELLO,
            {"type": "score", "id": 0, "patches": [b64_patch(0)]},
            {"type": "bye"},
        )
        assert code == 0
        assert replies[1] == {"type": "probs", "id": 0, "probs": [[0.0, 1.0]]}

    def test_intensity_white_patch(self):
        _, replies = run_serve(HELLO, {"type": "score", "id": 3, "patches": [b64_patch(255)]}, {"type": "bye"})
        assert replies[1]["probs"] == [[1.0, 0.0]]

    def test_ids_echoed_per_batch(self):
        msgs = [HELLO]
        for i in range(3):
            msgs.append({"type": "score", "id": 10 + i, "patches": [b64_patch(51)]})
        msgs.append({"type": "bye"})
        code, replies = run_serve(*msgs)
        assert code == 0
        assert [r["id"] for r in replies[1:]] == [10, 11, 12]
        assert replies[1]["probs"][0] == [0.2, 0.8]

    def test_batch_sizes_preserved(self):
        for n in (1, 32, 100):
            _, replies = run_serve(
                HELLO, {"type": "score", "id": 1, "patches": [b64_patch(7)] * n}, {"type": "bye"}
            )
            assert len(replies[1]["probs"]) == n

    def test_wrong_patch_length_rejected_before_scoring(self):
        code, replies = run_serve(
            HELLO, {"type": "score", "id": 5, "patches": [b64_patch(0, n=100)]}
        )
        assert code == 2
        assert "expected 49152" in replies[1]["message"]

    def test_invalid_base64(self):
        code, replies = run_serve(HELLO, {"type": "score", "id": 6, "patches": ["@@@not-base64@@@"]})
        assert code == 2
        assert replies[1]["type"] == "error"

    def test_empty_batch_rejected(self):
        code, replies = run_serve(HELLO, {"type": "score", "id": 7, "patches": []})
        assert code == 2


class TestShutdown:
    def test_bye_exits_zero(self):
        code, _ = run_serve(HELLO, {"type": "bye"})
        assert code == 0

    def test_eof_exits_zero(self):
        code, _ = run_serve(HELLO)
        assert code == 0


class TestFraming:
    def test_malformed_frame_error_then_exit_2(self):
        stdin = io.BytesIO(frame(HELLO) + struct.pack(">I", 5) + b"}}}}}")
        stdout = io.BytesIO()
        code = serve(stdin, stdout, IntensityRuleModel())
        assert code == 2
        stdout.seek(0)
        read_frame(stdout)  # ready
        err = read_frame(stdout)
        assert err["type"] == "error"

    def test_oversized_frame_rejected(self):
        stdin = io.BytesIO(frame(HELLO) + struct.pack(">I", 65 * 1024 * 1024))
        stdout = io.BytesIO()
        code = serve(stdin, stdout, IntensityRuleModel())
        assert code == 2
        stdout.seek(0)
        read_frame(stdout)
        assert read_frame(stdout)["type"] == "error"

    def test_truncated_frame(self):
        stdin = io.BytesIO(frame(HELLO) + struct.pack(">I", 100) + b"short")
        stdout = io.BytesIO()
        assert serve(stdin, stdout, IntensityRuleModel()) == 2


class TestModels:
    def test_echo_fixture_lookup(self, tmp_path):
        import hashlib

        raw = bytes([9]) * PATCH_BYTES
        digest = hashlib.sha256(raw).hexdigest()
        fixture = tmp_path / "fixture.json"
        fixture.write_text(json.dumps({"default": [0.5, 0.5], "entries": {digest: [0.25, 0.75]}}))
        model = EchoModel(fixture)
        assert model.score(raw) == [0.25, 0.75]
        assert model.score(bytes([1]) * PATCH_BYTES) == [0.5, 0.5]

    def test_loaded_model(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"kind": "linear-intensity", "weight": -8.0, "bias": 4.0}))
        model = LoadedModel(path)
        dark = model.score(bytes([0]) * 300)
        light = model.score(bytes([255]) * 300)
        assert dark[1] > 0.9 > 0.1 > light[1]
        assert abs(sum(dark) - 1.0) < 1e-12

    def test_loaded_model_bad_kind(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"kind": "transformer", "weight": 1, "bias": 0}))
        with pytest.raises(ValueError):
            LoadedModel(path)


class TestSubprocess:
    def test_full_session_over_real_pipes(self):
        proc = subprocess.Popen(
            [sys.executable, "-m", "refscorer", "intensity"],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )
        try:
            write_frame(proc.stdin, HELLO)
            ready = read_frame(proc.stdout)
            assert ready == {"type": "ready", "name": "intensity-rule", "classes": 2}
            write_frame(proc.stdin, {"type": "score", "id": 0, "patches": [b64_patch(51)] * 4})
            reply = read_frame(proc.stdout)
            assert reply["id"] == 0 and reply["probs"] == [[0.2, 0.8]] * 4
            write_frame(proc.stdin, {"type": "bye"})
            assert proc.wait(timeout=10) == 0
        finally:
            if proc.poll() is None:
                proc.kill()

    def test_usage_error(self):
        out = subprocess.run(
            [sys.executable, "-m", "refscorer", "echo"], capture_output=True, text=True
        )
        assert out.returncode != 0
