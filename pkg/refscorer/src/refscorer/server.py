"""Stop-and-wait request loop: handshake, score batches, exit 0 on bye.

Malformed frames or protocol violations produce one `error` frame and exit code 2.
"""

from __future__ import annotations

import argparse
import base64
import binascii
import sys
from typing import BinaryIO

from refscorer import PROTOCOL_VERSION
from refscorer.framing import FrameError, read_frame, write_frame
from refscorer.models import EchoModel, IntensityRuleModel, LoadedModel


class ProtocolViolation(Exception):
    def __init__(self, message: str, msg_id: int = -1):
        super().__init__(message)
        self.msg_id = msg_id


def _handshake(stdin: BinaryIO, stdout: BinaryIO, model) -> int:
    hello = read_frame(stdin)
    if hello is None:
        raise ProtocolViolation("stream closed before hello")
    if hello.get("type") != "hello":
        raise ProtocolViolation(f"expected hello, got {hello.get('type')!r}")
    if hello.get("protocol") != PROTOCOL_VERSION:
        raise ProtocolViolation(f"unsupported protocol version {hello.get('protocol')!r}")
    patch_size = int(hello.get("patch_size", 0))
    channels = int(hello.get("channels", 0))
    if patch_size < 1 or channels < 1:
        raise ProtocolViolation(f"bad patch geometry {patch_size}x{patch_size}x{channels}")
    write_frame(stdout, {"type": "ready", "name": model.name, "classes": 2})
    return patch_size * patch_size * channels


def _score_request(msg: dict, patch_bytes: int, model) -> dict:
    msg_id = msg.get("id")
    if not isinstance(msg_id, int):
        raise ProtocolViolation("score request without integer id")
    patches = msg.get("patches")
    if not isinstance(patches, list) or not patches:
        raise ProtocolViolation("score request without patches", msg_id)
    probs = []
    for k, b64 in enumerate(patches):
        try:
            raw = base64.b64decode(b64, validate=True)
        except (binascii.Error, TypeError) as exc:
            raise ProtocolViolation(f"patch {k} is not valid base64: {exc}", msg_id) from exc
        if len(raw) != patch_bytes:
            raise ProtocolViolation(
                f"patch {k} has {len(raw)} bytes, expected {patch_bytes}", msg_id
            )
        probs.append(model.score(raw))
    return {"type": "probs", "id": msg_id, "probs": probs}


def serve(stdin: BinaryIO, stdout: BinaryIO, model) -> int:
    """Run the request loop until bye (exit 0) or a protocol violation (exit 2)."""
    try:
        patch_bytes = _handshake(stdin, stdout, model)
        while True:
            msg = read_frame(stdin)
            if msg is None or msg.get("type") == "bye":
                return 0
            if msg.get("type") != "score":
                raise ProtocolViolation(f"unexpected message type {msg.get('type')!r}")
            write_frame(stdout, _score_request(msg, patch_bytes, model))
    except FrameError as exc:
        write_frame(stdout, {"type": "error", "id": -1, "message": str(exc)})
        return 2
    except ProtocolViolation as exc:
        write_frame(stdout, {"type": "error", "id": exc.msg_id, "message": str(exc)})
        return 2


def build_model(args) -> object:
    if args.model == "intensity":
        return IntensityRuleModel()
    if args.model == "echo":
        if not args.fixture:
            raise SystemExit("echo model needs --fixture")
        return EchoModel(args.fixture)
    if not args.path:
        raise SystemExit("loaded model needs --path")
    return LoadedModel(args.path)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="refscorer", description=__doc__)
    parser.add_argument("model", choices=["intensity", "echo", "loaded"])
    parser.add_argument("--fixture", help="fixture table for the echo model")
    parser.add_argument("--path", help="serialized model for the loaded model")
    args = parser.parse_args(argv)
    model = build_model(args)
    return serve(sys.stdin.buffer, sys.stdout.buffer, model)


if __name__ == "__main__":
    sys.exit(main())
