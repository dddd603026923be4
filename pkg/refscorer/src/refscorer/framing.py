"""Frame IO: 4-byte big-endian length prefix + UTF-8 JSON payload."""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

MAX_FRAME_BYTES = 64 * 1024 * 1024


class FrameError(Exception):
    """Malformed or oversized frame."""


def read_frame(stream: BinaryIO) -> dict | None:
    """Next frame as a dict, or None on clean EOF at a frame boundary."""
    header = stream.read(4)
    if len(header) == 0:
        return None
    if len(header) < 4:
        raise FrameError("truncated frame header")
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {length} bytes exceeds the 64 MiB limit")
    payload = stream.read(length)
    if len(payload) < length:
        raise FrameError(f"truncated frame: expected {length} bytes, got {len(payload)}")
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"frame is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise FrameError("frame payload must be a JSON object")
    return obj


def write_frame(stream: BinaryIO, obj: dict) -> None:
    payload = json.dumps(obj).encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {len(payload)} bytes exceeds the 64 MiB limit")
    stream.write(struct.pack(">I", len(payload)) + payload)
    stream.flush()
