"""Length-prefixed JSON framing shared by the external scorer and detector protocols.

Frames are a 4-byte big-endian unsigned length followed by that many bytes of UTF-8
JSON. Frames above 64 MiB are rejected.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

from mitodet.errors import ProtocolError

MAX_FRAME_BYTES = 64 * 1024 * 1024


def write_frame(stream: BinaryIO, obj: dict) -> None:
    payload = json.dumps(obj, sort_keys=True).encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds the 64 MiB limit")
    stream.write(struct.pack(">I", len(payload)) + payload)
    stream.flush()


def read_frame(stream: BinaryIO) -> dict:
    header = stream.read(4)
    if len(header) == 0:
        raise ProtocolError("peer closed the stream")
    if len(header) < 4:
        raise ProtocolError("truncated frame header")
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds the 64 MiB limit")
    payload = stream.read(length)
    if len(payload) < length:
        raise ProtocolError(f"truncated frame: expected {length} bytes, got {len(payload)}")
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"frame is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame payload must be a JSON object")
    return obj
