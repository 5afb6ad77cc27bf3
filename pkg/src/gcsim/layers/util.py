"""Small helpers shared by protocol layers."""

from __future__ import annotations

import base64
import json


def pack_obj(obj) -> bytes:
    """Deterministic JSON encoding for layer headers and control bodies."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def unpack_obj(b: bytes):
    return json.loads(b.decode())


def b64(b: bytes) -> str:
    return base64.b64encode(b).decode()


def unb64(s: str) -> bytes:
    return base64.b64decode(s.encode())
