"""Canonical JSON and base64 helpers.

Canonical form: UTF-8, sorted keys, compact separators, no NaN/Infinity.
Two parties serializing the same logical value must produce identical bytes,
since signatures and AEAD associated data are computed over these encodings.
"""

from __future__ import annotations

import base64
import json
from typing import Any


def canonical_json_bytes(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def canonical_json_str(obj: Any) -> str:
    return canonical_json_bytes(obj).decode("utf-8")


def from_json_bytes(data: bytes) -> Any:
    return json.loads(data.decode("utf-8"))


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)
