"""Canonical byte encoding for signed payloads and ledger transactions.

Integers are little-endian and fixed width; sequences are length-prefixed.
The encoding is stable across runs so signatures and per-byte charging (if
ever enabled) are well defined.
"""

from __future__ import annotations

import struct

from bmsim.errors import InvalidInputError

_TAG_NONE = b"\x00"
_TAG_BOOL = b"\x01"
_TAG_INT = b"\x02"
_TAG_FLOAT = b"\x03"
_TAG_STR = b"\x04"
_TAG_BYTES = b"\x05"
_TAG_SEQ = b"\x06"


def encode(value) -> bytes:
    """Encode None, bool, int, float, str, bytes and (nested) sequences."""
    if value is None:
        return _TAG_NONE
    if isinstance(value, bool):
        return _TAG_BOOL + (b"\x01" if value else b"\x00")
    if isinstance(value, int):
        return _TAG_INT + struct.pack("<q", value)
    if isinstance(value, float):
        return _TAG_FLOAT + struct.pack("<d", value)
    if isinstance(value, str):
        raw = value.encode("utf-8")
        return _TAG_STR + struct.pack("<I", len(raw)) + raw
    if isinstance(value, bytes):
        return _TAG_BYTES + struct.pack("<I", len(value)) + value
    if isinstance(value, (tuple, list)):
        parts = [encode(item) for item in value]
        return _TAG_SEQ + struct.pack("<I", len(parts)) + b"".join(parts)
    raise InvalidInputError(f"cannot canonically encode {type(value).__name__}")
