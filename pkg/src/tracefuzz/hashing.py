"""Stable seeded hashing shared by prompt synthesis, the simulator, and fingerprints.

Everything that must reproduce across processes and machines routes through
these helpers.  The builtin ``hash()`` is process-salted and must never be
used for anything that ends up in a trace, a token stream, or a fingerprint.
"""

from __future__ import annotations

import hashlib
import json
import struct

_U64 = (1 << 64) - 1


def stable_u64(*parts: object) -> int:
    """Collision-resistant 64-bit digest of a heterogeneous tuple.

    Parts are length- and type-prefixed before hashing so that e.g.
    ("ab", "c") and ("a", "bc") cannot collide.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool):  # bool is an int subclass; check first
            body = b"\x01" if part else b"\x00"
            tag = b"b"
        elif isinstance(part, int):
            body = part.to_bytes(17, "little", signed=True)
            tag = b"i"
        elif isinstance(part, str):
            body = part.encode("utf-8")
            tag = b"s"
        elif isinstance(part, bytes):
            body = part
            tag = b"y"
        elif isinstance(part, float):
            body = struct.pack("<d", part)
            tag = b"f"
        elif part is None:
            body = b""
            tag = b"n"
        else:
            raise TypeError(f"unhashable part type: {type(part)!r}")
        h.update(tag)
        h.update(struct.pack("<I", len(body)))
        h.update(body)
    return int.from_bytes(h.digest(), "little") & _U64


def stable_unit(*parts: object) -> float:
    """Deterministic float in [0, 1) derived from the parts."""
    return stable_u64(*parts) / float(1 << 64)


def chain_digest(digest: int, token: int) -> int:
    """Advance a rolling context digest by one token (avalanche on any change)."""
    return stable_u64("ctx", digest, token)


def canonical_json(obj: object) -> str:
    """Canonical single-line JSON used for fingerprints and stored documents."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def fingerprint(kind: str, signature: dict) -> str:
    """Stable short hex fingerprint over a kind plus normalized evidence."""
    payload = canonical_json({"kind": kind, "signature": signature})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
