"""Shared plumbing: deterministic seed splitting and round-trip float formatting."""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def split_seed(*parts) -> int:
    """Derive a 64-bit child seed from a master seed and a path of labels.

    The rule is `blake2b(encode(part_0) || encode(part_1) || ...)` truncated
    to 8 bytes, so child streams are stable across runs, platforms and worker
    scheduling.  Accepts ints, strings and floats.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool):
            raise TypeError("bool seed parts are ambiguous")
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            h.update(b"s" + part.encode("utf-8") + b"\x00")
        elif isinstance(part, float):
            h.update(b"f" + struct.pack("<d", part))
        else:
            raise TypeError(f"unsupported seed part type: {type(part)!r}")
    return int.from_bytes(h.digest(), "little")


def rng_from(*parts) -> np.random.Generator:
    """PCG64 generator seeded via split_seed."""
    return np.random.default_rng(split_seed(*parts))


def fmt17(x) -> str:
    """Format a float with 17 significant digits (exact round trip) for CSV output."""
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")
