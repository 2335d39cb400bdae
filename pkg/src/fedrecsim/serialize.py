"""Canonical serialization helpers.

Every wire payload and report in the simulator is serialized through
``canonical_json`` so that byte sizes, audit scans, and determinism checks
all operate on one well-defined byte form. Floats go through Python's
``repr`` (shortest exact decimal, round-trips bit-for-bit, and carries the
full precision of the value — never less than nine significant digits of
information).
"""

from __future__ import annotations

import json
import re

# Decimal literals with a fractional part or exponent; bare integers are
# ids/counts and are never treated as feature values.
FLOAT_LITERAL = re.compile(r"-?(?:\d+\.\d+(?:[eE][-+]?\d+)?|\d+[eE][-+]?\d+)")


def canonical_json(obj) -> bytes:
    """Serialize ``obj`` to the canonical byte form (sorted keys, no spaces).

    Non-finite floats are rejected: nothing non-finite may cross a module
    boundary in serialized form.
    """
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False
    ).encode("ascii")


def nine_sig(value: float) -> str:
    """Canonical 9-significant-digit form used by the privacy audit's
    exact-match scan."""
    return format(float(value), ".9g")


def scan_float_tokens(data: bytes) -> set[str]:
    """All decimal literals in ``data``, canonicalized to 9 significant digits."""
    text = data.decode("ascii", errors="replace")
    return {nine_sig(float(tok)) for tok in FLOAT_LITERAL.findall(text)}


def fmt_float(value: float) -> str:
    """Decimal form used in CSV output: exact shortest repr."""
    return repr(float(value))
