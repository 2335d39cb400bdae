"""Shared numeric primitives."""

from __future__ import annotations

import numpy as np


def sigmoid(z):
    """Overflow-safe logistic function; accepts scalars or arrays."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out
