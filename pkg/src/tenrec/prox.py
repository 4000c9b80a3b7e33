"""Penalty terms and their proximal operators.

``prox(p, u, t)`` solves  argmin_v  J(v) + (t/2) ||v - u||^2  in closed form
for every shipped penalty.  All penalties are nonnegative, proper and lower
semi-continuous, so the solver's descent arguments apply to each of them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Array

KINDS = ("none", "l1", "l2_squared", "nuclear")


@dataclass(frozen=True)
class Penalty:
    kind: str = "none"
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}, expected one of {KINDS}")
        if self.weight < 0:
            raise ValueError(f"penalty weight must be >= 0, got {self.weight}")

    def value(self, point: Array) -> float:
        """Evaluate the penalty at a point (matrices are flattened except for nuclear)."""
        arr = np.asarray(point, dtype=np.float64)
        if self.kind == "none" or self.weight == 0.0:
            return 0.0
        if self.kind == "l1":
            return float(self.weight * np.sum(np.abs(arr)))
        if self.kind == "l2_squared":
            return float(self.weight * np.sum(arr**2))
        sv = np.linalg.svd(_as_2d(arr), compute_uv=False)
        return float(self.weight * np.sum(sv))


def _as_2d(arr: Array) -> Array:
    if arr.ndim == 2:
        return arr
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    # nuclear norm of a higher-way array acts on the mode-0 unfolding
    return arr.reshape(arr.shape[0], -1)


def _soft(u: Array, thr: float) -> Array:
    return np.sign(u) * np.maximum(np.abs(u) - thr, 0.0)


def prox(p: Penalty, point: Array, t: float) -> Array:
    """Proximal map of ``p`` at ``point`` with parameter ``t > 0``."""
    if t <= 0:
        raise ValueError(f"prox parameter t must be positive, got {t}")
    u = np.asarray(point, dtype=np.float64)
    if p.kind == "none" or p.weight == 0.0:
        return u.copy()
    if p.kind == "l1":
        return _soft(u, p.weight / t)
    if p.kind == "l2_squared":
        return u * (t / (t + 2.0 * p.weight))
    mat = _as_2d(u)
    w, s, vh = np.linalg.svd(mat, full_matrices=False)
    s = np.maximum(s - p.weight / t, 0.0)
    return ((w * s) @ vh).reshape(u.shape)
