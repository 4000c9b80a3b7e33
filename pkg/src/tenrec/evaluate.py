"""Recovery metrics and mask generation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Array, ObservationMask, as_tensor


def _support_bool(x: Array, support) -> Array:
    if support is None:
        return np.ones(x.shape, dtype=bool)
    if isinstance(support, ObservationMask):
        return support.bool_mask(x.shape)
    arr = np.asarray(support)
    if arr.dtype != bool or arr.shape != x.shape:
        raise ValueError("support must be None, an ObservationMask, or a boolean array")
    return arr


def fit(x: Array, xtilde: Array, support=None) -> float:
    """1 - ||x - xtilde|| / ||x||, restricted to ``support`` (1 is perfect)."""
    x = as_tensor(x, "reference")
    xtilde = as_tensor(xtilde, "estimate")
    if x.shape != xtilde.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xtilde.shape}")
    sel = _support_bool(x, support)
    ref = np.linalg.norm(x[sel])
    if ref == 0.0:
        raise ValueError("reference tensor has zero norm on the requested support")
    return 1.0 - float(np.linalg.norm((x - xtilde)[sel])) / float(ref)


def rse(x: Array, xtilde: Array, support=None) -> float:
    """Root mean squared entrywise error over ``support``."""
    x = as_tensor(x, "reference")
    xtilde = as_tensor(xtilde, "estimate")
    if x.shape != xtilde.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xtilde.shape}")
    sel = _support_bool(x, support)
    n = int(sel.sum())
    if n == 0:
        raise ValueError("empty support")
    return float(np.linalg.norm((x - xtilde)[sel])) / np.sqrt(n)


@dataclass
class EvalReport:
    fit: float
    rse: float
    n_observed: int
    n_missing: int
    wall_time: float = 0.0
    iters: int = 0

    def lines(self) -> list[str]:
        return [
            f"fit={self.fit:.6f}",
            f"rse={self.rse:.6f}",
            f"n_observed={self.n_observed}",
            f"n_missing={self.n_missing}",
            f"wall_time={self.wall_time:.3f}",
            f"iters={self.iters}",
        ]


def mask_random(dims, observe_rate: float, seed: int) -> ObservationMask:
    """Uniform sample (without replacement) of ceil(rate * n_cells) cells."""
    if not 0.0 < observe_rate <= 1.0:
        raise ValueError(f"observe rate must lie in (0, 1], got {observe_rate}")
    dims = tuple(int(d) for d in dims)
    total = int(np.prod(dims, dtype=np.int64))
    count = int(np.ceil(observe_rate * total))
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=count, replace=False)
    flat.sort()
    idx = np.stack(np.unravel_index(flat, dims), axis=1).astype(np.int64)
    return ObservationMask(idx)
