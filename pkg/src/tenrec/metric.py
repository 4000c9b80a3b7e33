"""Per-mode Mahalanobis metrics on dense tensors.

A metric family is one square matrix per mode; the squared distance between
two tensors is the squared Frobenius norm of their difference after pushing
it through every mode matrix.  The same value can be written as a trace of
matricized quantities against a Kronecker composite, which gives a second,
independent evaluation route used for cross-checking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Array,
    as_matrix,
    as_tensor,
    frobenius_norm,
    kron_composite,
    mode_product,
    multi_mode_product,
    unfold,
)

PSD_EIG_TOL = -1e-10


@dataclass
class MetricFamily:
    """One mode matrix per tensor mode.

    ``pseudo`` is True when the family came from rank-deficient (or wide)
    factors; such a family satisfies the triangle inequality but two distinct
    tensors can be at distance zero.
    """

    mats: list[Array]
    pseudo: bool = False

    def __post_init__(self):
        self.mats = [as_matrix(m, f"mode matrix {k}") for k, m in enumerate(self.mats)]

    @property
    def order(self) -> int:
        return len(self.mats)

    def check_shapes(self, dims) -> None:
        dims = tuple(int(d) for d in dims)
        if self.order != len(dims):
            raise ValueError(f"metric has {self.order} mode matrices, tensor has {len(dims)} modes")
        for k, m in enumerate(self.mats):
            if m.shape[1] != dims[k]:
                raise ValueError(
                    f"mode matrix {k} has {m.shape[1]} columns, mode size is {dims[k]}"
                )

    def transform(self, x: Array) -> Array:
        """Apply every mode matrix to ``x``."""
        self.check_shapes(np.asarray(x).shape)
        return multi_mode_product(x, self.mats)

    @classmethod
    def identity(cls, dims) -> "MetricFamily":
        return cls([np.eye(int(d)) for d in dims])


@dataclass
class SimilarityMatrices:
    """One symmetric PSD matrix per mode carrying side information."""

    mats: list[Array]

    def __post_init__(self):
        self.mats = [as_matrix(m, f"similarity {k}") for k, m in enumerate(self.mats)]
        for k, m in enumerate(self.mats):
            if m.shape[0] != m.shape[1]:
                raise ValueError(f"similarity {k} must be square, got {m.shape}")
            if np.max(np.abs(m - m.T)) > 1e-12 * max(1.0, np.max(np.abs(m))):
                raise ValueError(f"similarity {k} is not symmetric")
            w = np.linalg.eigvalsh(0.5 * (m + m.T))
            if w.min() < PSD_EIG_TOL:
                raise ValueError(
                    f"similarity {k} is not positive semidefinite "
                    f"(min eigenvalue {w.min():.3e})"
                )

    @property
    def order(self) -> int:
        return len(self.mats)


def mahalanobis_distance(xi: Array, xj: Array, metric: MetricFamily) -> float:
    """Squared distance: push the difference through the family, take ||.||_F^2."""
    xi = as_tensor(xi, "xi")
    xj = as_tensor(xj, "xj")
    if xi.shape != xj.shape:
        raise ValueError(f"shape mismatch: {xi.shape} vs {xj.shape}")
    return frobenius_norm(metric.transform(xi - xj)) ** 2


def mahalanobis_via_trace(xi: Array, xj: Array, metric: MetricFamily, mode: int) -> float:
    """Trace form of the squared distance, evaluated through ``mode``.

    Tr(Lhat_m D_(m) W D_(m)^T) with Lhat_k the Gram matrix of mode matrix k
    and W the Kronecker composite of the remaining Lhat_k in descending
    order.  Equals :func:`mahalanobis_distance` for every mode choice.
    """
    xi = as_tensor(xi, "xi")
    xj = as_tensor(xj, "xj")
    if xi.shape != xj.shape:
        raise ValueError(f"shape mismatch: {xi.shape} vs {xj.shape}")
    metric.check_shapes(xi.shape)
    if not 0 <= mode < xi.ndim:
        raise ValueError(f"mode {mode} out of range")
    grams = [m.T @ m for m in metric.mats]
    d = unfold(xi - xj, mode)
    w = kron_composite(grams, skip=mode)
    return float(np.trace(grams[mode] @ d @ w @ d.T))


def metric_from_factors(factors) -> MetricFamily:
    """Gram-matrix family: mode matrix k is ``F_k.T @ F_k``.

    Each input maps the mode space through its columns, so a factor with
    fewer rows than columns yields a rank-deficient matrix and the family is
    flagged as a pseudo-metric.
    """
    factors = [as_matrix(f, f"factor {k}") for k, f in enumerate(factors)]
    mats = [f.T @ f for f in factors]
    mats = [0.5 * (m + m.T) for m in mats]
    pseudo = any(f.shape[0] < f.shape[1] for f in factors)
    return MetricFamily(mats=mats, pseudo=pseudo)


def build_similarity(x: Array, mode: int, bandwidth: float | None = None) -> Array:
    """Gaussian-kernel similarity of the mode slices of ``x``.

    S[i, j] = exp(-d_ij^2 / bandwidth) with d_ij the Euclidean distance
    between slices i and j along ``mode`` (missing entries should already be
    zero-filled).  ``bandwidth=None`` uses the median of the nonzero squared
    distances, falling back to 1.0 when all slices coincide.  The result is
    symmetric PSD with unit diagonal.
    """
    x = as_tensor(x)
    rows = unfold(x, mode)
    sq = np.sum(rows**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (rows @ rows.T)
    np.maximum(d2, 0.0, out=d2)
    d2 = 0.5 * (d2 + d2.T)
    if bandwidth is None:
        off = d2[~np.eye(d2.shape[0], dtype=bool)]
        med = float(np.median(off)) if off.size else 0.0
        bandwidth = med if med > 0 else 1.0
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    s = np.exp(-d2 / bandwidth)
    return 0.5 * (s + s.T)


def psd_floor(mat: Array, floor: float = 0.0) -> Array:
    """Clip the eigenvalues of a symmetric matrix from below."""
    mat = as_matrix(mat)
    if mat.shape[0] != mat.shape[1]:
        raise ValueError(f"psd_floor needs a square matrix, got {mat.shape}")
    if np.max(np.abs(mat - mat.T)) > 1e-8 * max(1.0, np.max(np.abs(mat))):
        raise ValueError("psd_floor needs a symmetric matrix")
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    w = np.maximum(w, floor)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)
