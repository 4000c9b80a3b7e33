"""Determinant-one coordinate normalization and metric-factor learning.

The normalization routine alternates over modes, replacing the coordinates
of each mode by the (det-normalized) inverse square root of the current
fiber second-moment matrix.  Each such step is the exact minimizer of the
squared norm over determinant-one matrices for that mode, so the objective
trace is non-increasing and any limit is a global minimum along each mode.

``dml_factors`` is the two-sided variant for a single matrix: it alternates
an exact mask-constrained minimization of the matrix entries with the same
det-normalized whitening updates for the two side factors, each regularized
by a similarity matrix.

Loop semantics: the objective is evaluated once on the inputs before any
sweep, and the loop runs while the relative improvement per sweep stays at
or above ``lam``.  The two-sided factor updates whiten against the other
side's transformed Gram matrix (``(M Ly')(M Ly')'`` for the left factor and
symmetrically for the right), which is the shape-consistent choice that
makes every update an exact block minimizer, so the recorded objective can
never increase.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg

from .core import Array, as_matrix, as_tensor, frobenius_norm, mode_product, unfold


class RankDeficiencyError(ValueError):
    """Covariance or whitening input is numerically singular."""


class ConditioningError(ValueError):
    """Inner matrix of an inverse square root is not positive definite."""


def _inv_sqrt(mat: Array, *, strict: bool, name: str) -> tuple[Array, Array]:
    """Inverse square root of a symmetric PSD matrix; returns (result, eigenvalues).

    strict=True raises on rank deficiency; otherwise eigenvalues are floored
    at 1e-12 * trace before inversion.
    """
    sym = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(sym)
    if strict:
        if w[-1] <= 0 or w[0] <= 1e-12 * w[-1]:
            raise RankDeficiencyError(
                f"{name}: deficient eigenvalue {w[0]:.6e} (largest {w[-1]:.6e})"
            )
        floored = w
    else:
        if w[0] < -1e-8 * max(abs(w[-1]), 1.0):
            raise ConditioningError(
                f"{name}: matrix is not positive semidefinite (min eigenvalue {w[0]:.6e})"
            )
        floor = 1e-12 * max(np.trace(sym), np.finfo(float).tiny)
        if floor <= 0:
            raise ConditioningError(f"{name}: matrix has nonpositive trace")
        floored = np.maximum(w, floor)
    inv = (v / np.sqrt(floored)) @ v.T
    return 0.5 * (inv + inv.T), floored


def _det_normalize(mat: Array, eigs: Array) -> Array:
    """Scale ``mat`` = f(eigs) so its determinant is one (log-space, stable)."""
    n = mat.shape[0]
    log_det = -0.5 * float(np.sum(np.log(eigs)))  # det of eigs^(-1/2)
    return mat * np.exp(-log_det / n)


def covariance_whitener(points) -> Array:
    """Inverse square root of the sample covariance of the rows of ``points``.

    The covariance is mean-centered with 1/m normalization.  Applying the
    result to the centered points gives a cloud with identity covariance.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two points, shaped (m, d)")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    inv, _ = _inv_sqrt(cov, strict=True, name="sample covariance")
    return inv


def _moment_whitener(fibers: Array, name: str) -> tuple[Array, Array]:
    """Det-one whitener of the (uncentered) second moment of the columns of ``fibers``."""
    moment = fibers @ fibers.T / fibers.shape[1]
    inv, eigs = _inv_sqrt(moment, strict=True, name=name)
    return _det_normalize(inv, eigs), moment


@dataclass
class CoordinateChangeResult:
    transforms: list[Array]
    normalized: list[Array]
    objective_trace: list[float] = field(default_factory=list)


def _joint_norm(tensors) -> float:
    return float(np.sqrt(sum(frobenius_norm(t) ** 2 for t in tensors)))


def normalize_coordinates(tensors, lam: float, max_iters: int = 100) -> CoordinateChangeResult:
    """Jointly minimize the norm of a tensor set over det-one mode transforms.

    Sweeps modes in order; each mode step applies the exact determinant-one
    minimizer (the det-normalized inverse square root of the mode's fiber
    second moment).  Stops when the relative improvement of a sweep drops
    below ``lam`` or after ``max_iters`` sweeps.
    """
    tensors = [as_tensor(t, f"tensor {i}") for i, t in enumerate(tensors)]
    if not tensors:
        raise ValueError("need at least one tensor")
    dims = tensors[0].shape
    if any(t.shape != dims for t in tensors):
        raise ValueError("all tensors must share the same shape")
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lam must lie in (0, 1), got {lam}")

    transforms = [np.eye(d) for d in dims]
    current = [t.copy() for t in tensors]
    trace = [_joint_norm(current)]
    for _ in range(max_iters):
        for mode in range(len(dims)):
            fibers = np.hstack([unfold(t, mode) for t in current])
            u, _ = _moment_whitener(fibers, f"mode {mode} second moment")
            current = [mode_product(t, u, mode) for t in current]
            transforms[mode] = u @ transforms[mode]
        trace.append(_joint_norm(current))
        prev, new = trace[-2], trace[-1]
        if prev <= 0 or 1.0 - new / prev < lam:
            break
    return CoordinateChangeResult(transforms=transforms, normalized=current, objective_trace=trace)


def stationarity_gaps(tensors) -> list[float]:
    """Per-mode distance of the fiber second moment from a multiple of identity.

    The maximum directional derivative of the squared-norm objective over
    unit-norm determinant-preserving (traceless) directions equals twice the
    norm of the traceless part of the moment; this returns that norm scaled
    by the moment's own norm, one value per mode.  Near zero at a minimum.
    """
    tensors = [as_tensor(t) for t in tensors]
    gaps = []
    for mode in range(tensors[0].ndim):
        fibers = np.hstack([unfold(t, mode) for t in tensors])
        moment = fibers @ fibers.T / fibers.shape[1]
        n = moment.shape[0]
        traceless = moment - (np.trace(moment) / n) * np.eye(n)
        denom = max(float(np.linalg.norm(moment)), np.finfo(float).tiny)
        gaps.append(float(np.linalg.norm(traceless)) / denom)
    return gaps


def whitening_factor(mat: Array, sim: Array, lam: float) -> Array:
    """Det-one minimizer of  ||L mat||^2 + lam * Tr(L sim L')  over det(L) = 1.

    Closed form: the det-normalized inverse square root of
    ``lam * sim + mat @ mat.T``.  Used to refresh one mode's metric factor
    from the current completion estimate and its similarity matrix.
    """
    inner = lam * sim + mat @ mat.T
    inv, eigs = _inv_sqrt(inner, strict=False, name="whitening inner matrix")
    return _det_normalize(inv, eigs)


@dataclass
class DmlResult:
    lx: Array
    ly: Array
    matrix: Array
    objective_trace: list[float]

    def __iter__(self):
        return iter((self.lx, self.ly))


def _min_masked_quadratic(a: Array, b: Array, fixed: Array, free: Array, tol: float = 1e-10) -> Array:
    """argmin_M Tr(a M b M') with M pinned to ``fixed`` outside ``free``.

    ``free`` is a boolean matrix of the unconstrained entries.  Solved from
    the normal equations (a M b restricted to the free entries must vanish);
    dense solve for small systems, conjugate gradient above that.
    """
    nfree = int(free.sum())
    if nfree == 0:
        return fixed.copy()
    rhs = -(a @ fixed @ b)[free]
    if nfree <= 2500:
        full = np.kron(a, b)  # C-order vec: vec(a M b) = kron(a, b) @ vec(M), b symmetric
        flat_free = free.ravel()
        system = full[np.ix_(flat_free, flat_free)]
        sol = np.linalg.solve(system, rhs)
    else:
        def apply(v):
            m = np.zeros_like(fixed)
            m[free] = v
            return (a @ m @ b)[free]

        op = scipy.sparse.linalg.LinearOperator((nfree, nfree), matvec=apply)
        sol, info = scipy.sparse.linalg.cg(op, rhs, rtol=tol, maxiter=10 * nfree)
        if info != 0:
            raise ConditioningError(f"masked quadratic solve did not converge (cg info={info})")
    out = fixed.copy()
    out[free] = sol
    return out


def dml_factors(
    m_xy: Array,
    s_xx: Array,
    s_yy: Array,
    mask,
    values,
    lambda_x: float,
    lambda_y: float,
    iters: int = 10,
) -> DmlResult:
    """Learn det-one metric factors for the two sides of a partially pinned matrix.

    Alternates: (a) fill the unpinned entries of the matrix with the exact
    minimizer of ||Lx M Ly'||^2, (b) replace Lx by the det-normalized inverse
    square root of  lambda_x * s_xx + (M Ly')(M Ly')',  and symmetrically for
    Ly.  Every step is an exact block minimizer of

        ||Lx M Ly'||^2 + lambda_x Tr(Lx s_xx Lx') + lambda_y Tr(Ly s_yy Ly')

    so ``objective_trace`` is non-increasing.
    """
    m_xy = as_matrix(m_xy, "m_xy")
    s_xx = as_matrix(s_xx, "s_xx")
    s_yy = as_matrix(s_yy, "s_yy")
    if lambda_x <= 0 or lambda_y <= 0:
        raise ValueError("regularization weights must be positive")
    nx, ny = m_xy.shape
    if s_xx.shape != (nx, nx) or s_yy.shape != (ny, ny):
        raise ValueError("similarity matrices must match the two matrix dimensions")

    pinned = np.zeros((nx, ny), dtype=bool)
    fixed = np.zeros((nx, ny))
    mask_idx = np.asarray(mask, dtype=np.int64).reshape(-1, 2) if len(mask) else np.zeros((0, 2), int)
    vals = np.asarray(values, dtype=np.float64).ravel()
    if mask_idx.shape[0] != vals.size:
        raise ValueError(f"{mask_idx.shape[0]} mask cells but {vals.size} values")
    if mask_idx.size:
        if mask_idx.min() < 0 or np.any(mask_idx >= np.array([nx, ny])):
            raise ValueError("mask indices out of bounds")
        pinned[mask_idx[:, 0], mask_idx[:, 1]] = True
        fixed[mask_idx[:, 0], mask_idx[:, 1]] = vals
    free = ~pinned

    lx = np.eye(nx)
    ly = np.eye(ny)
    m = fixed.copy()

    def objective(m_, lx_, ly_):
        fit = frobenius_norm(lx_ @ m_ @ ly_.T) ** 2
        reg = lambda_x * float(np.trace(lx_ @ s_xx @ lx_.T))
        reg += lambda_y * float(np.trace(ly_ @ s_yy @ ly_.T))
        return fit + reg

    trace = [objective(m, lx, ly)]
    for _ in range(iters):
        if free.any():
            m = _min_masked_quadratic(lx.T @ lx, ly.T @ ly, fixed, free)
        side = m @ ly.T
        inv, eigs = _inv_sqrt(lambda_x * s_xx + side @ side.T, strict=False, name="left factor")
        lx = _det_normalize(inv, eigs)
        side = m.T @ lx.T
        inv, eigs = _inv_sqrt(lambda_y * s_yy + side @ side.T, strict=False, name="right factor")
        ly = _det_normalize(inv, eigs)
        trace.append(objective(m, lx, ly))
    return DmlResult(lx=lx, ly=ly, matrix=m, objective_trace=trace)
