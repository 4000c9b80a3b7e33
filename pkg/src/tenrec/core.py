"""Dense K-way tensor algebra.

Everything downstream (metrics, the solver, coupled factorization) is built
from the primitives here: matricization and its inverse, mode products,
Kronecker composites, Frobenius norms, Tucker reconstruction and HOSVD.

Matricization convention: ``unfold(x, mode)`` puts the mode index on rows.
The remaining indices are ordered so that smaller mode numbers vary fastest
along columns (larger modes vary slower).  Under this convention

    unfold(g x1 V1 ... xK VK, m) == Vm @ unfold(g, m) @ kron_composite(Vs, skip=m).T

with ``kron_composite`` taking the factors in descending mode order.

Modes are 0-based everywhere.  Arrays are treated as immutable once handed
to a container type; operations are pure functions of their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


def as_tensor(values, name: str = "tensor") -> Array:
    """Coerce to a float64 ndarray and validate the dense-tensor invariants."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim < 1:
        arr = arr.reshape(1)
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"{name}: every mode size must be >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: entries must be finite (found NaN or Inf)")
    return arr


def as_matrix(values, name: str = "matrix") -> Array:
    """Coerce to a 2-D float64 ndarray with finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: entries must be finite (found NaN or Inf)")
    return arr


def _check_mode(mode: int, ndim: int) -> None:
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for a {ndim}-way tensor")


def unfold(x: Array, mode: int) -> Array:
    """Mode matricization: rows index ``mode``, smaller remaining modes vary fastest."""
    x = np.asarray(x)
    _check_mode(mode, x.ndim)
    return np.reshape(np.moveaxis(x, mode, 0), (x.shape[mode], -1), order="F")


def fold(mat: Array, mode: int, dims) -> Array:
    """Inverse of :func:`unfold` for the given full shape."""
    dims = tuple(int(d) for d in dims)
    _check_mode(mode, len(dims))
    mat = np.asarray(mat)
    rest = [d for i, d in enumerate(dims) if i != mode]
    if mat.shape != (dims[mode], int(np.prod(rest, dtype=np.int64))):
        raise ValueError(
            f"cannot fold a {mat.shape} matrix along mode {mode} into shape {dims}"
        )
    return np.moveaxis(np.reshape(mat, (dims[mode], *rest), order="F"), 0, mode)


def mode_product(x: Array, mat: Array, mode: int) -> Array:
    """Multiply ``mat`` against ``x`` along ``mode`` (contracts mat columns)."""
    x = np.asarray(x)
    mat = np.asarray(mat)
    _check_mode(mode, x.ndim)
    if mat.ndim != 2 or mat.shape[1] != x.shape[mode]:
        raise ValueError(
            f"mode_product: matrix {mat.shape} does not match mode {mode} "
            f"of tensor shape {x.shape}"
        )
    moved = np.moveaxis(x, mode, 0)
    out = mat @ moved.reshape(x.shape[mode], -1)
    out = out.reshape((mat.shape[0],) + moved.shape[1:])
    return np.moveaxis(out, 0, mode)


def multi_mode_product(x: Array, mats, skip=None) -> Array:
    """Apply ``mats[k]`` along every mode k, optionally skipping one or more.

    ``skip`` may be a single mode or a tuple of modes; ``mats`` entries may
    be None to leave a mode untouched.
    """
    skipped = set() if skip is None else {skip} if np.isscalar(skip) else set(skip)
    out = np.asarray(x)
    for k, mat in enumerate(mats):
        if k in skipped or mat is None:
            continue
        out = mode_product(out, mat, k)
    return out


def kron(a: Array, b: Array) -> Array:
    """Kronecker product (delegates to numpy)."""
    return np.kron(np.asarray(a), np.asarray(b))


def kron_composite(mats, skip: int | None = None) -> Array:
    """Kronecker product of ``mats`` in descending mode order, skipping one mode.

    This is the composite that pairs with :func:`unfold`:
    ``unfold(multi_mode_product(x, mats), m) == mats[m] @ unfold(x, m) @ kron_composite(mats, m).T``.
    """
    out = np.ones((1, 1))
    for k in range(len(mats) - 1, -1, -1):
        if k == skip:
            continue
        out = np.kron(out, np.asarray(mats[k]))
    return out


def frobenius_norm(x: Array) -> float:
    """sqrt of the sum of squared entries."""
    return float(np.linalg.norm(np.asarray(x).ravel()))


@dataclass
class TuckerModel:
    """Core tensor plus one factor matrix per mode (factor k maps rank -> mode size)."""

    core: Array
    factors: list[Array]

    def __post_init__(self):
        self.core = as_tensor(self.core, "core")
        self.factors = [as_matrix(f, f"factor {k}") for k, f in enumerate(self.factors)]
        if len(self.factors) != self.core.ndim:
            raise ValueError(
                f"need one factor per core mode: core has {self.core.ndim} modes, "
                f"got {len(self.factors)} factors"
            )
        for k, f in enumerate(self.factors):
            if f.shape[1] != self.core.shape[k]:
                raise ValueError(
                    f"factor {k} has {f.shape[1]} columns but core mode {k} "
                    f"has size {self.core.shape[k]}"
                )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def ranks(self) -> tuple[int, ...]:
        return self.core.shape


def tucker_reconstruct(model: TuckerModel) -> Array:
    """Expand a Tucker model to the full tensor (core times factors along every mode)."""
    return multi_mode_product(model.core, model.factors)


def hosvd(x: Array, ranks) -> TuckerModel:
    """Truncated higher-order SVD.

    Factor k holds the top-``ranks[k]`` left singular vectors of the mode-k
    unfolding (orthonormal columns); the core is ``x`` contracted with the
    factor transposes.  Wide unfoldings go through the Gram matrix, which is
    cheaper and spans the same subspace.
    """
    x = as_tensor(x)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != x.ndim:
        raise ValueError(f"need {x.ndim} ranks, got {len(ranks)}")
    for k, r in enumerate(ranks):
        if not 1 <= r <= x.shape[k]:
            raise ValueError(f"rank {r} out of range [1, {x.shape[k]}] for mode {k}")
    factors = []
    for k, r in enumerate(ranks):
        mat = unfold(x, k)
        if mat.shape[1] >= 4 * mat.shape[0]:
            # wide unfolding: eigenvectors of the Gram matrix, largest first
            gram = mat @ mat.T
            w, u = np.linalg.eigh(gram)
            u = u[:, ::-1]
        else:
            # full matrices so narrow unfoldings can still yield r basis vectors
            u, _, _ = np.linalg.svd(mat, full_matrices=(r > min(mat.shape)))
        factors.append(np.ascontiguousarray(u[:, :r]))
    core = multi_mode_product(x, [f.T for f in factors])
    return TuckerModel(core=core, factors=factors)


@dataclass
class ObservationMask:
    """Set of observed cells, stored as an (m, K) array of 0-based indices."""

    idx: Array = field(default_factory=lambda: np.zeros((0, 1), dtype=np.int64))

    def __post_init__(self):
        idx = np.asarray(self.idx, dtype=np.int64)
        if idx.ndim != 2:
            raise ValueError("mask indices must form a 2-D (count, K) array")
        if len(np.unique(idx, axis=0)) != len(idx):
            raise ValueError("mask contains duplicate cells")
        if idx.size and idx.min() < 0:
            raise ValueError("mask indices must be non-negative")
        self.idx = idx

    def __len__(self) -> int:
        return self.idx.shape[0]

    @property
    def order(self) -> int:
        return self.idx.shape[1]

    def validate_dims(self, dims) -> None:
        dims = tuple(int(d) for d in dims)
        if self.order != len(dims):
            raise ValueError(
                f"mask indexes {self.order}-way cells but tensor has {len(dims)} modes"
            )
        if len(self) and np.any(self.idx >= np.asarray(dims)):
            raise ValueError("mask contains out-of-bounds cells")

    def bool_mask(self, dims) -> Array:
        """Dense boolean indicator of the observed cells."""
        self.validate_dims(dims)
        out = np.zeros(tuple(int(d) for d in dims), dtype=bool)
        if len(self):
            out[tuple(self.idx.T)] = True
        return out

    def complement(self, dims) -> "ObservationMask":
        """Mask of the cells *not* in this mask."""
        return ObservationMask.from_bool(~self.bool_mask(dims))

    @classmethod
    def from_bool(cls, mask: Array) -> "ObservationMask":
        mask = np.asarray(mask, dtype=bool)
        return cls(np.argwhere(mask).astype(np.int64))

    @classmethod
    def all_cells(cls, dims) -> "ObservationMask":
        return cls.from_bool(np.ones(tuple(int(d) for d in dims), dtype=bool))
