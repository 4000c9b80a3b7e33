"""Text file formats for tensors (DTNS v1) and observation masks (DMSK v1).

DTNS v1::

    dtns 1
    <K>
    <N_1> ... <N_K>
    <values, whitespace separated, row-major (last index fastest)>

DMSK v1::

    dmsk 1
    <count>
    <i_1> ... <i_K>      (one observed cell per line, 0-based)
"""
from __future__ import annotations

import os

import numpy as np

from .core import Array, ObservationMask, as_tensor


class FormatError(ValueError):
    """Raised when a file does not follow the declared format."""


def save_tensor(path: str | os.PathLike, x: Array) -> None:
    x = as_tensor(x)
    with open(path, "w") as fh:
        fh.write("dtns 1\n")
        fh.write(f"{x.ndim}\n")
        fh.write(" ".join(str(d) for d in x.shape) + "\n")
        flat = x.ravel(order="C")
        for start in range(0, flat.size, 8):
            fh.write(" ".join("%.17g" % v for v in flat[start : start + 8]) + "\n")


def load_tensor(path: str | os.PathLike) -> Array:
    with open(path) as fh:
        tokens = fh.read().split()
    if len(tokens) < 3 or tokens[0].lower() != "dtns" or tokens[1] != "1":
        raise FormatError(f"{path}: missing 'dtns 1' header")
    ndim = int(tokens[2])
    if ndim < 1 or len(tokens) < 3 + ndim:
        raise FormatError(f"{path}: truncated dims line")
    dims = tuple(int(t) for t in tokens[3 : 3 + ndim])
    values = tokens[3 + ndim :]
    expected = int(np.prod(dims, dtype=np.int64))
    if len(values) != expected:
        raise FormatError(f"{path}: expected {expected} values, found {len(values)}")
    data = np.array([float(v) for v in values], dtype=np.float64)
    return as_tensor(data.reshape(dims, order="C"), str(path))


def save_mask(path: str | os.PathLike, mask: ObservationMask) -> None:
    with open(path, "w") as fh:
        fh.write("dmsk 1\n")
        fh.write(f"{len(mask)}\n")
        for row in mask.idx:
            fh.write(" ".join(str(int(i)) for i in row) + "\n")


def load_mask(path: str | os.PathLike) -> ObservationMask:
    with open(path) as fh:
        tokens = fh.read().split()
    if len(tokens) < 2 or tokens[0].lower() != "dmsk" or tokens[1] != "1":
        raise FormatError(f"{path}: missing 'dmsk 1' header")
    count = int(tokens[2])
    rest = tokens[3:]
    if count == 0:
        return ObservationMask(np.zeros((0, 1), dtype=np.int64))
    if len(rest) % count != 0:
        raise FormatError(f"{path}: {len(rest)} indices do not split into {count} cells")
    order = len(rest) // count
    idx = np.array([int(t) for t in rest], dtype=np.int64).reshape(count, order)
    return ObservationMask(idx)
