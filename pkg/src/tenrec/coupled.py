"""Coupled tensor-matrix recovery: a matrix shares one mode with the tensor.

The shared tensor mode's factor appears in both factorizations: the tensor
model is the usual core-times-factors expansion, and each coupled matrix is
modeled as  shared_factor @ extra_factor'  with the matrix rows indexed by
the shared mode.  The solver loop is the tensor loop with the shared-mode
gradient augmented by the matrix-fit term and one exact least-squares block
per coupled matrix.

The synthetic generator draws unit-norm Gaussian factor columns and builds
the tensor with a superdiagonal core, so the factor directions are
identifiable; by default the coupled solver mirrors that structure by
projecting the core onto its superdiagonal after each core step
(``cp_core=False`` keeps a dense core).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .core import (
    Array,
    ObservationMask,
    TuckerModel,
    as_matrix,
    as_tensor,
    frobenius_norm,
    multi_mode_product,
)
from .solver import (
    ConvergenceTrace,
    SolverConfig,
    SolverState,
    _initial_state,
    run_loop,
)


@dataclass
class Coupling:
    """A matrix attached to one tensor mode (matrix rows = shared dimension)."""

    matrix: Array
    mode: int
    truth_index: int | None = None  # index of the matrix-specific ground-truth factor

    def __post_init__(self):
        self.matrix = as_matrix(self.matrix, "coupled matrix")


@dataclass
class CoupledProblem:
    tensor: Array
    couplings: list[Coupling]
    mask: ObservationMask
    rank: int = 3
    noise: float = 0.0
    truth_factors: list[Array] | None = None
    tensor_truth_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.tensor = as_tensor(self.tensor, "coupled tensor")
        seen = set()
        for c in self.couplings:
            if not 0 <= c.mode < self.tensor.ndim:
                raise ValueError(f"coupling mode {c.mode} out of range")
            if c.mode in seen:
                raise ValueError(f"two couplings attached to mode {c.mode}")
            seen.add(c.mode)
            if c.matrix.shape[0] != self.tensor.shape[c.mode]:
                raise ValueError(
                    f"coupled matrix rows ({c.matrix.shape[0]}) must equal the shared "
                    f"mode size ({self.tensor.shape[c.mode]})"
                )


@dataclass
class CoupledSolution:
    tucker: TuckerModel
    extra_factors: list[Array]
    trace: ConvergenceTrace
    matrix_residuals: list[list[float]]  # per coupling, per recorded iteration
    iters: int = 0


def _superdiag_core(rank: int, order: int) -> Array:
    core = np.zeros((rank,) * order)
    idx = np.arange(rank)
    core[tuple(idx for _ in range(order))] = 1.0
    return core


def _parse_mode_groups(modes) -> tuple[list[int], list[tuple[int, int]]]:
    groups = [list(int(v) for v in g) for g in modes]
    if not groups:
        raise ValueError("modes must contain at least the tensor's group")
    tensor_group = groups[0]
    couplings = []
    for g in groups[1:]:
        if len(g) != 2:
            raise ValueError(f"coupling groups must be [shared, extra], got {g}")
        couplings.append((g[0], g[1]))
    return tensor_group, couplings


def create_coupled(sizes, modes, noise: float, seed: int, rank: int = 3) -> CoupledProblem:
    """Simulate a coupled tensor-matrix instance from random ground-truth factors.

    ``sizes`` lists every dimension; ``modes`` is a list of 1-based index
    groups into ``sizes``: the first group gives the tensor modes, each
    further group ``[shared, extra]`` attaches a matrix of shape
    (sizes[shared], sizes[extra]) through the shared mode.  Factors have
    unit-norm standard-normal columns; the tensor uses a superdiagonal core.
    Gaussian noise at level ``noise`` is added to every output.
    """
    sizes = [int(s) for s in sizes]
    tensor_group, coupling_groups = _parse_mode_groups(modes)
    used = set(tensor_group)
    for shared, extra in coupling_groups:
        if shared not in tensor_group:
            raise ValueError(f"coupling shares index {shared}, not a tensor mode")
        if extra in used:
            raise ValueError(f"size index {extra} used twice")
        used.add(extra)
    for i in used:
        if not 1 <= i <= len(sizes):
            raise ValueError(f"size index {i} out of range")

    rng = np.random.default_rng(seed)
    factors = []
    for n in sizes:
        f = rng.standard_normal((n, rank))
        f /= np.linalg.norm(f, axis=0, keepdims=True)
        factors.append(f)

    tensor_idx = [i - 1 for i in tensor_group]
    core = _superdiag_core(rank, len(tensor_idx))
    tensor = multi_mode_product(core, [factors[i] for i in tensor_idx])
    if noise:
        tensor = tensor + noise * rng.standard_normal(tensor.shape)

    couplings = []
    for shared, extra in coupling_groups:
        mode = tensor_idx.index(shared - 1)
        mat = factors[shared - 1] @ factors[extra - 1].T
        if noise:
            mat = mat + noise * rng.standard_normal(mat.shape)
        couplings.append(Coupling(matrix=mat, mode=mode, truth_index=extra - 1))

    return CoupledProblem(
        tensor=tensor,
        couplings=couplings,
        mask=ObservationMask.all_cells(tensor.shape),
        rank=rank,
        noise=float(noise),
        truth_factors=factors,
        tensor_truth_indices=tensor_idx,
    )


def _solve_extra_factor(shared: Array, matrix: Array) -> Array:
    """Least-squares extra factor: argmin_U || matrix - shared @ U' ||_F."""
    sol, *_ = np.linalg.lstsq(shared, matrix, rcond=None)
    return sol.T


def coupled_solve(
    problem: CoupledProblem,
    config: SolverConfig,
    cp_core: bool = True,
    monitor=None,
) -> CoupledSolution:
    """Run the joint loop on a coupled problem.

    Coupled matrices are normalized to unit Frobenius norm internally (the
    tensor already is, when enabled); the returned extra factors carry the
    matrix scales so that  tucker.factors[mode] @ extra' reproduces original
    units.  ``config.coupling_weight`` scales the matrix-fit terms.
    """
    state, scale = _initial_state(problem.tensor, problem.mask, None, config)
    weight = float(config.coupling_weight)

    if cp_core:
        # start inside the superdiagonal subspace so every later projected
        # core step is a genuine descent step
        diag0 = tuple(np.arange(min(config.ranks)) for _ in config.ranks)
        core0 = np.zeros_like(state.core)
        core0[diag0] = state.core[diag0]
        state.core = core0

    mats_internal = []
    mat_scales = []
    for c in problem.couplings:
        s = frobenius_norm(c.matrix)
        s = s if (config.normalize_scale and s > 0) else 1.0
        mats_internal.append(c.matrix / s)
        mat_scales.append(s)

    extras = [
        _solve_extra_factor(state.factors[c.mode], m)
        for c, m in zip(problem.couplings, mats_internal)
    ]
    state.extra_factors = extras  # live view, e.g. for monitors
    matrix_residuals: list[list[float]] = [[] for _ in problem.couplings]

    by_mode = {c.mode: i for i, c in enumerate(problem.couplings)}

    def extra_grad(st: SolverState, k: int):
        if k not in by_mode:
            return None
        i = by_mode[k]
        u = extras[i]
        return weight * (st.factors[k] @ u.T - mats_internal[i]) @ u

    def extra_objective(st: SolverState) -> float:
        val = 0.0
        for i, c in enumerate(problem.couplings):
            diff = mats_internal[i] - st.factors[c.mode] @ extras[i].T
            val += 0.5 * weight * float(np.sum(diff * diff))
        return val

    def extra_blocks(st: SolverState):
        for i, c in enumerate(problem.couplings):
            extras[i] = _solve_extra_factor(st.factors[c.mode], mats_internal[i])

    def record_residuals(event: str, st: SolverState):
        if event in ("init", "iter_end"):
            for i, c in enumerate(problem.couplings):
                num = frobenius_norm(mats_internal[i] - st.factors[c.mode] @ extras[i].T)
                den = max(frobenius_norm(mats_internal[i]), np.finfo(float).tiny)
                matrix_residuals[i].append(num / den)
        if monitor is not None:
            monitor(event, st)

    post_core = None
    if cp_core:
        diag = tuple(np.arange(min(config.ranks)) for _ in config.ranks)

        def post_core(cand: Array) -> Array:
            out = np.zeros_like(cand)
            out[diag] = cand[diag]
            return out

    trace = run_loop(
        state,
        config,
        scale=scale,
        truth=None,
        monitor=record_residuals,
        extra_grad_fn=extra_grad,
        extra_objective=extra_objective,
        extra_blocks=extra_blocks,
        post_core=post_core,
    )

    tucker = TuckerModel(core=state.core * scale, factors=[v.copy() for v in state.factors])
    extra_out = [u * s for u, s in zip(extras, mat_scales)]
    return CoupledSolution(
        tucker=tucker,
        extra_factors=extra_out,
        trace=trace,
        matrix_residuals=matrix_residuals,
        iters=state.iteration,
    )


def factor_congruence(est: Array, truth: Array) -> float:
    """Permutation/sign-invariant factor match score in [0, 1].

    Columns are normalized; the score is the mean absolute cosine between
    truth columns and their optimally one-to-one assigned estimate columns.
    """
    est = as_matrix(est, "estimated factor")
    truth = as_matrix(truth, "true factor")
    if est.shape != truth.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {truth.shape}")

    def normalize(m):
        norms = np.linalg.norm(m, axis=0, keepdims=True)
        norms[norms == 0] = 1.0
        return m / norms

    cos = np.abs(normalize(est).T @ normalize(truth))
    rows, cols = scipy.optimize.linear_sum_assignment(-cos)
    return float(np.mean(cos[rows, cols]))


def reconstruction_error(sol: CoupledSolution, problem: CoupledProblem) -> float:
    """Mean relative error of the tensor and matrices vs. their noiseless truths."""
    if problem.truth_factors is None:
        raise ValueError("problem carries no ground truth")
    core = _superdiag_core(problem.rank, problem.tensor.ndim)
    truth_tensor = multi_mode_product(
        core, [problem.truth_factors[i] for i in problem.tensor_truth_indices]
    )
    errs = []
    recon = multi_mode_product(sol.tucker.core, sol.tucker.factors)
    errs.append(frobenius_norm(recon - truth_tensor) / frobenius_norm(truth_tensor))
    for c, u in zip(problem.couplings, sol.extra_factors):
        truth_mat = (
            problem.truth_factors[problem.tensor_truth_indices[c.mode]]
            @ problem.truth_factors[c.truth_index].T
        )
        est_mat = sol.tucker.factors[c.mode] @ u.T
        errs.append(frobenius_norm(est_mat - truth_mat) / frobenius_norm(truth_mat))
    return float(np.mean(errs))


def solution_congruence(sol: CoupledSolution, problem: CoupledProblem) -> float:
    """Mean factor congruence over every ground-truth factor of the problem."""
    if problem.truth_factors is None:
        raise ValueError("problem carries no ground truth")
    scores = [
        factor_congruence(sol.tucker.factors[k], problem.truth_factors[i])
        for k, i in enumerate(problem.tensor_truth_indices)
    ]
    for c, u in zip(problem.couplings, sol.extra_factors):
        scores.append(factor_congruence(u, problem.truth_factors[c.truth_index]))
    return float(np.mean(scores))


def _experiment_worker(payload):
    import threadpoolctl

    sizes, modes, noise, rank, seed, config, cp_core = payload
    # one BLAS thread per worker: faster at these sizes and, more
    # importantly, results become independent of the worker count
    with threadpoolctl.threadpool_limits(1):
        problem = create_coupled(sizes, modes, noise, seed, rank=rank)
        sol = coupled_solve(problem, config, cp_core=cp_core)
        return (seed, reconstruction_error(sol, problem),
                solution_congruence(sol, problem), sol.iters)


def run_coupled_experiment(sizes, modes, noise, rank, seeds, config: SolverConfig,
                           cp_core: bool = True, workers: int | None = None):
    """Rows of (seed, avg_err, congruence, iters) over a seed sweep.

    Each seed is an independent single-BLAS-thread run, so results are
    bit-identical however the work is scheduled.  ``workers=None`` reads the
    TENREC_THREADS environment variable (default: up to two processes).
    """
    import os

    if workers is None:
        env = os.environ.get("TENREC_THREADS")
        workers = int(env) if env else min(2, os.cpu_count() or 1)
    payloads = [(list(sizes), [list(g) for g in modes], float(noise), int(rank),
                 int(seed), config, cp_core) for seed in seeds]
    if workers <= 1 or len(payloads) <= 1:
        return [_experiment_worker(p) for p in payloads]
    import concurrent.futures

    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_experiment_worker, payloads))


def parse_simulation_spec(text: str) -> dict:
    """Parse the line-oriented simulation description.

    Recognized keys: ``sizes`` (integers), ``modes`` (bracketed 1-based index
    groups, e.g. ``[1 2 3], [1 4]``), ``rank``, ``noise``, ``seed``.
    """
    out: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"expected 'key: value', got {raw!r}")
        key, value = (part.strip() for part in line.split(":", 1))
        key = key.lower()
        if key == "sizes":
            out["sizes"] = [int(v) for v in value.replace(",", " ").split()]
        elif key == "modes":
            groups = []
            for chunk in value.replace("{", "").replace("}", "").split("]"):
                chunk = chunk.strip().lstrip(",").strip()
                if not chunk:
                    continue
                chunk = chunk.lstrip("[").strip()
                groups.append([int(v) for v in chunk.replace(",", " ").split()])
            out["modes"] = groups
        elif key == "rank":
            out["rank"] = int(value)
        elif key == "noise":
            out["noise"] = float(value)
        elif key == "seed":
            out["seed"] = int(value)
        else:
            raise ValueError(f"unknown simulation key {key!r}")
    for required in ("sizes", "modes"):
        if required not in out:
            raise ValueError(f"simulation spec is missing {required!r}")
    out.setdefault("rank", 3)
    out.setdefault("noise", 0.0)
    out.setdefault("seed", 0)
    return out
