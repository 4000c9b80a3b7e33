"""Finite-difference verification of every analytic gradient in the solver.

Central differences with per-entry step h = base * (1 + |x_i|) against the
scalar objectives; reported numbers are norm-relative errors, one per
gradient, maximized over the generated instances.
"""
from __future__ import annotations

import numpy as np

from .core import Array, hosvd
from .prox import Penalty
from .solver import (
    SolverConfig,
    SolverState,
    grad_lagrangian_wrt,
    lower_gradients,
    lower_objective,
    smooth_objective,
)

FD_STEP = 1e-5


def fd_gradient(fun, x: Array, base: float = FD_STEP) -> Array:
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        h = base * (1.0 + abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        up = fun(x)
        flat[i] = orig - h
        down = fun(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: Array, numeric: Array) -> float:
    denom = max(float(np.linalg.norm(numeric)), float(np.linalg.norm(analytic)))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / denom


def random_instance(rng: np.random.Generator, max_dim: int = 5, max_rank: int = 3):
    """A small random solver state with nonzero duals and a generic mask."""
    order = int(rng.integers(2, 4))
    dims = tuple(int(rng.integers(2, max_dim + 1)) for _ in range(order))
    ranks = tuple(int(rng.integers(1, min(max_rank, d) + 1)) for d in dims)

    data = rng.standard_normal(dims)
    mask_bool = rng.random(dims) < 0.6
    mask_bool.ravel()[int(rng.integers(0, data.size))] = True  # never empty
    observed = np.where(mask_bool, data, 0.0)

    init = hosvd(observed, ranks)
    sims = []
    for d in dims:
        raw = rng.standard_normal((d, d))
        sims.append(raw @ raw.T / d + np.eye(d))

    state = SolverState(
        data=observed,
        mask_bool=mask_bool,
        sims=sims,
        lambdas=rng.uniform(0.05, 0.5, size=order),
        factors=[f + 0.1 * rng.standard_normal(f.shape) for f in init.factors],
        core=rng.standard_normal(ranks),
        recon=rng.standard_normal(dims),
        estimate=observed + 0.2 * rng.standard_normal(dims) * (~mask_bool),
        dual_tensor=0.3 * rng.standard_normal(dims),
        dual_factors=[0.3 * rng.standard_normal((d, r)) for d, r in zip(dims, ranks)],
    )
    config = SolverConfig(
        ranks=ranks,
        lambdas=tuple(state.lambdas),
        rho=float(rng.uniform(0.5, 2.0)),
        core_penalty=Penalty(),
        factor_penalties=Penalty(),
        seed=0,
    )
    return state, config


def check_lower_gradients(state: SolverState) -> dict[str, float]:
    """Compare the metric-completion gradients to central differences."""
    errors: dict[str, float] = {}
    grad_est, grads_v = lower_gradients(state)

    def obj_est(arr):
        saved = state.estimate
        state.estimate = arr
        val = lower_objective(state)
        state.estimate = saved
        return val

    errors["lower:estimate"] = relative_error(grad_est, fd_gradient(obj_est, state.estimate.copy()))

    for k in range(state.order):
        def obj_v(arr, k=k):
            saved = state.factors[k]
            state.factors[k] = arr
            val = lower_objective(state)
            state.factors[k] = saved
            return val

        errors[f"lower:factor{k}"] = relative_error(
            grads_v[k], fd_gradient(obj_v, state.factors[k].copy())
        )
    return errors


def check_lagrangian_gradients(state: SolverState, config: SolverConfig) -> dict[str, float]:
    """Compare every smooth-Lagrangian gradient to central differences."""
    errors: dict[str, float] = {}

    def with_field(field_name, arr, fun):
        saved = getattr(state, field_name)
        setattr(state, field_name, arr)
        val = fun()
        setattr(state, field_name, saved)
        return val

    def obj_sub():
        return smooth_objective(state, config)

    def obj_field():
        return smooth_objective(state, config, use_recon_field=True)

    g = grad_lagrangian_wrt(state, config, "Xhat")
    num = fd_gradient(lambda a: with_field("estimate", a, obj_sub), state.estimate.copy())
    errors["lagrangian:estimate"] = relative_error(g, num)

    g = grad_lagrangian_wrt(state, config, "G")
    num = fd_gradient(lambda a: with_field("core", a, obj_sub), state.core.copy())
    errors["lagrangian:core"] = relative_error(g, num)

    g = grad_lagrangian_wrt(state, config, "Z")
    num = fd_gradient(lambda a: with_field("recon", a, obj_field), state.recon.copy())
    errors["lagrangian:recon"] = relative_error(g, num)

    for k in range(state.order):
        g = grad_lagrangian_wrt(state, config, ("V", k))

        def obj_v(arr, k=k):
            saved = state.factors[k]
            state.factors[k] = arr
            val = smooth_objective(state, config)
            state.factors[k] = saved
            return val

        num = fd_gradient(obj_v, state.factors[k].copy())
        errors[f"lagrangian:factor{k}"] = relative_error(g, num)
    return errors


def run_suite(seed: int = 0, instances: int = 20) -> dict[str, float]:
    """Max relative FD error per gradient over ``instances`` random problems."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        state, config = random_instance(rng)
        for name, err in check_lower_gradients(state).items():
            worst[name] = max(worst.get(name, 0.0), err)
        for name, err in check_lagrangian_gradients(state, config).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
