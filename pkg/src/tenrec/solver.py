"""Joint completion and penalized Tucker decomposition under a learned metric.

The problem couples three groups of variables: a completion estimate whose
observed cells are pinned to the data, per-mode factor matrices (with their
Gram matrices acting as the mode metrics), and a core tensor whose
reconstruction carries the data-fitting loss.  The first-order stationarity
conditions of the metric-completion objective enter as equality constraints
through two residuals:

    residual_tensor:  the estimate pushed twice through every mode metric
    residual_factor:  [unfold(M x_{j!=k} L_j, k) @ unfold(est, k)' +
                       lambda_k L_k S_k] @ V_k     with  M = est x_j L_j

An augmented Lagrangian attaches one dual variable per residual, and the
solver performs safeguarded prox-gradient block updates on the factors and
core, a whitening refresh plus pinned-quadratic descent on the estimate, an
exact reconstruction step, and dual ascent.  All analytic gradients are
exact derivatives of the residuals as implemented here and are
finite-difference checked in the test suite.

Scaling note: ``solve`` optionally normalizes the observed data to unit
Frobenius norm internally (default) so that loss, residual and similarity
terms are on comparable scales regardless of input units; outputs are
rescaled and re-pinned, and trace fit/rse are reported in original units.
"""
from __future__ import annotations

import io as _io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg

from .core import (
    Array,
    ObservationMask,
    TuckerModel,
    as_tensor,
    fold,
    frobenius_norm,
    hosvd,
    mode_product,
    multi_mode_product,
    unfold,
)
from .evaluate import fit as fit_metric
from .evaluate import rse as rse_metric
from .kempf_ness import whitening_factor
from .metric import MetricFamily, SimilarityMatrices, build_similarity, metric_from_factors
from .prox import Penalty, prox


class NumericError(RuntimeError):
    """A non-finite value appeared mid-run; carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class SolverConfig:
    """Knobs of the block-update loop.

    ``prox_core`` / ``prox_factor`` / ``prox_estimate`` are the inverse step
    sizes of the corresponding blocks, applied verbatim when given.  None
    means automatic: 2x a power-iteration estimate of the block curvature,
    recalibrated (downward only) every ``curvature_refresh_every``
    iterations, relaxed after every accepted step and inflated whenever a
    step would increase the block merit.  ``lambdas`` weights the per-mode
    similarity terms.
    """

    ranks: tuple[int, ...] = ()
    lambdas: tuple[float, ...] | float = 0.1
    rho: float = 1.0
    prox_core: float | None = None
    prox_factor: tuple[float, ...] | float | None = None
    prox_estimate: float | None = None
    core_penalty: Penalty = field(default_factory=Penalty)
    factor_penalties: tuple[Penalty, ...] | Penalty = field(default_factory=Penalty)
    max_iters: int = 50
    tol_rel: float = 1e-5
    seed: int = 0
    refresh_similarity_every: int | None = None
    loss_support: str = "observed"
    normalize_scale: bool = True
    curvature_refresh_every: int = 10
    coupling_weight: float = 1.0
    estimate_solver: str = "cg"
    estimate_cg_iters: int = 100

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol_rel < 0:
            raise ValueError("tol_rel must be >= 0")
        if self.loss_support not in ("observed", "all"):
            raise ValueError(f"loss_support must be 'observed' or 'all', got {self.loss_support!r}")
        if self.estimate_solver not in ("cg", "gradient"):
            raise ValueError(f"estimate_solver must be 'cg' or 'gradient', got {self.estimate_solver!r}")
        for name in ("prox_core", "prox_estimate"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive when given")

    def lambdas_for(self, order: int) -> np.ndarray:
        lam = self.lambdas
        arr = np.full(order, float(lam)) if np.isscalar(lam) else np.asarray(lam, dtype=float)
        if arr.shape != (order,):
            raise ValueError(f"need {order} lambda values, got {arr.shape}")
        if np.any(arr < 0):
            raise ValueError("lambdas must be >= 0")
        return arr

    def factor_penalties_for(self, order: int) -> list[Penalty]:
        fp = self.factor_penalties
        if isinstance(fp, Penalty):
            return [fp] * order
        fp = list(fp)
        if len(fp) != order:
            raise ValueError(f"need {order} factor penalties, got {len(fp)}")
        return fp

    def prox_factor_for(self, order: int) -> list[float | None]:
        pf = self.prox_factor
        if pf is None:
            return [None] * order
        if np.isscalar(pf):
            if pf <= 0:
                raise ValueError("prox_factor must be positive when given")
            return [float(pf)] * order
        vals = [float(v) for v in pf]
        if len(vals) != order or any(v <= 0 for v in vals):
            raise ValueError("prox_factor entries must be positive, one per mode")
        return vals


@dataclass
class SolverState:
    """All mutable quantities of one run (in the solver's internal units)."""

    data: Array                      # observed entries, zero elsewhere
    mask_bool: Array                 # True on observed cells
    sims: list[Array]                # one similarity matrix per mode
    lambdas: Array                   # per-mode similarity weights
    factors: list[Array]             # factor k has shape (N_k, n_k)
    core: Array
    recon: Array                     # current model reconstruction
    estimate: Array                  # completion estimate, observed cells pinned
    dual_tensor: Array
    dual_factors: list[Array]
    iteration: int = 0
    loss_support: str = "observed"
    last_steps: dict = field(default_factory=dict)  # inverse step size per block

    @property
    def order(self) -> int:
        return self.data.ndim

    def metric_mats(self) -> list[Array]:
        """Per-mode metric matrices: the factor Gram matrices V_k V_k'."""
        return [v @ v.T for v in self.factors]

    def metric_family(self) -> MetricFamily:
        return metric_from_factors([v.T for v in self.factors])

    def loss_weight(self) -> Array:
        if self.loss_support == "all":
            return np.ones_like(self.mask_bool, dtype=np.float64)
        return self.mask_bool.astype(np.float64)

    def clone(self) -> "SolverState":
        return SolverState(
            data=self.data.copy(),
            mask_bool=self.mask_bool.copy(),
            sims=[s.copy() for s in self.sims],
            lambdas=self.lambdas.copy(),
            factors=[v.copy() for v in self.factors],
            core=self.core.copy(),
            recon=self.recon.copy(),
            estimate=self.estimate.copy(),
            dual_tensor=self.dual_tensor.copy(),
            dual_factors=[y.copy() for y in self.dual_factors],
            iteration=self.iteration,
            loss_support=self.loss_support,
        )

    def check_finite(self) -> None:
        arrays = [self.estimate, self.core, self.recon, self.dual_tensor]
        arrays += self.factors + self.dual_factors
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                raise NumericError("non-finite value in solver state", self.iteration)


# ---------------------------------------------------------------------------
# residuals and objective pieces


def transformed_estimate(state: SolverState, mats: list[Array] | None = None) -> Array:
    """The estimate pushed once through every mode metric."""
    mats = state.metric_mats() if mats is None else mats
    return multi_mode_product(state.estimate, mats)


def residual_tensor(state: SolverState, mats: list[Array] | None = None) -> Array:
    """Stationarity residual of the completion estimate (zero at optimality)."""
    mats = state.metric_mats() if mats is None else mats
    return multi_mode_product(transformed_estimate(state, mats), mats)


def _bracket(state: SolverState, k: int, mats: list[Array], m: Array | None = None) -> Array:
    if m is None:
        m = transformed_estimate(state, mats)
    partial = multi_mode_product(m, mats, skip=k)
    out = unfold(partial, k) @ unfold(state.estimate, k).T
    out += state.lambdas[k] * (mats[k] @ state.sims[k])
    return out


def residual_factor(state: SolverState, k: int, mats: list[Array] | None = None) -> Array:
    """Stationarity residual attached to factor k (shape of the factor)."""
    if not 0 <= k < state.order:
        raise ValueError(f"mode {k} out of range")
    mats = state.metric_mats() if mats is None else mats
    return _bracket(state, k, mats) @ state.factors[k]


def residuals(state: SolverState) -> tuple[Array, list[Array]]:
    mats = state.metric_mats()
    m = transformed_estimate(state, mats)
    a = multi_mode_product(m, mats)
    bs = [_bracket(state, k, mats, m) @ state.factors[k] for k in range(state.order)]
    return a, bs


def lower_objective(state: SolverState, mats: list[Array] | None = None) -> float:
    """Metric-completion objective: half squared metric norm plus similarity traces."""
    mats = state.metric_mats() if mats is None else mats
    val = 0.5 * frobenius_norm(multi_mode_product(state.estimate, mats)) ** 2
    for k in range(state.order):
        val += 0.5 * state.lambdas[k] * float(np.trace(mats[k] @ state.sims[k] @ mats[k].T))
    return val


def lower_gradients(state: SolverState) -> tuple[Array, list[Array]]:
    """Exact gradients of :func:`lower_objective` w.r.t. the estimate and each factor."""
    mats = state.metric_mats()
    grad_est = residual_tensor(state, mats)
    grads_v = []
    for k in range(state.order):
        br = _bracket(state, k, mats)
        grads_v.append((br + br.T) @ state.factors[k])
    return grad_est, grads_v


def loss_value(state: SolverState, recon: Array | None = None) -> float:
    recon = state.recon if recon is None else recon
    diff = (recon - state.data) * state.loss_weight()
    return 0.5 * float(np.sum(diff * diff))


def _loss_grad_recon(state: SolverState, recon: Array) -> Array:
    return (recon - state.data) * state.loss_weight()


def penalty_value(state: SolverState, config: SolverConfig) -> float:
    val = config.core_penalty.value(state.core)
    for pen, v in zip(config.factor_penalties_for(state.order), state.factors):
        val += pen.value(v)
    return val


def _quadratic_residual_term(state: SolverState, config: SolverConfig) -> float:
    a, bs = residuals(state)
    rho = config.rho
    val = frobenius_norm(a - state.dual_tensor / rho) ** 2
    val += sum(
        frobenius_norm(b - y / rho) ** 2 for b, y in zip(bs, state.dual_factors)
    )
    return 0.5 * rho * val


def augmented_lagrangian(state: SolverState, config: SolverConfig, form: str = "multiplier") -> float:
    """Value of the augmented Lagrangian at the current state.

    ``form="multiplier"`` uses the explicit inner-product form;
    ``form="square"`` uses the completed-square form.  The two differ by the
    constant  (1/(2 rho)) * ||duals||^2,  which is asserted on every call.
    """
    if form not in ("multiplier", "square"):
        raise ValueError(f"unknown form {form!r}")
    a, bs = residuals(state)
    rho = config.rho
    base = loss_value(state) + penalty_value(state, config)

    inner = float(np.sum(state.dual_tensor * a))
    inner += sum(float(np.sum(y * b)) for y, b in zip(state.dual_factors, bs))
    quad = frobenius_norm(a) ** 2 + sum(frobenius_norm(b) ** 2 for b in bs)
    multiplier_form = base - inner + 0.5 * rho * quad

    sq = frobenius_norm(a - state.dual_tensor / rho) ** 2
    sq += sum(frobenius_norm(b - y / rho) ** 2 for b, y in zip(bs, state.dual_factors))
    square_form = base + 0.5 * rho * sq

    dual_sq = frobenius_norm(state.dual_tensor) ** 2
    dual_sq += sum(frobenius_norm(y) ** 2 for y in state.dual_factors)
    const = dual_sq / (2.0 * rho)
    gap = abs(multiplier_form - (square_form - const))
    if gap > 1e-9 * max(1.0, abs(multiplier_form)):
        raise NumericError(f"Lagrangian forms disagree by {gap:.3e}", state.iteration)
    return multiplier_form if form == "multiplier" else square_form


def smooth_objective(state: SolverState, config: SolverConfig, use_recon_field: bool = False) -> float:
    """Smooth part of the Lagrangian: loss plus the completed-square residual term.

    By default the loss is evaluated on the reconstruction implied by the
    current core and factors (the form the factor and core blocks descend);
    ``use_recon_field=True`` evaluates it on the stored reconstruction.
    """
    recon = state.recon if use_recon_field else multi_mode_product(state.core, state.factors)
    return loss_value(state, recon) + _quadratic_residual_term(state, config)


# ---------------------------------------------------------------------------
# analytic gradients of the smooth part


def _bar_pieces(state: SolverState, config: SolverConfig):
    mats = state.metric_mats()
    sq = [m @ m for m in mats]
    rho = config.rho
    m = transformed_estimate(state, mats)
    a = multi_mode_product(m, mats)
    ra = a - state.dual_tensor / rho
    brackets = [_bracket(state, k, mats, m) for k in range(state.order)]
    bs = [br @ v for br, v in zip(brackets, state.factors)]
    rs = [b - y / rho for b, y in zip(bs, state.dual_factors)]
    ps = [rho * r @ v.T for r, v in zip(rs, state.factors)]
    return mats, sq, ra, brackets, rs, ps


def _bar_grad_estimate(state: SolverState, config: SolverConfig) -> Array:
    mats, sq, ra, _, _, ps = _bar_pieces(state, config)
    est = state.estimate
    grad = config.rho * multi_mode_product(ra, sq)
    for l in range(state.order):
        h_l = multi_mode_product(est, sq, skip=l)
        coeff = mats[l] @ ps[l] + ps[l].T @ mats[l]
        grad += fold(coeff @ unfold(h_l, l), l, est.shape)
    return grad


def _bar_grad_factor(state: SolverState, config: SolverConfig, k: int) -> Array:
    mats, sq, ra, brackets, rs, ps = _bar_pieces(state, config)
    est = state.estimate
    rho = config.rho
    h_k = multi_mode_product(est, sq, skip=k)
    h_k_mat = unfold(h_k, k)

    psi_a = unfold(ra, k) @ h_k_mat.T
    d_k = rho * (psi_a @ mats[k] + mats[k] @ psi_a)

    for l in range(state.order):
        t2 = mode_product(est, ps[l], l)
        if l == k:
            d_k += unfold(t2, k) @ h_k_mat.T
            d_k += state.lambdas[k] * (ps[k] @ state.sims[k])
        else:
            t1 = mode_product(multi_mode_product(est, sq, skip=(k, l)), mats[l], l)
            psi = unfold(t2, k) @ unfold(t1, k).T
            d_k += psi @ mats[k] + mats[k] @ psi
    grad = (d_k + d_k.T) @ state.factors[k]
    grad += rho * brackets[k].T @ rs[k]
    return grad


def grad_lagrangian_wrt(state: SolverState, config: SolverConfig, var) -> Array:
    """Gradient of the smooth Lagrangian part w.r.t. one variable block.

    ``var`` is one of "Xhat", "G", "Z" or a pair ("V", k).  For "G" and
    ("V", k) the loss is differentiated through the reconstruction map; for
    "Z" it is the plain loss gradient at the stored reconstruction.
    """
    if var == "Xhat":
        return _bar_grad_estimate(state, config)
    if var == "Z":
        return _loss_grad_recon(state, state.recon)
    if var == "G":
        recon = multi_mode_product(state.core, state.factors)
        err = _loss_grad_recon(state, recon)
        return multi_mode_product(err, [v.T for v in state.factors])
    if isinstance(var, tuple) and len(var) == 2 and var[0] == "V":
        k = var[1]
        if not 0 <= k < state.order:
            raise ValueError(f"factor index {k} out of range")
        recon = multi_mode_product(state.core, state.factors)
        err = _loss_grad_recon(state, recon)
        partial = multi_mode_product(state.core, state.factors, skip=k)
        grad = unfold(err, k) @ unfold(partial, k).T
        return grad + _bar_grad_factor(state, config, k)
    raise ValueError(f"unknown variable id {var!r}")


# ---------------------------------------------------------------------------
# block updates


def update_factor(state: SolverState, k: int, config: SolverConfig, step: float,
                  extra_grad: Array | None = None) -> Array:
    """One prox-gradient step on factor k with inverse step size ``step``."""
    grad = grad_lagrangian_wrt(state, config, ("V", k))
    if extra_grad is not None:
        grad = grad + extra_grad
    pen = config.factor_penalties_for(state.order)[k]
    return prox(pen, state.factors[k] - grad / step, step)


def update_core(state: SolverState, config: SolverConfig, step: float) -> Array:
    """One prox-gradient step on the core with inverse step size ``step``."""
    grad = grad_lagrangian_wrt(state, config, "G")
    return prox(config.core_penalty, state.core - grad / step, step)


def update_recon(state: SolverState) -> Array:
    """Exact reconstruction from the current core and factors."""
    return multi_mode_product(state.core, state.factors)


def update_duals(state: SolverState, config: SolverConfig) -> tuple[Array, list[Array]]:
    """Dual ascent: subtract rho times the current residuals."""
    a, bs = residuals(state)
    new_tensor = state.dual_tensor - config.rho * a
    new_factors = [y - config.rho * b for y, b in zip(state.dual_factors, bs)]
    return new_tensor, new_factors


def update_metric_step(state: SolverState, config: SolverConfig) -> tuple[Array, MetricFamily]:
    """Refresh the mode metrics from the current estimate, then descend it.

    Each mode metric is replaced by the det-one whitener of the estimate's
    unfolding regularized by that mode's similarity matrix (the exact
    one-sided factor update of the metric-learning alternation).  The
    missing cells of the estimate are then moved toward the minimizer of the
    metric-completion objective under the refreshed family: either by a few
    warm-started conjugate-gradient passes on the pinned quadratic
    (``estimate_solver="cg"``, default; the free-entry system is far too
    ill-conditioned for plain gradient steps to make progress) or by one
    exact-step projected gradient step (``estimate_solver="gradient"``).
    The observed cells are pinned back to the data either way.
    """
    refreshed = []
    lip = 1.0
    for k in range(state.order):
        mat = whitening_factor(unfold(state.estimate, k), state.sims[k], float(state.lambdas[k]))
        refreshed.append(mat)
        top = float(np.linalg.eigvalsh(mat)[-1])
        lip *= top * top
    sq = [m @ m for m in refreshed]

    if config.estimate_solver == "gradient":
        step = config.prox_estimate if config.prox_estimate is not None else max(lip, 1e-12)
        grad = multi_mode_product(state.estimate, sq)
        new_est = state.estimate - grad / step
        new_est[state.mask_bool] = state.data[state.mask_bool]
        return new_est, MetricFamily(refreshed)

    free = ~state.mask_bool
    nfree = int(free.sum())
    new_est = state.estimate.copy()
    new_est[state.mask_bool] = state.data[state.mask_bool]
    if nfree == 0:
        return new_est, MetricFamily(refreshed)

    pinned_only = np.where(state.mask_bool, state.data, 0.0)

    def apply_free(v: Array) -> Array:
        full = np.zeros_like(new_est)
        full[free] = v
        return multi_mode_product(full, sq)[free]

    rhs = -multi_mode_product(pinned_only, sq)[free]
    op = scipy.sparse.linalg.LinearOperator((nfree, nfree), matvec=apply_free)
    sol, _ = scipy.sparse.linalg.cg(
        op, rhs, x0=state.estimate[free], maxiter=config.estimate_cg_iters, rtol=1e-10
    )
    new_est[free] = sol
    return new_est, MetricFamily(refreshed)


# ---------------------------------------------------------------------------
# trace


@dataclass
class TraceRecord:
    iteration: int
    lagrangian: float
    loss: float
    fit: float
    rse: float
    res_tensor: float
    res_factor_max: float
    step_norms: dict[str, float]

    @property
    def step_norm(self) -> float:
        return float(np.sqrt(sum(v * v for v in self.step_norms.values())))


@dataclass
class ConvergenceTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        buf.write("iter,lagrangian,loss,fit,rse,resA,resB_max,step_norm\n")
        for r in self.records:
            buf.write(
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                % (r.iteration, r.lagrangian, r.loss, r.fit, r.rse,
                   r.res_tensor, r.res_factor_max, r.step_norm)
            )
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


@dataclass
class SolveResult:
    model: TuckerModel
    completed: Array          # the completion estimate: data on observed cells, fill elsewhere
    metric: MetricFamily
    trace: ConvergenceTrace
    state: SolverState        # final internal state (normalized units)
    scale: float = 1.0

    def model_reconstruction(self) -> Array:
        """Expansion of the fitted Tucker model (original units)."""
        return multi_mode_product(self.model.core, self.model.factors)

    def __iter__(self):
        return iter((self.model, self.completed, self.metric, self.trace))


# ---------------------------------------------------------------------------
# curvature estimation and the safeguarded loop


def _estimate_block_curvature(grad_fn, x0: Array, rng: np.random.Generator,
                              probes: int = 3) -> float:
    """Power iteration on the block Hessian via gradient differences."""
    eps = 1e-5 * (1.0 + float(np.linalg.norm(x0)))
    u = rng.standard_normal(x0.shape)
    nu = float(np.linalg.norm(u))
    if nu == 0:
        return 0.0
    u /= nu
    lam = 0.0
    for _ in range(probes):
        w = (grad_fn(x0 + eps * u) - grad_fn(x0 - eps * u)) / (2.0 * eps)
        lam = float(np.linalg.norm(w))
        if lam <= 1e-14:
            return 0.0
        u = w / lam
    return lam


def _phi(state: SolverState, config: SolverConfig, extra_objective=None) -> float:
    """Block-descent merit: smooth part plus penalties (plus any coupling term)."""
    val = smooth_objective(state, config) + penalty_value(state, config)
    if extra_objective is not None:
        val += extra_objective(state)
    return val


MAX_BACKTRACKS = 40
STEP_GROW = 2.0      # inverse step inflation on a rejected (ascent) block step
STEP_SHRINK = 0.7    # inverse step relaxation after an accepted block step
STEP_FLOOR = 1e-10


def _safeguarded_block_step(state, config, attr_get, attr_set, make_candidate,
                            step, extra_objective, before):
    """Apply one prox-gradient block step, keeping the merit non-increasing.

    Rejected steps (merit increase beyond round-off) inflate the inverse
    step size and retry; accepted steps relax it for the next iteration, so
    the block step tracks the largest stable value between curvature
    refreshes.  Returns (inverse step size for next time, merit after).
    """
    old = attr_get()
    tol = 1e-12 * max(1.0, abs(before))
    for _ in range(MAX_BACKTRACKS):
        attr_set(make_candidate(step))
        after = _phi(state, config, extra_objective)
        if after <= before + tol:
            return max(step * STEP_SHRINK, STEP_FLOOR), after
        attr_set(old)
        step *= STEP_GROW
    attr_set(old)
    return step, before


def _safeguarded_factor_step(state, config, k, step, extra_grad_fn, extra_objective, before):
    def candidate(s):
        extra = extra_grad_fn(state, k) if extra_grad_fn is not None else None
        return update_factor(state, k, config, s, extra_grad=extra)

    def setter(v):
        state.factors[k] = v

    return _safeguarded_block_step(
        state, config, lambda: state.factors[k], setter, candidate, step, extra_objective, before
    )


def _safeguarded_core_step(state, config, step, post_core, extra_objective, before):
    def candidate(s):
        cand = update_core(state, config, s)
        return post_core(cand) if post_core is not None else cand

    def setter(v):
        state.core = v

    return _safeguarded_block_step(
        state, config, lambda: state.core, setter, candidate, step, extra_objective, before
    )


def _initial_state(x: Array, mask: ObservationMask, sims, config: SolverConfig) -> tuple[SolverState, float]:
    x = as_tensor(x, "data")
    mask.validate_dims(x.shape)
    if len(mask) == 0:
        raise ValueError("observation mask is empty")
    ranks = tuple(int(r) for r in config.ranks)
    if len(ranks) != x.ndim:
        raise ValueError(f"need {x.ndim} ranks, got {len(ranks)}")
    for k, r in enumerate(ranks):
        if not 1 <= r <= x.shape[k]:
            raise ValueError(f"rank {r} exceeds mode size {x.shape[k]} at mode {k}")

    bool_mask = mask.bool_mask(x.shape)
    data = np.zeros_like(x)
    data[bool_mask] = x[bool_mask]

    scale = frobenius_norm(data)
    if not config.normalize_scale or scale == 0:
        scale = 1.0
    data = data / scale

    if sims is None:
        sim_list = [build_similarity(data, k) for k in range(x.ndim)]
    else:
        if isinstance(sims, SimilarityMatrices):
            sim_list = [s.copy() for s in sims.mats]
        else:
            sim_list = [np.asarray(s, dtype=float).copy() for s in sims]
        if len(sim_list) != x.ndim:
            raise ValueError(f"need {x.ndim} similarity matrices, got {len(sim_list)}")
        for k, s in enumerate(sim_list):
            if s.shape != (x.shape[k], x.shape[k]):
                raise ValueError(f"similarity {k} must be {x.shape[k]}x{x.shape[k]}, got {s.shape}")

    init = hosvd(data, ranks)
    core = multi_mode_product(data, [f.T for f in init.factors])
    state = SolverState(
        data=data,
        mask_bool=bool_mask,
        sims=sim_list,
        lambdas=config.lambdas_for(x.ndim),
        factors=[f.copy() for f in init.factors],
        core=core,
        recon=data.copy(),
        estimate=data.copy(),
        dual_tensor=np.zeros_like(data),
        dual_factors=[np.zeros((x.shape[k], ranks[k])) for k in range(x.ndim)],
        iteration=0,
        loss_support=config.loss_support,
    )
    return state, scale


def _trace_row(state, config, truth_internal, eval_support, scale, step_norms, extra_objective):
    a, bs = residuals(state)
    lag = augmented_lagrangian(state, config)
    if extra_objective is not None:
        lag += extra_objective(state)
    if truth_internal is not None:
        # completion quality: the pinned estimate against the truth, held-out cells
        ref, est, sup = truth_internal, state.estimate, eval_support
    else:
        # no reference available: in-sample fit of the model reconstruction
        ref, est, sup = state.data, state.recon, state.mask_bool
    fit_val = fit_metric(ref, est, sup)
    rse_val = rse_metric(ref, est, sup) * scale
    return TraceRecord(
        iteration=state.iteration,
        lagrangian=lag,
        loss=loss_value(state),
        fit=fit_val,
        rse=rse_val,
        res_tensor=frobenius_norm(a),
        res_factor_max=max(frobenius_norm(b) for b in bs),
        step_norms=dict(step_norms),
    )


def run_loop(
    state: SolverState,
    config: SolverConfig,
    scale: float = 1.0,
    truth: Array | None = None,
    monitor=None,
    extra_grad_fn=None,
    extra_objective=None,
    extra_blocks=None,
    post_core=None,
) -> ConvergenceTrace:
    """The shared block-update loop (also used by the coupled solver).

    ``extra_grad_fn(state, k)`` may add a term to factor k's gradient,
    ``extra_objective(state)`` adds the matching term to the descent merit,
    ``extra_blocks(state)`` runs extra exact updates after the factor sweep,
    and ``post_core`` post-processes the core candidate inside its prox step.
    """
    rng = np.random.default_rng(config.seed)
    order = state.order

    truth_internal = None
    eval_support = None
    if truth is not None:
        truth_internal = as_tensor(truth, "truth") / scale
        held_out = ~state.mask_bool
        eval_support = held_out if held_out.any() else np.ones_like(state.mask_bool)

    def notify(event):
        if monitor is not None:
            monitor(event, state)

    trace = ConvergenceTrace()
    trace.records.append(
        _trace_row(state, config, truth_internal, eval_support, scale, {}, extra_objective)
    )
    notify("init")

    user_factor_steps = config.prox_factor_for(order)
    factor_steps = [None] * order
    core_step = None
    prev_recon = state.recon.copy()

    for it in range(1, config.max_iters + 1):
        state.iteration = it
        steps: dict[str, float] = {}

        old_est = state.estimate
        new_est, _refreshed = update_metric_step(state, config)
        state.estimate = new_est
        steps["Xhat"] = frobenius_norm(new_est - old_est)
        notify("metric")

        phi_now = _phi(state, config, extra_objective)
        refresh = (it - 1) % config.curvature_refresh_every == 0
        for k in range(order):
            old = state.factors[k]
            if user_factor_steps[k] is not None:
                extra = extra_grad_fn(state, k) if extra_grad_fn is not None else None
                state.factors[k] = update_factor(state, k, config, user_factor_steps[k],
                                                 extra_grad=extra)
                phi_now = _phi(state, config, extra_objective)
            else:
                if refresh or factor_steps[k] is None:
                    def grad_at(v, k=k):
                        saved = state.factors[k]
                        state.factors[k] = v
                        g = grad_lagrangian_wrt(state, config, ("V", k))
                        if extra_grad_fn is not None:
                            extra = extra_grad_fn(state, k)
                            if extra is not None:
                                g = g + extra
                        state.factors[k] = saved
                        return g

                    lam = _estimate_block_curvature(grad_at, state.factors[k], rng)
                    fresh = max(2.0 * lam, 1e-6)
                    # refresh recalibrates downward; rejected steps are what raise it
                    factor_steps[k] = fresh if factor_steps[k] is None else min(fresh, factor_steps[k])
                factor_steps[k], phi_now = _safeguarded_factor_step(
                    state, config, k, factor_steps[k], extra_grad_fn, extra_objective, phi_now
                )
            steps[f"V{k}"] = frobenius_norm(state.factors[k] - old)
            notify(f"factor:{k}")

        if extra_blocks is not None:
            extra_blocks(state)
            phi_now = _phi(state, config, extra_objective)
            notify("extra")

        old_core = state.core
        if config.prox_core is not None:
            cand = update_core(state, config, config.prox_core)
            state.core = post_core(cand) if post_core is not None else cand
        else:
            if refresh or core_step is None:
                def core_grad_at(g):
                    saved = state.core
                    state.core = g
                    out = grad_lagrangian_wrt(state, config, "G")
                    state.core = saved
                    return out

                lam = _estimate_block_curvature(core_grad_at, state.core, rng)
                fresh = max(2.0 * lam, 1e-6)
                core_step = fresh if core_step is None else min(fresh, core_step)
            core_step, phi_now = _safeguarded_core_step(
                state, config, core_step, post_core, extra_objective, phi_now
            )
        steps["G"] = frobenius_norm(state.core - old_core)
        notify("core")

        for k in range(order):
            state.last_steps[f"V{k}"] = (
                user_factor_steps[k] if user_factor_steps[k] is not None else factor_steps[k]
            )
        state.last_steps["G"] = config.prox_core if config.prox_core is not None else core_step

        old_recon = state.recon
        state.recon = update_recon(state)
        steps["Z"] = frobenius_norm(state.recon - old_recon)
        notify("recon")

        state.dual_tensor, state.dual_factors = update_duals(state, config)
        notify("duals")

        state.check_finite()
        trace.records.append(
            _trace_row(state, config, truth_internal, eval_support, scale, steps, extra_objective)
        )
        notify("iter_end")

        if config.refresh_similarity_every and it % config.refresh_similarity_every == 0:
            state.sims = [build_similarity(state.estimate, k) for k in range(order)]

        denom = max(frobenius_norm(prev_recon), np.finfo(float).tiny)
        rel = frobenius_norm(state.recon - prev_recon) / denom
        prev_recon = state.recon.copy()
        if rel < config.tol_rel:
            break

    return trace


def solve(
    x: Array,
    mask: ObservationMask,
    sims=None,
    config: SolverConfig | None = None,
    truth: Array | None = None,
    monitor=None,
) -> SolveResult:
    """Complete and decompose ``x`` given the observed cells in ``mask``.

    Returns the Tucker model, the completed tensor (the metric-completion
    estimate with observed cells copied bit-exactly from the data), the
    factor-derived metric family and the per-iteration trace.  When
    ``truth`` is supplied, trace fit/rse measure the completion against it
    on the held-out cells; otherwise they are in-sample model fits.
    """
    if config is None or not config.ranks:
        raise ValueError("config with explicit ranks is required")
    x = as_tensor(x, "data")
    state, scale = _initial_state(x, mask, sims, config)
    trace = run_loop(state, config, scale=scale, truth=truth, monitor=monitor)

    completed = state.estimate * scale
    completed[state.mask_bool] = x[state.mask_bool]
    model = TuckerModel(core=state.core * scale, factors=[v.copy() for v in state.factors])
    return SolveResult(
        model=model,
        completed=completed,
        metric=state.metric_family(),
        trace=trace,
        state=state,
        scale=scale,
    )
