"""Command-line interface.

Subcommands: ``complete`` (masked tensor -> completed tensor + model +
trace), ``decompose`` (fully observed), ``coupled`` (simulation spec ->
joint factorization results), ``simulate`` (write a synthetic coupled
instance to files), ``gradcheck`` (finite-difference suites), ``eval``
(fit/rse between two tensor files).

Exit codes: 0 success, 1 usage or input-format error, 2 numeric failure.
Option precedence: command-line flags > ``--config`` file > defaults; the
config file is line-oriented ``key = value`` with the same names as the
long flags (dashes or underscores).
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import io as tio
from .core import ObservationMask, TuckerModel
from .coupled import (
    create_coupled,
    parse_simulation_spec,
    run_coupled_experiment,
)
from .evaluate import EvalReport, fit, mask_random, rse
from .gradcheck import run_suite
from .kempf_ness import ConditioningError, RankDeficiencyError, normalize_coordinates, stationarity_gaps
from .metric import SimilarityMatrices, psd_floor
from .prox import KINDS, Penalty
from .solver import NumericError, SolverConfig, solve

GRAD_TOL = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise UsageError(message)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _parse_penalty(text: str) -> Penalty:
    if ":" in text:
        kind, weight = text.split(":", 1)
        return Penalty(kind=kind.strip(), weight=float(weight))
    if text.strip() not in KINDS:
        raise UsageError(f"penalty must be kind or kind:weight, got {text!r}")
    return Penalty(kind=text.strip())


def _load_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"config line must be 'key = value', got {raw.rstrip()!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.replace("-", "_").lower()] = value
    return out


_CONFIG_KEYS = {
    "ranks": str, "iters": int, "tol": float, "rho": float, "lambda": str,
    "seed": int, "core_penalty": str, "factor_penalty": str, "loss_support": str,
    "refresh_similarity": int, "coupling_weight": float, "estimate_solver": str,
    "estimate_cg_iters": int, "observe_rate": float, "mask_seed": int, "seeds": int,
}


def _merge_config(args: argparse.Namespace) -> None:
    """Fill unset options from the --config file (explicit flags win)."""
    if not getattr(args, "config", None):
        return
    file_vals = _load_config_file(args.config)
    for key, value in file_vals.items():
        if key not in _CONFIG_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        dest = {"lambda": "lambda_"}.get(key, key)
        if not hasattr(args, dest):
            continue
        if getattr(args, dest) is None:
            caster = _CONFIG_KEYS[key]
            setattr(args, dest, value if caster is str else caster(value))


def _solver_config(args, order: int) -> SolverConfig:
    lambdas: tuple[float, ...] | float = 0.1
    if args.lambda_ is not None:
        parts = [float(v) for v in str(args.lambda_).replace(",", " ").split()]
        lambdas = parts[0] if len(parts) == 1 else tuple(parts)
    return SolverConfig(
        ranks=_parse_ints(args.ranks),
        lambdas=lambdas,
        rho=args.rho if args.rho is not None else 1.0,
        core_penalty=_parse_penalty(args.core_penalty) if args.core_penalty else Penalty(),
        factor_penalties=_parse_penalty(args.factor_penalty) if args.factor_penalty else Penalty(),
        max_iters=args.iters if args.iters is not None else 50,
        tol_rel=args.tol if args.tol is not None else 1e-5,
        seed=args.seed if args.seed is not None else 0,
        refresh_similarity_every=args.refresh_similarity,
        loss_support=args.loss_support or "observed",
        normalize_scale=not args.no_normalize,
        coupling_weight=args.coupling_weight if args.coupling_weight is not None else 1.0,
        estimate_solver=args.estimate_solver or "cg",
        estimate_cg_iters=args.estimate_cg_iters if args.estimate_cg_iters is not None else 100,
    )


def _load_sims(arg: str | None, dims) -> SimilarityMatrices | None:
    if not arg:
        return None
    mats = []
    for path in arg.split(","):
        mat = tio.load_tensor(path.strip())
        if mat.ndim != 2:
            raise UsageError(f"similarity file {path} is not a matrix")
        mats.append(psd_floor(0.5 * (mat + mat.T), 0.0))
    return SimilarityMatrices(mats)


def _save_model(outdir: str, model: TuckerModel) -> None:
    tio.save_tensor(os.path.join(outdir, "core.dtns"), model.core)
    for k, f in enumerate(model.factors):
        tio.save_tensor(os.path.join(outdir, f"factor{k}.dtns"), f)


def _add_solver_flags(p: _Parser) -> None:
    p.add_argument("--ranks", required=True, help="core size per mode, e.g. 3,3,3")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--lambda", dest="lambda_", default=None,
                   help="similarity weight(s), scalar or per-mode list")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--core-penalty", default=None, help="kind or kind:weight")
    p.add_argument("--factor-penalty", default=None, help="kind or kind:weight")
    p.add_argument("--loss-support", choices=("observed", "all"), default=None)
    p.add_argument("--refresh-similarity", type=int, nargs="?", const=5, default=None,
                   help="rebuild similarity matrices every N iterations (default 5 when enabled)")
    p.add_argument("--coupling-weight", type=float, default=None)
    p.add_argument("--estimate-solver", choices=("cg", "gradient"), default=None)
    p.add_argument("--estimate-cg-iters", type=int, default=None)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--sims", default=None, help="comma-separated similarity matrix files")
    p.add_argument("--config", default=None, help="key = value config file")


def _build_parser() -> _Parser:
    parser = _Parser(prog="tenrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("complete", parents=[], help="complete a masked tensor")
    p.add_argument("--tensor", required=True)
    p.add_argument("--mask", default=None, help="DMSK file of observed cells")
    p.add_argument("--observe-rate", type=float, default=None,
                   help="generate a random mask at this rate instead of --mask")
    p.add_argument("--mask-seed", type=int, default=None)
    p.add_argument("--truth", default=None, help="fully observed reference for trace fit/rse")
    p.add_argument("--out", required=True)
    _add_solver_flags(p)

    p = sub.add_parser("decompose", help="decompose a fully observed tensor")
    p.add_argument("--tensor", required=True)
    p.add_argument("--out", required=True)
    _add_solver_flags(p)

    p = sub.add_parser("coupled", help="joint tensor-matrix factorization of a simulated instance")
    p.add_argument("--spec", required=True, help="simulation spec file")
    p.add_argument("--seeds", type=int, default=None, help="number of seeds, starting at the spec's")
    p.add_argument("--dense-core", action="store_true", help="keep a dense core (no CP structure)")
    p.add_argument("--out", required=True)
    _add_solver_flags(p)

    p = sub.add_parser("simulate", help="write a synthetic coupled instance to files")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--kempf-ness", action="store_true",
                   help="also check normalization stationarity")

    p = sub.add_parser("eval", help="fit/rse between two tensor files")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--support", choices=("all", "observed", "missing"), default="all")
    return parser


def _cmd_complete(args) -> int:
    x = tio.load_tensor(args.tensor)
    if args.mask:
        mask = tio.load_mask(args.mask)
    elif args.observe_rate is not None:
        mask = mask_random(x.shape, args.observe_rate,
                           args.mask_seed if args.mask_seed is not None else 0)
    else:
        raise UsageError("complete needs --mask or --observe-rate")
    config = _solver_config(args, x.ndim)
    sims = _load_sims(args.sims, x.shape)
    truth = tio.load_tensor(args.truth) if args.truth else None

    started = time.time()
    result = solve(x, mask, sims=sims, config=config, truth=truth)
    elapsed = time.time() - started

    os.makedirs(args.out, exist_ok=True)
    tio.save_tensor(os.path.join(args.out, "completed.dtns"), result.completed)
    _save_model(args.out, result.model)
    result.trace.save_csv(os.path.join(args.out, "trace.csv"))

    last = result.trace.records[-1]
    n_obs = len(mask)
    total = int(np.prod(x.shape))
    report = EvalReport(fit=last.fit, rse=last.rse, n_observed=n_obs,
                        n_missing=total - n_obs, wall_time=elapsed,
                        iters=last.iteration)
    print("\n".join(report.lines()))
    return 0


def _cmd_decompose(args) -> int:
    x = tio.load_tensor(args.tensor)
    mask = ObservationMask.all_cells(x.shape)
    config = _solver_config(args, x.ndim)
    sims = _load_sims(args.sims, x.shape)

    started = time.time()
    result = solve(x, mask, sims=sims, config=config)
    elapsed = time.time() - started

    os.makedirs(args.out, exist_ok=True)
    _save_model(args.out, result.model)
    result.trace.save_csv(os.path.join(args.out, "trace.csv"))
    recon = result.model_reconstruction()
    tio.save_tensor(os.path.join(args.out, "reconstruction.dtns"), recon)

    report = EvalReport(fit=fit(x, recon), rse=rse(x, recon),
                        n_observed=int(np.prod(x.shape)), n_missing=0,
                        wall_time=elapsed, iters=result.trace.records[-1].iteration)
    print("\n".join(report.lines()))
    return 0


def _cmd_coupled(args) -> int:
    with open(args.spec) as fh:
        spec = parse_simulation_spec(fh.read())
    n_seeds = args.seeds if args.seeds is not None else 1
    base_seed = spec["seed"]

    os.makedirs(args.out, exist_ok=True)
    config = _solver_config(args, len(spec["modes"][0]))
    rows = run_coupled_experiment(
        spec["sizes"], spec["modes"], spec["noise"], spec["rank"],
        seeds=range(base_seed, base_seed + n_seeds), config=config,
        cp_core=not args.dense_core,
    )

    path = os.path.join(args.out, "results.csv")
    with open(path, "w") as fh:
        fh.write("seed,avg_err,congruence,iters\n")
        for seed, err, cong, iters in rows:
            fh.write("%d,%.17g,%.17g,%d\n" % (seed, err, cong, iters))
    errs = [r[1] for r in rows]
    congs = [r[2] for r in rows]
    print(f"seeds={len(rows)}")
    print(f"mean_avg_err={np.mean(errs):.6f}")
    print(f"mean_congruence={np.mean(congs):.6f}")
    return 0


def _cmd_simulate(args) -> int:
    with open(args.spec) as fh:
        spec = parse_simulation_spec(fh.read())
    problem = create_coupled(spec["sizes"], spec["modes"], spec["noise"], spec["seed"],
                             rank=spec["rank"])
    os.makedirs(args.out, exist_ok=True)
    tio.save_tensor(os.path.join(args.out, "tensor.dtns"), problem.tensor)
    for i, c in enumerate(problem.couplings):
        tio.save_tensor(os.path.join(args.out, f"matrix{i}.dtns"), c.matrix)
    for i, f in enumerate(problem.truth_factors):
        tio.save_tensor(os.path.join(args.out, f"truth_factor{i}.dtns"), f)
    tio.save_mask(os.path.join(args.out, "mask.dmsk"), problem.mask)
    print(f"tensor_shape={'x'.join(str(d) for d in problem.tensor.shape)}")
    print(f"couplings={len(problem.couplings)}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = run_suite(seed=args.seed, instances=args.instances)
    failed = False
    for name in sorted(worst):
        status = "ok" if worst[name] <= GRAD_TOL else "FAIL"
        failed |= worst[name] > GRAD_TOL
        print(f"{name}: max_rel_err={worst[name]:.3e} [{status}]")
    if args.kempf_ness:
        rng = np.random.default_rng(args.seed)
        gap_worst = 0.0
        for _ in range(3):
            tensors = [rng.standard_normal((3, 3, 3))]
            res = normalize_coordinates(tensors, lam=1e-13, max_iters=400)
            gap_worst = max(gap_worst, max(stationarity_gaps(res.normalized)))
        status = "ok" if gap_worst <= GRAD_TOL else "FAIL"
        failed |= gap_worst > GRAD_TOL
        print(f"kempf-ness:stationarity: max_gap={gap_worst:.3e} [{status}]")
    return 2 if failed else 0


def _cmd_eval(args) -> int:
    ref = tio.load_tensor(args.ref)
    est = tio.load_tensor(args.est)
    support = None
    n_obs, n_missing = ref.size, 0
    if args.mask:
        mask = tio.load_mask(args.mask)
        bool_mask = mask.bool_mask(ref.shape)
        n_obs = int(bool_mask.sum())
        n_missing = ref.size - n_obs
        if args.support == "observed":
            support = bool_mask
        elif args.support == "missing":
            support = ~bool_mask
    elif args.support != "all":
        raise UsageError(f"--support {args.support} needs --mask")
    report = EvalReport(fit=fit(ref, est, support), rse=rse(ref, est, support),
                        n_observed=n_obs, n_missing=n_missing)
    print("\n".join(report.lines()))
    return 0


_COMMANDS = {
    "complete": _cmd_complete,
    "decompose": _cmd_decompose,
    "coupled": _cmd_coupled,
    "simulate": _cmd_simulate,
    "gradcheck": _cmd_gradcheck,
    "eval": _cmd_eval,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _merge_config(args)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (NumericError, RankDeficiencyError, ConditioningError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, tio.FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
