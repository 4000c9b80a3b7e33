import numpy as np
import numpy.testing as npt
import pytest

from tenrec.core import frobenius_norm, hosvd, tucker_reconstruct
from tenrec.coupled import (
    CoupledProblem,
    CoupledSolution,
    Coupling,
    coupled_solve,
    create_coupled,
    factor_congruence,
    parse_simulation_spec,
    reconstruction_error,
    solution_congruence,
)
from tenrec.core import ObservationMask, TuckerModel
from tenrec.solver import SolverConfig, solve


class TestCreateCoupled:
    def test_rank_one_noiseless_is_outer_product(self):
        p = create_coupled([5, 6, 7, 4], [[1, 2, 3], [1, 4]], noise=0.0, seed=2, rank=1)
        model = hosvd(p.tensor, (1, 1, 1))
        err = frobenius_norm(tucker_reconstruct(model) - p.tensor)
        assert err <= 1e-10 * frobenius_norm(p.tensor)

    def test_documented_shapes(self):
        p = create_coupled([20, 30, 40, 50], [[1, 2, 3], [1, 4]], noise=0.0, seed=0)
        assert p.tensor.shape == (20, 30, 40)
        assert p.couplings[0].matrix.shape == (20, 50)
        assert p.couplings[0].mode == 0

    def test_seed_determinism_is_bitwise(self):
        a = create_coupled([6, 7, 8, 5], [[1, 2, 3], [2, 4]], noise=0.3, seed=9)
        b = create_coupled([6, 7, 8, 5], [[1, 2, 3], [2, 4]], noise=0.3, seed=9)
        npt.assert_array_equal(a.tensor, b.tensor)
        npt.assert_array_equal(a.couplings[0].matrix, b.couplings[0].matrix)

    def test_multiple_couplings(self):
        p = create_coupled([8, 9, 10, 6, 5], [[1, 2, 3], [1, 4], [3, 5]],
                           noise=0.0, seed=1)
        assert len(p.couplings) == 2
        assert p.couplings[0].matrix.shape == (8, 6)
        assert p.couplings[1].matrix.shape == (10, 5)

    def test_unit_norm_factor_columns(self):
        p = create_coupled([6, 6, 6, 6], [[1, 2, 3], [1, 4]], noise=0.0, seed=4)
        for f in p.truth_factors:
            npt.assert_allclose(np.linalg.norm(f, axis=0), 1.0, rtol=1e-12)

    def test_inconsistent_modes_rejected(self):
        with pytest.raises(ValueError, match="not a tensor mode"):
            create_coupled([5, 5, 5, 5], [[1, 2, 3], [4, 4]], noise=0.0, seed=0)
        with pytest.raises(ValueError, match="used twice"):
            create_coupled([5, 5, 5, 5], [[1, 2, 3], [1, 3]], noise=0.0, seed=0)
        with pytest.raises(ValueError, match="out of range"):
            create_coupled([5, 5, 5], [[1, 2, 3], [1, 9]], noise=0.0, seed=0)

    def test_shared_dimension_validated(self, rng):
        with pytest.raises(ValueError, match="shared"):
            CoupledProblem(tensor=rng.standard_normal((3, 4, 5)),
                           couplings=[Coupling(matrix=rng.standard_normal((6, 2)), mode=0)],
                           mask=ObservationMask.all_cells((3, 4, 5)))


class TestFactorCongruence:
    def test_identical_factors(self, rng):
        f = rng.standard_normal((6, 3))
        assert factor_congruence(f, f) == pytest.approx(1.0)

    def test_permutation_and_sign_invariance(self, rng):
        f = rng.standard_normal((6, 3))
        shuffled = f[:, [2, 0, 1]] * np.array([-1.0, 1.0, -1.0])
        assert factor_congruence(shuffled, f) == pytest.approx(1.0)

    def test_orthogonal_estimate_scores_zero(self, rng):
        q = np.linalg.qr(rng.standard_normal((8, 8)))[0]
        truth, est = q[:, :3], q[:, 3:6]
        assert factor_congruence(est, truth) <= 1e-10

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            factor_congruence(rng.standard_normal((4, 2)), rng.standard_normal((4, 3)))


class TestReconstructionError:
    def _truth_solution(self, p):
        core = np.zeros((p.rank,) * p.tensor.ndim)
        idx = np.arange(p.rank)
        core[tuple(idx for _ in range(p.tensor.ndim))] = 1.0
        factors = [p.truth_factors[i].copy() for i in p.tensor_truth_indices]
        extras = [p.truth_factors[c.truth_index].copy() for c in p.couplings]
        model = TuckerModel(core=core, factors=factors)
        return CoupledSolution(tucker=model, extra_factors=extras,
                               trace=None, matrix_residuals=[[] for _ in p.couplings])

    def test_truth_built_solution_scores_zero(self):
        p = create_coupled([6, 7, 8, 5], [[1, 2, 3], [1, 4]], noise=0.0, seed=11)
        sol = self._truth_solution(p)
        assert reconstruction_error(sol, p) <= 1e-12
        assert solution_congruence(sol, p) == pytest.approx(1.0)

    def test_zero_solution_scores_one(self):
        p = create_coupled([6, 7, 8, 5], [[1, 2, 3], [1, 4]], noise=0.0, seed=12)
        sol = self._truth_solution(p)
        sol.tucker.core[...] = 0.0
        sol.extra_factors = [np.zeros_like(u) for u in sol.extra_factors]
        assert reconstruction_error(sol, p) == pytest.approx(1.0)

    def test_missing_ground_truth_rejected(self, rng):
        p = CoupledProblem(tensor=rng.standard_normal((3, 3, 3)), couplings=[],
                           mask=ObservationMask.all_cells((3, 3, 3)))
        sol = CoupledSolution(tucker=TuckerModel(core=np.zeros((1, 1, 1)),
                                                 factors=[np.zeros((3, 1))] * 3),
                              extra_factors=[], trace=None, matrix_residuals=[])
        with pytest.raises(ValueError, match="ground truth"):
            reconstruction_error(sol, p)


class TestCoupledSolve:
    def test_zero_weight_reduces_to_plain_solve(self):
        p = create_coupled([8, 9, 10, 7], [[1, 2, 3], [1, 4]], noise=0.0, seed=5, rank=2)
        config = SolverConfig(ranks=(2, 2, 2), seed=1, max_iters=6, tol_rel=0.0,
                              coupling_weight=0.0)
        sol = coupled_solve(p, config, cp_core=False)
        plain = solve(p.tensor, p.mask, config=config)
        for a, b in zip(sol.tucker.factors, plain.model.factors):
            npt.assert_array_equal(a, b)
        npt.assert_array_equal(sol.tucker.core, plain.model.core)
        assert sol.trace.to_csv() == plain.trace.to_csv()

    def test_noiseless_matrix_residual_small_at_convergence(self):
        p = create_coupled([20, 20, 20, 20], [[1, 2, 3], [1, 4]], noise=0.0, seed=3)
        config = SolverConfig(ranks=(3, 3, 3), seed=0, max_iters=200, tol_rel=1e-8,
                              lambdas=0.0, rho=1e-8)
        sol = coupled_solve(p, config)
        assert sol.matrix_residuals[0][-1] <= 1e-3

    def test_recorded_residual_matches_final_state(self):
        p = create_coupled([10, 10, 10, 8], [[1, 2, 3], [1, 4]], noise=0.0, seed=6)
        config = SolverConfig(ranks=(3, 3, 3), seed=0, max_iters=8, tol_rel=0.0)
        sol = coupled_solve(p, config)
        # the shared factor used for the matrix residual is the model's factor
        c = p.couplings[0]
        m = c.matrix / frobenius_norm(c.matrix)
        shared = sol.tucker.factors[c.mode]
        u = sol.extra_factors[0] / frobenius_norm(c.matrix)
        recomputed = frobenius_norm(m - shared @ u.T) / frobenius_norm(m)
        npt.assert_allclose(sol.matrix_residuals[0][-1], recomputed, rtol=1e-10)

    def test_joint_objective_monotone_per_block(self):
        # tensor loss + matrix loss + penalties + residual terms must not
        # increase across the factor, extra-factor and core blocks (duals
        # are fixed within an iteration)
        p = create_coupled([8, 8, 8, 6], [[1, 2, 3], [1, 4]], noise=0.0, seed=7)
        config = SolverConfig(ranks=(2, 2, 2), seed=0, max_iters=5, tol_rel=0.0)

        from tenrec.solver import penalty_value, smooth_objective

        m_int = p.couplings[0].matrix / frobenius_norm(p.couplings[0].matrix)

        def joint(st):
            val = smooth_objective(st, config) + penalty_value(st, config)
            u = st.extra_factors[0]
            diff = m_int - st.factors[p.couplings[0].mode] @ u.T
            return val + 0.5 * config.coupling_weight * float(np.sum(diff * diff))

        increases = []
        last = {"value": None}

        def monitor(event, st):
            if event == "metric":
                last["value"] = joint(st)
            elif event.startswith("factor") or event in ("extra", "core"):
                now = joint(st)
                increases.append(now - last["value"])
                last["value"] = now

        coupled_solve(p, config, monitor=monitor)
        assert increases and max(increases) <= 1e-8

    def test_determinism(self):
        p = create_coupled([8, 8, 8, 6], [[1, 2, 3], [1, 4]], noise=0.0, seed=8)
        config = SolverConfig(ranks=(2, 2, 2), seed=0, max_iters=5, tol_rel=0.0)
        a = coupled_solve(p, config)
        b = coupled_solve(p, config)
        npt.assert_array_equal(a.tucker.core, b.tucker.core)
        assert a.trace.to_csv() == b.trace.to_csv()

    def test_small_instance_recovers_factors(self):
        p = create_coupled([15, 15, 15, 12], [[1, 2, 3], [1, 4]], noise=0.0, seed=9)
        config = SolverConfig(ranks=(3, 3, 3), seed=0, max_iters=80, tol_rel=1e-8)
        sol = coupled_solve(p, config)
        assert reconstruction_error(sol, p) <= 0.1
        assert solution_congruence(sol, p) >= 0.9


class TestSimulationSpec:
    def test_parse_roundtrip(self):
        text = """
        # comment
        sizes: 20 30 40 50
        modes: [1 2 3], [1, 4]
        rank: 3
        noise: 0.25
        seed: 7
        """
        spec = parse_simulation_spec(text)
        assert spec["sizes"] == [20, 30, 40, 50]
        assert spec["modes"] == [[1, 2, 3], [1, 4]]
        assert spec["rank"] == 3
        assert spec["noise"] == 0.25
        assert spec["seed"] == 7

    def test_defaults(self):
        spec = parse_simulation_spec("sizes: 5 5 5\nmodes: [1 2 3]\n")
        assert spec["rank"] == 3 and spec["noise"] == 0.0 and spec["seed"] == 0

    def test_missing_required(self):
        with pytest.raises(ValueError, match="missing"):
            parse_simulation_spec("rank: 2\n")

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            parse_simulation_spec("sizes: 2\nmodes: [1]\nfoo: bar\n")
