import numpy as np
import numpy.testing as npt
import pytest

from tenrec.evaluate import EvalReport, fit, mask_random, rse


class TestFit:
    def test_perfect(self, rng):
        x = rng.standard_normal((3, 4))
        assert fit(x, x) == pytest.approx(1.0)

    def test_zero_estimate(self, rng):
        x = rng.standard_normal((3, 4))
        assert fit(x, np.zeros_like(x)) == pytest.approx(0.0)

    def test_double_estimate(self, rng):
        x = rng.standard_normal((3, 4))
        assert fit(x, 2 * x) == pytest.approx(0.0)

    def test_support_restriction(self, rng):
        x = rng.standard_normal((4, 4))
        est = x.copy()
        est[0, 0] += 10.0
        support = np.ones_like(x, dtype=bool)
        support[0, 0] = False
        assert fit(x, est, support) == pytest.approx(1.0)
        assert fit(x, est) < 1.0

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError, match="zero norm"):
            fit(np.zeros((2, 2)), np.ones((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            fit(np.zeros((2, 2)), np.zeros((2, 3)))


class TestRse:
    def test_identical(self, rng):
        x = rng.standard_normal((3, 3))
        assert rse(x, x) == pytest.approx(0.0)

    def test_constant_offset(self, rng):
        x = rng.standard_normal((3, 5))
        assert rse(x, x + 0.7) == pytest.approx(0.7)

    def test_matches_loop_oracle(self, rng):
        x, y = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        acc = sum((float(a) - float(b)) ** 2 for a, b in zip(x.ravel(), y.ravel()))
        npt.assert_allclose(rse(x, y), np.sqrt(acc / 12), rtol=1e-12)

    def test_empty_support_rejected(self, rng):
        x = rng.standard_normal((2, 2))
        with pytest.raises(ValueError, match="empty"):
            rse(x, x, np.zeros_like(x, dtype=bool))

    def test_fit_one_iff_rse_zero(self, rng):
        x = rng.standard_normal((3, 3))
        sel = rng.random((3, 3)) < 0.5
        sel[0, 0] = True
        est = x.copy()
        assert fit(x, est, sel) == pytest.approx(1.0)
        assert rse(x, est, sel) == pytest.approx(0.0)


class TestMaskRandom:
    def test_full_rate_takes_every_cell(self):
        mask = mask_random((3, 4), 1.0, seed=0)
        assert len(mask) == 12

    def test_count_follows_ceiling_convention(self):
        # e.g. 15% observed of a 192x192x8x19 tensor
        dims = (192, 192, 8, 19)
        mask = mask_random(dims, 0.15, seed=1)
        assert len(mask) == int(np.ceil(0.15 * np.prod(dims)))

    def test_seed_determinism(self):
        a = mask_random((5, 6, 7), 0.3, seed=11)
        b = mask_random((5, 6, 7), 0.3, seed=11)
        npt.assert_array_equal(a.idx, b.idx)

    def test_different_seeds_differ(self):
        a = mask_random((5, 6, 7), 0.3, seed=11)
        b = mask_random((5, 6, 7), 0.3, seed=12)
        assert not np.array_equal(a.idx, b.idx)

    def test_no_duplicates_in_bounds(self):
        mask = mask_random((4, 4, 4), 0.5, seed=3)
        mask.validate_dims((4, 4, 4))  # raises on any violation

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError, match="rate"):
            mask_random((3, 3), 0.0, seed=0)
        with pytest.raises(ValueError, match="rate"):
            mask_random((3, 3), 1.2, seed=0)


class TestEvalReport:
    def test_line_format(self):
        report = EvalReport(fit=1.0, rse=0.0, n_observed=10, n_missing=2,
                            wall_time=0.5, iters=7)
        lines = report.lines()
        assert lines[0] == "fit=1.000000"
        assert lines[1] == "rse=0.000000"
        assert "n_observed=10" in lines
        assert "iters=7" in lines
