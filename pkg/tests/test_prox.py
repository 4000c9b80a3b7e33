import numpy as np
import numpy.testing as npt
import pytest

from tenrec.prox import KINDS, Penalty, prox

from oracles import prox_by_grid


def test_none_is_identity(rng):
    u = rng.standard_normal((3, 4))
    npt.assert_array_equal(prox(Penalty("none"), u, 2.0), u)


def test_l1_scalar_examples():
    # threshold weight/t = 1
    assert prox(Penalty("l1", 1.0), np.array(3.0), 1.0) == pytest.approx(2.0)
    assert prox(Penalty("l1", 1.0), np.array(0.5), 1.0) == pytest.approx(0.0)
    assert prox(Penalty("l1", 1.0), np.array(-3.0), 1.0) == pytest.approx(-2.0)


def test_l2_squared_scales():
    u = np.array([2.0, -4.0])
    out = prox(Penalty("l2_squared", 3.0), u, 2.0)
    npt.assert_allclose(out, u * 2.0 / (2.0 + 6.0))


def test_nuclear_on_diagonal():
    out = prox(Penalty("nuclear", 2.0), np.diag([3.0, 1.0]), 1.0)
    npt.assert_allclose(out, np.diag([1.0, 0.0]), atol=1e-12)


def test_nuclear_reduces_rank(rng):
    u, s, vh = np.linalg.svd(rng.standard_normal((5, 4)), full_matrices=False)
    mat = (u * np.array([3.0, 2.0, 0.5, 0.1])) @ vh
    out = prox(Penalty("nuclear", 1.0), mat, 1.0)
    assert np.linalg.matrix_rank(out, tol=1e-8) == 2


def test_invalid_kind_and_weight():
    with pytest.raises(ValueError, match="unknown penalty kind"):
        Penalty("ridge")
    with pytest.raises(ValueError, match=">= 0"):
        Penalty("l1", -1.0)
    with pytest.raises(ValueError, match="positive"):
        prox(Penalty("l1", 1.0), np.zeros(2), 0.0)


def test_values_are_nonnegative(rng):
    point = rng.standard_normal((4, 4))
    for kind in KINDS:
        assert Penalty(kind, 0.7).value(point) >= 0.0


@pytest.mark.parametrize("kind", ["none", "l1", "l2_squared"])
def test_prox_beats_grid_search_scalar(kind):
    gen = np.random.default_rng(42)
    for _ in range(100):
        u = float(gen.uniform(-5, 5))
        t = float(gen.uniform(0.1, 5.0))
        w = float(gen.uniform(0.0, 3.0))
        pen = Penalty(kind, w)
        out = float(prox(pen, np.array(u), t))
        my_val = pen.value(np.array(out)) + 0.5 * t * (out - u) ** 2
        _, grid_val = prox_by_grid(lambda v: pen.value(np.array(v)), u, t, -8.0, 8.0)
        assert my_val <= grid_val + 1e-9


def test_nuclear_prox_beats_grid_on_diagonal():
    # diagonal matrices make the nuclear norm separable across entries
    gen = np.random.default_rng(7)
    for _ in range(100):
        d = gen.uniform(-4, 4, size=2)
        t = float(gen.uniform(0.2, 4.0))
        w = float(gen.uniform(0.0, 2.0))
        pen = Penalty("nuclear", w)
        out = prox(pen, np.diag(d), t)
        my_val = pen.value(out) + 0.5 * t * float(np.sum((out - np.diag(d)) ** 2))
        best = 0.0
        for i, di in enumerate(d):
            _, val = prox_by_grid(lambda v: w * abs(v), float(di), t, -6.0, 6.0)
            best += val
        assert my_val <= best + 1e-9
