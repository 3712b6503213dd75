import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import PchipInterpolator

from flockcert.graph import GraphError, InteractionGraph, uniform_graph
from flockcert.kernel import (FunctionKernel, KernelError, PowerKernel, TableKernel, evaluate,
                              kernel_from_config, rate_matrix, rate_matrix_cs, rate_matrix_mt,
                              tail_integral)
from oracles import power_tail_integral


@pytest.mark.parametrize("beta, r, expected", [(2.0, 1.0, 0.5), (0.0, 7.3, 1.0), (1.0, math.sqrt(3), 0.5)])
def test_evaluate_examples(beta, r, expected):
    assert evaluate(PowerKernel(beta), r) == pytest.approx(expected, rel=1e-15)


def test_evaluate_rejects_negative_distance():
    with pytest.raises(KernelError):
        evaluate(PowerKernel(1.0), -0.1)


def test_tail_examples():
    assert tail_integral(PowerKernel(2.0), 0.0) == pytest.approx(math.pi / 2, rel=1e-12)
    assert tail_integral(PowerKernel(1.0), 0.0) == math.inf
    assert tail_integral(PowerKernel(0.5), 3.0) == math.inf
    assert tail_integral(PowerKernel(3.0), 0.0) == pytest.approx(1.0, rel=1e-12)


@given(st.floats(1.05, 6.0), st.floats(0.0, 200.0))
def test_tail_matches_incomplete_beta(beta, x0):
    assert tail_integral(PowerKernel(beta), x0) == pytest.approx(power_tail_integral(beta, x0), rel=1e-9)


def test_tail_beyond_cutoff():
    # x0 above the quadrature cutoff uses only the series
    for beta in (1.5, 2.0, 4.0):
        x0 = 3e4
        assert tail_integral(PowerKernel(beta), x0) == pytest.approx(power_tail_integral(beta, x0), rel=1e-10)


@given(st.floats(1.1, 4.0), st.floats(0.0, 50.0), st.floats(0.01, 10.0))
def test_tail_decreasing(beta, x0, dx):
    k = PowerKernel(beta)
    assert k.tail_integral(x0 + dx) <= k.tail_integral(x0)
    assert PowerKernel(beta + 0.1).tail_integral(x0) <= k.tail_integral(x0)


@given(st.floats(0.0, 4.0), st.floats(0.0, 100.0), st.floats(0.0, 100.0))
def test_power_kernel_non_increasing(beta, r1, r2):
    k = PowerKernel(beta)
    lo, hi = sorted((r1, r2))
    assert 0 < k(hi) <= k(lo) <= 1


def test_power_kernel_rejects_negative_beta():
    with pytest.raises(KernelError):
        PowerKernel(-1.0)


def test_table_kernel_interpolates_and_extends():
    r = np.linspace(0, 5, 11)
    k = TableKernel(r, (1 + r ** 2) ** -1.0, "finite", tail_beta=2.0)
    assert k(2.5) == pytest.approx((1 + 2.5 ** 2) ** -1.0, rel=1e-12)
    # the tail continues the power law exactly
    assert k(40.0) == pytest.approx((1 + 1600.0) ** -1.0, rel=1e-12)
    # head by the interpolant's own antiderivative, tail by arctan
    head = PchipInterpolator(r, (1 + r ** 2) ** -1.0).integrate(0.0, 5.0)
    assert k.tail_integral(0.0) == pytest.approx(head + math.pi / 2 - math.atan(5.0), rel=1e-10)
    assert k.tail_integral(8.0) == pytest.approx(math.pi / 2 - math.atan(8.0), rel=1e-10)


def test_table_kernel_validation():
    with pytest.raises(KernelError):
        TableKernel([0, 1], [1.0, 1.5], "finite")
    with pytest.raises(KernelError):
        TableKernel([0.5, 1], [1.0, 0.5], "finite")
    with pytest.raises(KernelError):
        TableKernel([0, 1], [1.2, 0.5], "finite")
    with pytest.raises(KernelError):
        TableKernel([0, 1], [1.0, 0.5], "finite", tail_beta=0.8)
    with pytest.raises(KernelError):
        TableKernel([0, 1], [1.0, 0.5], "sometimes")


def test_table_infinite_tail():
    k = TableKernel([0, 1, 2], [1.0, 0.8, 0.5], "infinite")
    assert k.tail_integral(1.0) == math.inf


def test_function_kernel_needs_tail_flag():
    k = FunctionKernel(lambda r: math.exp(-r))
    with pytest.raises(KernelError):
        k.tail_integral(0.0)
    k2 = FunctionKernel(lambda r: math.exp(-r), tail_finite=True)
    assert k2.tail_integral(1.0) == pytest.approx(math.exp(-1.0), rel=1e-9)


def test_function_kernel_rejects_psi0_above_one():
    with pytest.raises(KernelError):
        FunctionKernel(lambda r: 2.0, tail_finite=False)


def test_kernel_config_roundtrip():
    for k in (PowerKernel(1.3), TableKernel([0, 1, 3], [1.0, 0.5, 0.2], "finite", 3.0)):
        k2 = kernel_from_config(k.to_config())
        np.testing.assert_allclose(k2(np.linspace(0, 10, 7)), k(np.linspace(0, 10, 7)), rtol=1e-15)
    with pytest.raises(KernelError):
        kernel_from_config({"type": "gaussian"})


# --- rate matrices ------------------------------------------------------------

def test_cs_equal_positions():
    A = np.array([[0, 2.0, 1.0], [0.5, 0, 0], [1.0, 1.0, 0]])
    Q = rate_matrix_cs(InteractionGraph(A), PowerKernel(1.7), np.ones((3, 2)), 1.0).Q
    off = ~np.eye(3, dtype=bool)
    np.testing.assert_array_equal(Q[off], A[off])


def test_cs_two_agents():
    g = InteractionGraph(np.array([[0, 1.0], [0, 0]]), [0, 1.0])
    Q = rate_matrix_cs(g, PowerKernel(2.0), np.array([[0.0], [1.0]]), 1.0).Q
    assert Q[0, 1] == 0.5 and Q[0, 0] == -0.5


def scalar_rates(A, a, x, beta, model):
    n = A.shape[0]
    Q = np.zeros((n, n))
    for i in range(n):
        den = a[i] + sum(A[i, k] * (1 + np.sum((x[i] - x[k]) ** 2)) ** (-beta / 2) for k in range(n) if k != i)
        for j in range(n):
            if j != i:
                w = A[i, j] * (1 + np.sum((x[i] - x[j]) ** 2)) ** (-beta / 2)
                Q[i, j] = w if model == "CS" else w / den
        Q[i, i] = -Q[i].sum()
    return Q


@pytest.mark.parametrize("model", ["CS", "MT"])
@pytest.mark.parametrize("seed", range(3))
def test_rates_match_scalar_formula(model, seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 2, (4, 4)) * (rng.random((4, 4)) < 0.7)
    np.fill_diagonal(A, 0)
    a = rng.uniform(0.1, 1, 4)
    x = rng.normal(size=(4, 3))
    g = InteractionGraph(A, a)
    Q = rate_matrix(g, PowerKernel(1.3), x, 2.0, model).Q
    np.testing.assert_allclose(Q, scalar_rates(A, a, x, 1.3, model), rtol=1e-13, atol=1e-15)


def test_mt_single_edge_no_offset():
    g = InteractionGraph(np.array([[0, 0, 3.0], [1.0, 0, 0], [0, 1, 0]]))
    Q = rate_matrix_mt(g, PowerKernel(2.0), np.array([[0.0], [5.0], [17.0]]), 1.0).Q
    assert Q[0, 2] == pytest.approx(1.0, rel=1e-15)


@pytest.mark.parametrize("n", [2, 5])
def test_mt_uniform_equal_positions(n):
    g = InteractionGraph(uniform_graph(n).weights, np.full(n, 1 / n))
    Q = rate_matrix_mt(g, PowerKernel(0.7), np.zeros((n, 1)), 1.0).Q
    np.testing.assert_allclose(Q[~np.eye(n, dtype=bool)], 1 / n, rtol=1e-14)


def test_mt_rejects_zero_denominator():
    g = InteractionGraph(np.array([[0, 0], [1.0, 0]]))
    with pytest.raises(GraphError):
        rate_matrix_mt(g, PowerKernel(1.0), np.zeros((2, 1)), 1.0)


@st.composite
def instances(draw):
    n = draw(st.integers(2, 6))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 2, (n, n)) * (rng.random((n, n)) < 0.6)
    np.fill_diagonal(A, 0)
    a = np.where(A.sum(axis=1) == 0, 1.0, rng.uniform(0, 1, n))
    x = rng.normal(size=(n, 2)) * draw(st.floats(0.1, 10))
    return InteractionGraph(A, a), x, draw(st.floats(0, 3))


@given(instances(), st.sampled_from(["CS", "MT"]))
def test_rate_matrix_invariants(inst, model):
    g, x, beta = inst
    Q = rate_matrix(g, PowerKernel(beta), x, 1.0, model).Q
    off = ~np.eye(g.n, dtype=bool)
    assert np.all(Q[off] >= 0)
    assert np.all(np.abs(Q.sum(axis=1)) <= 1e-12 * max(1, np.abs(Q).max()))
    np.testing.assert_array_equal(Q[off] > 0, g.weights[off] > 0)
    if model == "MT":
        rs = Q[off].reshape(g.n, g.n - 1).sum(axis=1)
        assert np.all(rs <= 1 + 1e-14)


@given(instances(), st.floats(0.0, 1.0))
def test_cs_shrinking_distances_never_decreases_rates(inst, shrink):
    g, x, beta = inst
    k = PowerKernel(beta)
    Q1 = rate_matrix_cs(g, k, x, 1.0).Q
    Q2 = rate_matrix_cs(g, k, shrink * x, 1.0).Q
    off = ~np.eye(g.n, dtype=bool)
    assert np.all(Q2[off] >= Q1[off] * (1 - 1e-14))
