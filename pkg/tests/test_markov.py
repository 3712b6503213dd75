import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.special import gammaincc

from flockcert.dynamics import AgentState, simulate
from flockcert.graph import (InteractionGraph, chain_graph, cycle_graph, height, structural_constants,
                             uniform_graph)
from flockcert.kernel import PowerKernel
from flockcert.markov import (JumpPath, contraction_check, dobrushin, ergodicity_bounds, gamma_tail,
                              mc_velocity_estimate, sample_jump_paths, sample_jump_process,
                              solve_transition, write_paths_csv)
from oracles import dobrushin_loops


def run(g, beta, model, s0, T, dt, alpha=1.0):
    k = PowerKernel(beta)
    tr = simulate(g, k, model, alpha, s0, T, dt)
    return tr, solve_transition(tr, g, k, model)


def random_instance(seed, n=None, model=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 7))
    A = rng.uniform(0.2, 2, (n, n)) * (rng.random((n, n)) < 0.6)
    np.fill_diagonal(A, 0)
    a = rng.uniform(0.1, 1, n)
    d = int(rng.integers(1, 4))
    s0 = AgentState(0, rng.normal(size=(n, d)), rng.normal(size=(n, d)))
    return InteractionGraph(A, a), s0, float(rng.choice([0.5, 1.0, 2.0])), model or str(rng.choice(["CS", "MT"]))


# --- transition function ------------------------------------------------------------

def test_zero_generator_identity():
    g = InteractionGraph(np.zeros((3, 3)), np.ones(3))
    s0 = AgentState(0, np.arange(3.0)[:, None], np.array([[1.0], [2.0], [-1.0]]))
    for model in ("CS", "MT"):
        tr, tf = run(g, 1.0, model, s0, 1.0, 0.1)
        assert np.all(tf.P == np.eye(3))
        assert tf.duality_gap() == 0.0


def test_two_agent_matches_expm():
    g = InteractionGraph(np.array([[0, 1.0], [1.0, 0]]))
    s0 = AgentState(0, [[0.0], [3.0]], [[1.0], [-1.0]])
    tr, tf = run(g, 0.0, "CS", s0, 2.0, 1e-2)
    L = np.array([[-1.0, 1.0], [1.0, -1.0]])
    for k in (0, 50, 123, tr.times.size - 1):
        t = tr.times[k]
        ref = 0.5 * np.array([[1 + math.exp(-2 * t), 1 - math.exp(-2 * t)],
                              [1 - math.exp(-2 * t), 1 + math.exp(-2 * t)]])
        np.testing.assert_allclose(tf.at(k), ref, atol=1e-10)
        np.testing.assert_allclose(tf.at(k), expm(t * L), atol=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_duality_and_stochasticity(seed):
    g, s0, beta, model = random_instance(seed)
    tr, tf = run(g, beta, model, s0, 2.0, 1e-2)
    assert tf.duality_gap() <= 1e-7
    assert np.all(np.abs(tf.P.sum(axis=2) - 1) <= 1e-9)
    assert np.all(tf.P >= -1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_semigroup(seed):
    g, s0, beta, model = random_instance(100 + seed)
    tr, tf = run(g, beta, model, s0, 1.0, 1e-2)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        s, u, t = np.sort(rng.integers(0, tr.times.size, 3))
        np.testing.assert_allclose(tf.between(s, t), tf.between(u, t) @ tf.between(s, u), atol=1e-7)
        np.testing.assert_allclose(tf.at(t), tf.between(s, t) @ tf.at(s), atol=1e-7)


def test_uncached_steps_agree():
    g, s0, beta, model = random_instance(7)
    tr, tf = run(g, beta, model, s0, 0.5, 1e-2)
    bare = type(tf)(tf.times, tf.P, tf.alpha, tr, (g, PowerKernel(beta), model), None)
    np.testing.assert_allclose(bare.between(3, 40), tf.between(3, 40), rtol=0, atol=1e-15)


def test_solve_transition_rejects_mismatch():
    g, s0, beta, model = random_instance(3, model="CS")
    tr = simulate(g, PowerKernel(beta), "CS", 1.0, s0, 0.2, 0.05)
    with pytest.raises(ValueError):
        solve_transition(tr, g, PowerKernel(beta), "MT")
    with pytest.raises(ValueError):
        solve_transition(tr, g, PowerKernel(beta), "CS", alpha=2.0)


# --- Dobrushin coefficient ------------------------------------------------------------

def test_dobrushin_examples():
    assert dobrushin(np.eye(3)) == 0.0
    assert dobrushin(np.tile([0.2, 0.5, 0.3], (3, 1))) == pytest.approx(1.0)
    assert dobrushin([[0.7, 0.3], [0.2, 0.8]]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        dobrushin([[0.7, 0.4], [0.2, 0.8]])


@given(st.integers(2, 7), st.integers(0, 2 ** 32 - 1))
def test_dobrushin_matches_loops(n, seed):
    P = np.random.default_rng(seed).dirichlet(np.full(n, 0.5), size=n)
    assert dobrushin(P) == pytest.approx(dobrushin_loops(P), abs=1e-15)


# --- contraction --------------------------------------------------------------------

@pytest.mark.parametrize("g", [uniform_graph(4), chain_graph(3), cycle_graph(4)])
def test_contraction_holds(g):
    rng = np.random.default_rng(2)
    s0 = AgentState(0, rng.normal(size=(g.n, 2)), rng.normal(size=(g.n, 2)))
    tr, tf = run(g, 1.0, "CS", s0, 3.0, 1e-2)
    rep = contraction_check(tf, tr, n_pairs=60, seed=1)
    assert rep.ok
    diag = contraction_check(tf, tr, pairs=[(5, 5), (17, 17)])
    np.testing.assert_allclose(diag.slack, diag.tolerance, rtol=0, atol=1e-14 * tr.V[0])


def test_contraction_uniform_long_gap():
    rng = np.random.default_rng(0)
    g = uniform_graph(5, weight=1.0)
    s0 = AgentState(0, rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
    tr, tf = run(g, 1.0, "CS", s0, 4.0, 1e-2)
    mu = dobrushin(tf.between(0, tr.times.size - 1))
    assert 1 - mu < 1e-3 and tr.V[-1] < 1e-3 * tr.V[0]


# --- jump sampler -------------------------------------------------------------------

def test_zero_generator_never_jumps():
    g = InteractionGraph(np.zeros((2, 2)), np.ones(2))
    tr = simulate(g, PowerKernel(1.0), "MT", 1.0, AgentState(0, np.zeros((2, 1)), [[1.0], [0.0]]), 1.0, 0.1)
    p = sample_jump_process(tr, g, PowerKernel(1.0), "MT", None, 1, 1.0, seed=0)
    assert p.n_jumps == 0 and p.final_state == 1 and p.times[-1] == math.inf


def test_first_jump_exponential():
    q = 1.7
    g = InteractionGraph(np.array([[0, q], [0, 0]]), [0, 1.0])
    s0 = AgentState(0, [[0.0], [1.0]], [[0.0], [0.0]])
    T = 30.0
    tr = simulate(g, PowerKernel(0.0), "CS", 1.0, s0, T, 0.05)
    paths = sample_jump_paths(tr, g, PowerKernel(0.0), "CS", None, 0, T, 100_000, seed=3)
    J1 = np.array([p.times[1] for p in paths])
    assert np.all(np.isfinite(J1))
    se = J1.std(ddof=1) / math.sqrt(J1.size)
    assert abs(J1.mean() - 1 / q) <= 3 * se


def test_hierarchical_paths_absorbed():
    g = chain_graph(5)
    _, H = height(g)
    rng = np.random.default_rng(0)
    s0 = AgentState(0, rng.normal(size=(5, 1)), rng.normal(size=(5, 1)))
    T = 40.0
    tr = simulate(g, PowerKernel(1.0), "CS", 1.0, s0, T, 0.05)
    paths = sample_jump_paths(tr, g, PowerKernel(1.0), "CS", None, 4, T, 2000, seed=1)
    for p in paths:
        assert p.n_jumps <= H
        assert np.all(np.diff(p.states) < 0)
    assert np.mean([p.final_state == 0 for p in paths]) > 0.99


def test_sampler_determinism_and_validation():
    g, s0, beta, model = random_instance(5)
    k = PowerKernel(beta)
    tr = simulate(g, k, model, 1.0, s0, 1.0, 0.01)
    a = sample_jump_paths(tr, g, k, model, None, 0, 1.0, 50, seed=9)
    b = sample_jump_paths(tr, g, k, model, None, 0, 1.0, 50, seed=9)
    assert all(np.array_equal(x.times, y.times) and np.array_equal(x.states, y.states) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        sample_jump_paths(tr, g, k, model, None, 0, 2.0, 5, seed=0)
    with pytest.raises(ValueError):
        sample_jump_paths(tr, g, k, model, None, g.n, 1.0, 5, seed=0)


def test_jump_path_validation():
    with pytest.raises(ValueError):
        JumpPath(np.array([0.0, 0.5, 0.4, math.inf]), np.array([0, 1, 0]), 1.0)
    p = JumpPath(np.array([0.0, 0.5, math.inf]), np.array([2, 1]), 1.0)
    assert p.state_at(0.2) == 2 and p.state_at(0.7) == 1


def test_paths_csv(tmp_path):
    paths = [JumpPath(np.array([0.0, 0.25, math.inf]), np.array([1, 0]), 1.0)]
    write_paths_csv(paths, tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows == ["path_id,jump_index,time,state", "0,0,0.0,1", "0,1,0.25,0", "0,2,inf,"]


# --- Monte Carlo ---------------------------------------------------------------------

def test_mc_equal_velocities_exact():
    g = uniform_graph(4)
    s0 = AgentState(0, np.random.default_rng(0).normal(size=(4, 2)), np.tile([0.4, -2.0], (4, 1)))
    tr = simulate(g, PowerKernel(1.0), "CS", 1.0, s0, 1.0, 0.01)
    est = mc_velocity_estimate(tr, g, PowerKernel(1.0), "CS", None, 2, 1.0, 500, seed=4)
    np.testing.assert_array_equal(est.mean, [0.4, -2.0])
    np.testing.assert_array_equal(est.stderr, [0.0, 0.0])


def test_mc_two_agent_closed_form():
    g = InteractionGraph(np.array([[0, 1.0], [1.0, 0]]))
    s0 = AgentState(0, [[0.0], [0.0]], [[1.0], [-1.0]])
    tr = simulate(g, PowerKernel(0.0), "CS", 1.0, s0, 1.0, 1e-3)
    est = mc_velocity_estimate(tr, g, PowerKernel(0.0), "CS", None, 0, 1.0, 100_000, seed=11)
    exact = math.exp(-2.0)
    assert abs(est.mean[0] - exact) <= 3 * est.stderr[0]


def test_mc_hierarchical_long_time_gives_leader():
    g = chain_graph(3)
    rng = np.random.default_rng(1)
    s0 = AgentState(0, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    T = 40.0
    tr = simulate(g, PowerKernel(0.5), "CS", 1.0, s0, T, 0.05)
    est = mc_velocity_estimate(tr, g, PowerKernel(0.5), "CS", None, 2, T, 4000, seed=2)
    np.testing.assert_allclose(est.mean, s0.v[0], atol=1e-12)


# --- bounds -------------------------------------------------------------------------

def test_gamma_tail_examples():
    assert gamma_tail(1, 0.8) == pytest.approx(math.exp(-0.8), rel=1e-15)
    assert gamma_tail(5, 0.0) == 1.0
    assert gamma_tail(2, 1.0) == pytest.approx(2 * math.exp(-1), rel=1e-15)
    with pytest.raises(ValueError):
        gamma_tail(0, 1.0)


@given(st.integers(1, 300), st.floats(0.0, 500.0))
def test_gamma_tail_matches_scipy(H, x):
    assert gamma_tail(H, x) == pytest.approx(gammaincc(H, x), rel=1e-10, abs=1e-300)


@given(st.integers(1, 50), st.floats(0.0, 80.0), st.floats(0.0, 5.0))
def test_gamma_tail_monotone(H, x, dx):
    assert gamma_tail(H, x + dx) <= gamma_tail(H, x) + 1e-15
    assert gamma_tail(H + 1, x) >= gamma_tail(H, x) - 1e-15


def test_bounds_at_zero_and_unknown_regime():
    c = structural_constants(chain_graph(3))
    assert ergodicity_bounds("hierarchical", c, 0.0, 1.0, PowerKernel(1.0), 1.0) == 0.0
    cg = structural_constants(cycle_graph(3))
    assert ergodicity_bounds("general", cg, 0.0, 1.0, PowerKernel(1.0), 1.0) == 0.0
    with pytest.raises(ValueError):
        ergodicity_bounds("reversible", c, 1.0, 1.0, PowerKernel(1.0), 1.0)


def test_hl_bound_single_level():
    g = InteractionGraph(np.array([[0, 0], [2.0, 0]]), [1.0, 0])
    c = structural_constants(g)
    b = ergodicity_bounds("hierarchical", c, 0.7, 1.0, PowerKernel(2.0), 1.5)
    assert b == pytest.approx(1 - math.exp(-1.5 * 2.0 * 0.5 * 0.7), rel=1e-14)


@pytest.mark.parametrize("model", ["CS", "MT"])
def test_bounds_below_solver_mu(model):
    rng = np.random.default_rng(3)
    k = PowerKernel(1.5)
    cases = [(InteractionGraph(chain_graph(3).weights, [1.0, 0.3, 0.3]), "hierarchical"),
             (InteractionGraph(cycle_graph(4).weights, np.full(4, 0.3)), "general")]
    for g, regime in cases:
        s0 = AgentState(0, rng.normal(size=(g.n, 2)), rng.normal(size=(g.n, 2)))
        tr, tf = run(g, 1.5, model, s0, 10.0, 1e-2)
        c = structural_constants(g)
        for T in (1.0, 5.0, 10.0):
            kt = tr.index_of(T)
            r = float(tr.X[: kt + 1].max())
            mu = dobrushin(tf.at(kt))
            assert ergodicity_bounds(regime, c, T, r, k, 1.0, model) <= mu + 1e-12
