"""Probabilistic reading of the alignment dynamics.

Velocities are conditional expectations of a time-inhomogeneous jump
process. On a horizon ``T`` the process starts at time 0 and runs with the
time-reversed generator; the coupling strength ``alpha`` is folded into the
jump rates, ``q_i(u) = alpha * sum_{j != i} Q_{T-u}(i, j)``, and is not
applied a second time anywhere in this module.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln

from .dynamics import Trajectory
from .graph import InteractionGraph
from .kernel import CommunicationKernel, check_model, offdiag_rates

STOCHASTIC_TOL = 1e-9
CONTRACTION_SLACK = 1e-7
BATCH_SIZE = 4096
# per-step propagators are cached only below this many stored floats
_CACHE_LIMIT = 2 ** 24


def _generator(w: np.ndarray) -> np.ndarray:
    """Rate matrices with zero row sums from off-diagonal rates (batched)."""
    Q = w.copy()
    idx = np.arange(w.shape[-1])
    Q[..., idx, idx] = -w.sum(axis=-1)
    return Q


def _stage_positions(traj: Trajectory, g, kernel, model, k: int) -> list:
    """Positions at the four RK4 stages of step ``k``, rebuilt from the grid state."""
    alpha = traj.alpha
    h = traj.times[k + 1] - traj.times[k]
    x, v = traj.x[k], traj.v[k]

    def accel(xp, vp):
        w = offdiag_rates(g, kernel, model, xp)
        return alpha * np.einsum("ij,ijk->ik", w, vp[None, :, :] - vp[:, None, :])

    a1 = accel(x, v)
    x2, v2 = x + 0.5 * h * v, v + 0.5 * h * a1
    a2 = accel(x2, v2)
    x3, v3 = x + 0.5 * h * v2, v + 0.5 * h * a2
    x4 = x + h * v3
    return [x, x2, x3, x4]


def _rk4_propagator(Qs: list, alpha: float, h: float) -> np.ndarray:
    """One RK4 step of ``M' = alpha Q M`` applied to the identity."""
    n = Qs[0].shape[0]
    eye = np.eye(n)
    k1 = alpha * Qs[0]
    k2 = alpha * Qs[1] @ (eye + 0.5 * h * k1)
    k3 = alpha * Qs[2] @ (eye + 0.5 * h * k2)
    k4 = alpha * Qs[3] @ (eye + h * k3)
    return eye + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(frozen=True, eq=False)
class TransitionFunction:
    """``P*_{0,t_k}`` on the trajectory grid.

    ``P[k] @ f`` reproduces the velocity component ``f`` at ``t_k``.
    """

    times: np.ndarray
    P: np.ndarray
    alpha: float
    _traj: Trajectory = field(repr=False)
    _ctx: tuple = field(repr=False)
    _steps: Optional[np.ndarray] = field(default=None, repr=False)

    def at(self, k: int) -> np.ndarray:
        return self.P[k]

    def step(self, k: int) -> np.ndarray:
        """Propagator over the cell ``[t_k, t_{k+1}]``."""
        if self._steps is not None:
            return self._steps[k]
        g, kernel, model = self._ctx
        h = self.times[k + 1] - self.times[k]
        xs = _stage_positions(self._traj, g, kernel, model, k)
        Qs = [_generator(offdiag_rates(g, kernel, model, p)) for p in xs]
        return _rk4_propagator(Qs, self.alpha, h)

    def between(self, ks: int, kt: int) -> np.ndarray:
        """``P*_{s,t}`` by integrating forward from ``t_s`` (``P*_{0,t} = P*_{s,t} P*_{0,s}``)."""
        if not 0 <= ks <= kt < self.times.size:
            raise ValueError(f"need 0 <= ks <= kt < {self.times.size}")
        M = np.eye(self.P.shape[1])
        for k in range(ks, kt):
            M = self.step(k) @ M
        return M

    def duality_gap(self) -> float:
        """``max_k || v(t_k) - P*_{0,t_k} v(0) ||_inf``."""
        pred = np.einsum("kij,jm->kim", self.P, self._traj.v[0])
        return float(np.max(np.abs(pred - self._traj.v)))


def solve_transition(traj: Trajectory, g: InteractionGraph, kernel: CommunicationKernel, model: str,
                     alpha: Optional[float] = None) -> TransitionFunction:
    """Integrate ``M' = alpha Q_t M``, ``M(0) = I`` with RK4 on the trajectory grid.

    Rates at each stage are built from the same stage positions the ODE
    integrator used, reconstructed from the stored grid state.
    """
    check_model(model)
    if traj.model != model:
        raise ValueError(f"trajectory model {traj.model} differs from {model}")
    if alpha is not None and alpha != traj.alpha:
        raise ValueError(f"alpha={alpha} differs from the trajectory's {traj.alpha}")
    if traj.n != g.n:
        raise ValueError("trajectory and graph disagree on the number of agents")
    alpha = traj.alpha
    times = traj.times
    m = times.size - 1
    n = g.n
    P = np.empty((m + 1, n, n))
    P[0] = np.eye(n)
    keep = (m * n * n) <= _CACHE_LIMIT
    steps = np.empty((m, n, n)) if keep else None
    for k in range(m):
        xs = np.stack(_stage_positions(traj, g, kernel, model, k))
        Qs = list(_generator(offdiag_rates(g, kernel, model, xs)))
        R = _rk4_propagator(Qs, alpha, times[k + 1] - times[k])
        if keep:
            steps[k] = R
        P[k + 1] = R @ P[k]
    for Pk in (P[0], P[-1]):
        _check_stochastic(Pk)
    return TransitionFunction(times, P, alpha, traj, (g, kernel, model), steps)


def _check_stochastic(P: np.ndarray, tol: float = STOCHASTIC_TOL) -> None:
    if np.any(np.abs(P.sum(axis=1) - 1.0) > tol) or np.any(P < -tol):
        raise ValueError("matrix is not row-stochastic within tolerance")


def dobrushin(P) -> float:
    """``mu(P) = min_{i,j} sum_k min(P_ik, P_jk)``; ``1`` for a single row."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("need a square matrix")
    _check_stochastic(P)
    n = P.shape[0]
    if n < 2:
        return 1.0
    overlap = np.minimum(P[:, None, :], P[None, :, :]).sum(axis=2)
    off = overlap[~np.eye(n, dtype=bool)]
    return float(np.clip(off.min(), 0.0, 1.0))


@dataclass(frozen=True)
class ContractionReport:
    pairs: np.ndarray
    slack: np.ndarray
    tolerance: float

    @property
    def worst_slack(self) -> float:
        return float(self.slack.min()) if self.slack.size else math.inf

    @property
    def violations(self) -> np.ndarray:
        return self.pairs[self.slack < 0]

    @property
    def ok(self) -> bool:
        return self.violations.size == 0


def contraction_check(tf: TransitionFunction, traj: Trajectory, n_pairs: int = 100,
                      seed: int = 0, pairs=None) -> ContractionReport:
    """Check ``V(t) <= (1 - mu(P*_{s,t})) V(s)`` up to ``1e-7 V(0)`` on sampled pairs.

    ``slack`` is ``(1 - mu) V(s) + 1e-7 V(0) - V(t)``; negative means violated.
    """
    if tf.times.shape != traj.times.shape or not np.array_equal(tf.times, traj.times):
        raise ValueError("transition function and trajectory use different grids")
    m = traj.times.size
    if pairs is None:
        rng = np.random.default_rng(seed)
        a = rng.integers(0, m, size=(n_pairs, 2))
        pairs = np.sort(a, axis=1)
    pairs = np.asarray(pairs, dtype=int)
    tol = CONTRACTION_SLACK * traj.V[0]
    slack = np.empty(len(pairs))
    for p, (ks, kt) in enumerate(pairs):
        mu = dobrushin(tf.between(ks, kt))
        slack[p] = (1.0 - mu) * traj.V[ks] + tol - traj.V[kt]
    return ContractionReport(pairs, slack, tol)


# --- jump process -----------------------------------------------------------

@dataclass(frozen=True)
class JumpPath:
    """Jump times ``J_0 = 0 < J_1 < ...`` ending with the ``inf`` marker, and visited states."""

    times: np.ndarray
    states: np.ndarray
    horizon: float

    def __post_init__(self):
        finite = self.times[np.isfinite(self.times)]
        if np.any(np.diff(finite) <= 0):
            raise ValueError("jump times must increase strictly")

    @property
    def n_jumps(self) -> int:
        return self.states.size - 1

    @property
    def final_state(self) -> int:
        return int(self.states[-1])

    def state_at(self, u: float) -> int:
        k = np.searchsorted(self.times, u, side="right") - 1
        return int(self.states[min(k, self.states.size - 1)])


class _HazardTable:
    """Reversed-time rates on a grid with their trapezoid cumulatives."""

    def __init__(self, traj: Trajectory, g, kernel, model, T: float):
        if not 0 <= T <= traj.horizon * (1 + 1e-12):
            raise ValueError(f"T={T} lies outside the trajectory horizon [0, {traj.horizon}]")
        times = traj.times
        m = int(np.searchsorted(times, T, side="left"))
        if m < times.size and abs(times[m] - T) <= 1e-12 * max(1.0, T):
            s = times[: m + 1].copy()
            s[-1] = T
            W = offdiag_rates(g, kernel, model, traj.x[: m + 1])
        else:
            lo = m - 1
            theta = (T - times[lo]) / (times[m] - times[lo])
            Wg = offdiag_rates(g, kernel, model, traj.x[: m + 1])
            s = np.append(times[:m], T)
            W = np.concatenate([Wg[:m], ((1 - theta) * Wg[lo] + theta * Wg[m])[None]])
        alpha = traj.alpha
        # u = T - s, ascending
        self.u = (T - s)[::-1]
        self.u[0] = 0.0
        self.W = alpha * W[::-1]
        q = self.W.sum(axis=2)  # (cells+1, n)
        du = np.diff(self.u)
        cum = np.concatenate([np.zeros((1, q.shape[1])),
                              np.cumsum(0.5 * (q[1:] + q[:-1]) * du[:, None], axis=0)])
        self.cum = np.ascontiguousarray(cum.T)  # (n, cells+1)
        self.T = float(T)
        self.n = g.n

    def level_at(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        c = np.clip(np.searchsorted(self.u, u, side="right") - 1, 0, self.u.size - 2)
        theta = (u - self.u[c]) / (self.u[c + 1] - self.u[c])
        lo = self.cum[states, c]
        return lo + theta * (self.cum[states, c + 1] - lo)


def _sample_batch(tab: _HazardTable, i0: int, size: int, rng: np.random.Generator,
                  record: bool) -> tuple:
    state = np.full(size, i0, dtype=np.intp)
    u = np.zeros(size)
    alive = np.ones(size, dtype=bool)
    hist_t = [[0.0] for _ in range(size)] if record else None
    hist_s = [[i0] for _ in range(size)] if record else None
    while alive.any():
        idx = np.nonzero(alive)[0]
        tau = rng.standard_exponential(idx.size)
        coin = rng.random(idx.size)
        cur = state[idx]
        level = tab.level_at(cur, u[idx]) + tau
        for i in np.unique(cur):
            sel = cur == i
            rows = idx[sel]
            cum_i = tab.cum[i]
            j = np.searchsorted(cum_i, level[sel], side="left")
            done = j >= cum_i.size
            alive[rows[done]] = False
            go = rows[~done]
            if go.size == 0:
                continue
            c = j[~done] - 1
            lv = level[sel][~done]
            frac = (lv - cum_i[c]) / (cum_i[c + 1] - cum_i[c])
            t_new = tab.u[c] + frac * (tab.u[c + 1] - tab.u[c])
            wrow = (1 - frac)[:, None] * tab.W[c, i] + frac[:, None] * tab.W[c + 1, i]
            tot = wrow.sum(axis=1)
            flat = tot <= 0
            if np.any(flat):
                wrow[flat] = 0.5 * (tab.W[c[flat], i] + tab.W[c[flat] + 1, i])
                tot = wrow.sum(axis=1)
            cdf = np.cumsum(wrow, axis=1) / tot[:, None]
            target = (cdf < coin[sel][~done][:, None]).sum(axis=1)
            target = np.minimum(target, tab.n - 1)
            # never land on a zero-rate column because of rounding in the cdf
            bad = wrow[np.arange(go.size), target] <= 0
            if np.any(bad):
                target[bad] = np.argmax(wrow[bad], axis=1)
            state[go] = target
            u[go] = t_new
            if record:
                for p, tt, ss in zip(go, t_new, target):
                    hist_t[p].append(float(tt))
                    hist_s[p].append(int(ss))
    return state, hist_t, hist_s


def _batch_rngs(seed: int, n_batches: int) -> list:
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n_batches)]


def sample_jump_paths(traj: Trajectory, g: InteractionGraph, kernel: CommunicationKernel, model: str,
                      alpha: Optional[float], i0: int, T: float, n_paths: int, seed: int,
                      record: bool = True):
    """Sample ``n_paths`` jump paths started in ``i0``.

    Paths are drawn in fixed-size batches; batch ``b`` uses the ``b``-th
    child of ``SeedSequence(seed)``, so path ``p`` depends only on
    ``(seed, p // BATCH_SIZE)`` and its position in the batch.
    Returns a list of :class:`JumpPath` when ``record`` is true, otherwise
    the array of final states.
    """
    check_model(model)
    if alpha is not None and alpha != traj.alpha:
        raise ValueError(f"alpha={alpha} differs from the trajectory's {traj.alpha}")
    if not 0 <= i0 < g.n:
        raise ValueError(f"state {i0} out of range")
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    tab = _HazardTable(traj, g, kernel, model, T)
    n_batches = -(-n_paths // BATCH_SIZE)
    finals, paths = [], []
    for b, rng in enumerate(_batch_rngs(seed, n_batches)):
        size = min(BATCH_SIZE, n_paths - b * BATCH_SIZE)
        state, ht, hs = _sample_batch(tab, i0, size, rng, record)
        finals.append(state)
        if record:
            for t_list, s_list in zip(ht, hs):
                paths.append(JumpPath(np.array(t_list + [math.inf]), np.array(s_list), float(T)))
    return paths if record else np.concatenate(finals)


def sample_jump_process(traj: Trajectory, g: InteractionGraph, kernel: CommunicationKernel, model: str,
                        alpha: Optional[float], i0: int, T: float, seed: int) -> JumpPath:
    """One path of the reversed-generator jump process on ``[0, T]``."""
    return sample_jump_paths(traj, g, kernel, model, alpha, i0, T, 1, seed)[0]


@dataclass(frozen=True)
class MCEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n_samples: int


def mc_velocity_estimate(traj: Trajectory, g: InteractionGraph, kernel: CommunicationKernel, model: str,
                         alpha: Optional[float], i: int, t: float, n_samples: int,
                         seed: int) -> MCEstimate:
    """Estimate ``v_i(t) = E[f(Y_t) | Y_0 = i]`` with ``f = v(0)`` and horizon ``t``."""
    finals = sample_jump_paths(traj, g, kernel, model, alpha, i, t, n_samples, seed, record=False)
    f = traj.v[0][finals]
    # shift by one sample so constant data averages exactly
    d = f - f[0]
    mean = f[0] + d.mean(axis=0)
    if n_samples > 1:
        stderr = d.std(axis=0, ddof=1) / math.sqrt(n_samples)
    else:
        stderr = np.full(mean.shape, math.nan)
    return MCEstimate(mean, stderr, n_samples)


def write_paths_csv(paths: list, path) -> None:
    """Columns ``path_id, jump_index, time, state``; the closing ``inf`` row has no state."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "jump_index", "time", "state"])
        for pid, jp in enumerate(paths):
            for k, s in enumerate(jp.states):
                w.writerow([pid, k, repr(float(jp.times[k])), int(s)])
            w.writerow([pid, jp.states.size, "inf", ""])


# --- proof-level bounds -----------------------------------------------------

def gamma_tail(H: int, x: float) -> float:
    """``P(Gamma(H, 1) > x) = e^{-x} sum_{n<H} x^n / n!`` summed in log space."""
    if H < 1 or int(H) != H:
        raise ValueError("H must be a positive integer")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    if x == math.inf:
        return 0.0
    n = np.arange(int(H))
    logs = n * math.log(x) - gammaln(n + 1) - x
    top = logs.max()
    return float(min(1.0, math.exp(top) * np.exp(logs - top).sum()))


def hl_rate(model: str, alpha: float, A_star: float, psi: float, B_star: Optional[float] = None,
            a_bar: Optional[float] = None) -> float:
    """Absorption rate towards the leader: ``alpha A_* psi`` or its normalized analogue."""
    if model == "CS":
        return alpha * A_star * psi
    return alpha * B_star * (a_bar + A_star) * psi / (a_bar + A_star * psi)


def gl_contraction(model: str, alpha: float, D: int, A_hat: float, A_bar_eff: float,
                   psi: float, t: float, K: Optional[float] = None) -> float:
    """Lower bound ``min(1, alpha a t / D)^D e^{-alpha A_bar t}`` on the Dobrushin coefficient.

    ``a = A_hat psi`` for Cucker-Smale and ``A_hat psi / (K + A_hat psi)`` for
    Motsch-Tadmor; ``A_bar_eff`` is ``A_bar`` or ``B_bar`` accordingly.
    """
    low = A_hat * psi if model == "CS" else A_hat * psi / (K + A_hat * psi)
    return min(1.0, alpha * low * t / D) ** D * math.exp(-alpha * A_bar_eff * t)


def ergodicity_bounds(regime: str, constants, t: float, r: float, kernel: CommunicationKernel,
                      alpha: float, model: str = "CS") -> float:
    """Lower bound on ``mu(P*_{0,t})`` when every distance stays below ``r``.

    ``regime`` is ``"hierarchical"`` or ``"general"``; ``constants`` is a
    :class:`~flockcert.graph.StructuralConstants`.
    """
    check_model(model)
    psi = float(kernel(r))
    c = constants
    if regime == "hierarchical":
        if c.H is None:
            raise ValueError("hierarchical bound needs a hierarchical graph")
        omega = hl_rate(model, alpha, c.A_star, psi, c.B_star, c.a_bar)
        return 1.0 - gamma_tail(c.H, omega * t)
    if regime == "general":
        if c.D is None or c.D == math.inf:
            raise ValueError("general-leadership bound needs a unique closed class")
        if model == "CS":
            return gl_contraction(model, alpha, int(c.D), c.A_hat, c.A_bar, psi, t)
        return gl_contraction(model, alpha, int(c.D), c.A_hat, c.B_bar, psi, t, c.K)
    raise ValueError(f"unknown regime {regime!r}")
