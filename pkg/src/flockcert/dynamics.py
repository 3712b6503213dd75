"""Fixed-step RK4 integration of the alignment ODE and trajectory utilities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import pdist

from .graph import GraphError, InteractionGraph, _check_reversible_pair
from .kernel import CommunicationKernel, check_model, offdiag_rates

MONOTONE_SLACK = 1e-9


class IntegrationError(RuntimeError):
    """The velocity diameter grew beyond integrator slack."""


@dataclass(frozen=True)
class AgentState:
    t: float
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        v = np.atleast_2d(np.asarray(self.v, dtype=float))
        if x.shape != v.shape:
            raise ValueError(f"positions {x.shape} and velocities {v.shape} differ in shape")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v)))


def _diameter(p: np.ndarray) -> float:
    if p.shape[0] < 2:
        return 0.0
    return float(pdist(p).max())


def diameters(s: AgentState) -> tuple:
    """``(X, V)``: largest pairwise Euclidean distance of positions and velocities."""
    return _diameter(s.x), _diameter(s.v)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    x: np.ndarray
    v: np.ndarray
    model: str
    alpha: float
    X: np.ndarray
    V: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def state(self, k: int) -> AgentState:
        return AgentState(float(self.times[k]), self.x[k], self.v[k])

    def index_of(self, t: float) -> int:
        """Grid index of time ``t`` (must be a grid point up to rounding)."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the trajectory grid")
        return k

    def positions_mid(self, k: int) -> np.ndarray:
        """Cubic Hermite positions at the midpoint of cell ``[t_k, t_{k+1}]``."""
        h = self.times[k + 1] - self.times[k]
        return 0.5 * (self.x[k] + self.x[k + 1]) + 0.125 * h * (self.v[k] - self.v[k + 1])


def default_dt(g: InteractionGraph, alpha: float) -> float:
    """``1e-3 * min(1, 1 / (alpha * A_bar))``."""
    abar = float(g.row_sums().max())
    if abar == 0:
        return 1e-3
    return 1e-3 * min(1.0, 1.0 / (alpha * abar))


def time_grid(T: float, dt: float) -> np.ndarray:
    steps = int(math.floor(T / dt))
    grid = dt * np.arange(steps + 1)
    if T - grid[-1] > 1e-9 * dt:
        grid = np.append(grid, T)
    else:
        grid[-1] = T
    return grid


def simulate(g: InteractionGraph, kernel: CommunicationKernel, model: str, alpha: float,
             state0: AgentState, T: float, dt: float, check_monotone: bool = True) -> Trajectory:
    """Integrate positions and velocities with classic RK4 on a fixed grid.

    The last step is shortened so the grid ends exactly at ``T``.

    Raises
    ------
    ValueError
        For a non-finite state, ``dt <= 0`` or ``dt > T``.
    IntegrationError
        If ``V`` increases by more than ``1e-9 * V(0)`` over a step.
    """
    check_model(model)
    if not state0.is_finite():
        raise ValueError("initial state must be finite")
    if state0.n != g.n:
        raise ValueError(f"state has {state0.n} agents, graph has {g.n}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not T >= 0 or dt > T:
        raise ValueError(f"need 0 < dt <= T, got dt={dt}, T={T}")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if model == "MT" and not g.mt_denominators_positive():
        raise GraphError("Motsch-Tadmor rates need a_i > 0 for every agent without out-edges")

    grid = time_grid(T, dt)
    n, d = state0.x.shape
    xs = np.empty((grid.size, n, d))
    vs = np.empty((grid.size, n, d))
    X = np.empty(grid.size)
    V = np.empty(grid.size)
    x = state0.x.copy()
    v = state0.v.copy()
    xs[0], vs[0] = x, v
    X[0], V[0] = _diameter(x), _diameter(v)
    slack = MONOTONE_SLACK * V[0]

    def accel(xp, vp):
        # Summing w_ij (v_j - v_i) keeps equal velocities exactly stationary.
        w = offdiag_rates(g, kernel, model, xp)
        return alpha * np.einsum("ij,ijk->ik", w, vp[None, :, :] - vp[:, None, :])

    for k in range(grid.size - 1):
        h = grid[k + 1] - grid[k]
        a1 = accel(x, v)
        x2, v2 = x + 0.5 * h * v, v + 0.5 * h * a1
        a2 = accel(x2, v2)
        x3, v3 = x + 0.5 * h * v2, v + 0.5 * h * a2
        a3 = accel(x3, v3)
        x4, v4 = x + h * v3, v + h * a3
        a4 = accel(x4, v4)
        x = x + (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
        v = v + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise IntegrationError(f"state became non-finite at t={grid[k + 1]}")
        xs[k + 1], vs[k + 1] = x, v
        X[k + 1], V[k + 1] = _diameter(x), _diameter(v)
        if check_monotone and V[k + 1] > V[k] + slack:
            raise IntegrationError(
                f"velocity diameter increased from {V[k]:.6e} to {V[k + 1]:.6e} "
                f"at t={grid[k + 1]:.6g} (slack {slack:.1e}); reduce dt")
    return Trajectory(grid, xs, vs, model, float(alpha), X, V)


def asymptotic_velocity(g: InteractionGraph, pi, v0) -> np.ndarray:
    """``v* = sum_i pi_i v_i(0)``.

    ``pi`` may be supported on the unique closed class only, as long as it
    satisfies detailed balance for ``A``.
    """
    pi = _check_reversible_pair(g, pi)
    return pi @ np.atleast_2d(np.asarray(v0, dtype=float))


def star_graph(A_out, B_in) -> tuple:
    """Star with leader 0: ``A[i, 0] = A_out[i-1]``, ``A[0, j] = B_in[j-1]``.

    Returns ``(graph, pi)``; ``pi`` is ``None`` when it would not be positive.
    """
    A_out = np.asarray(A_out, dtype=float)
    B_in = np.asarray(B_in, dtype=float)
    if A_out.shape != B_in.shape or A_out.ndim != 1:
        raise ValueError("A_out and B_in must be vectors of equal length")
    if np.any(A_out <= 0):
        raise ValueError("star graph needs A_i > 0 for every follower")
    if np.any(B_in < 0):
        raise ValueError("B_j must be non-negative")
    n = A_out.size + 1
    w = np.zeros((n, n))
    w[1:, 0] = A_out
    w[0, 1:] = B_in
    g = InteractionGraph(w)
    ratios = B_in / A_out
    if np.any(ratios <= 0):
        return g, None
    pi = np.concatenate(([1.0], ratios)) / (1.0 + ratios.sum())
    return g, pi


def star_limit_velocity(A_out, B_in, v0) -> np.ndarray:
    """Closed-form limit velocity of the star graph."""
    ratios = np.asarray(B_in, dtype=float) / np.asarray(A_out, dtype=float)
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    return (v0[0] + ratios @ v0[1:]) / (1.0 + ratios.sum())


def fit_decay_rate(traj: Trajectory, floor: float = 1e-12) -> Optional[float]:
    """Least-squares slope of ``-log V`` over the second half of the run."""
    V = traj.V
    if V[0] == 0:
        return None
    half = traj.times.size // 2
    t, y = traj.times[half:], V[half:]
    mask = y > floor * V[0]
    if mask.sum() < 2:
        return None
    slope = np.polyfit(t[mask], np.log(y[mask]), 1)[0]
    return float(-slope)


def write_trajectory_csv(traj: Trajectory, path, every: int = 1) -> None:
    d = traj.x.shape[2]
    header = ["t", "i"] + [f"x_{m}" for m in range(d)] + [f"v_{m}" for m in range(d)]
    idx = _export_indices(traj, every)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in idx:
            t = repr(float(traj.times[k]))
            for i in range(traj.n):
                w.writerow([t, i] + [repr(float(c)) for c in traj.x[k, i]]
                           + [repr(float(c)) for c in traj.v[k, i]])


def write_summary_csv(traj: Trajectory, path, every: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "X", "V"])
        for k in _export_indices(traj, every):
            w.writerow([repr(float(traj.times[k])), repr(float(traj.X[k])), repr(float(traj.V[k]))])


def _export_indices(traj: Trajectory, every: int) -> list:
    idx = list(range(0, traj.times.size, max(1, int(every))))
    if idx[-1] != traj.times.size - 1:
        idx.append(traj.times.size - 1)
    return idx
