"""Communication functions and the rate matrices they induce.

Rate matrices here are the bare ``Q_t`` (no coupling factor); the coupling
strength ``alpha`` travels alongside and is applied by the integrators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator

from .graph import GraphError, InteractionGraph

TAIL_CUTOFF = 1e4
QUAD_TOL = 1e-12
ROW_SUM_ATOL = 1e-12


class KernelError(ValueError):
    pass


def _power_tail(beta: float, R: float) -> float:
    """``int_R^inf (1+r^2)^{-beta/2} dr`` for ``beta > 1`` and ``R > 1``.

    Binomial expansion of ``(1 + r^{-2})^{-beta/2}`` integrated term by term.
    """
    total = 0.0
    coef = 1.0
    k = 0
    while True:
        term = coef * R ** (1.0 - beta - 2 * k) / (beta + 2 * k - 1.0)
        total += term
        if abs(term) <= 1e-17 * abs(total) or k > 200:
            return total
        coef *= (-beta / 2.0 - k) / (k + 1)
        k += 1


def _segmented_quad(f: Callable, a: float, b: float) -> float:
    """Adaptive Gauss-Kronrod over geometrically growing segments of ``[a, b]``."""
    if b <= a:
        return 0.0
    edges = [a]
    step = 1.0
    while edges[-1] < b:
        edges.append(min(b, a + step))
        step *= 2.0
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = quad(f, lo, hi, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
        total += val
    return total


class CommunicationKernel:
    """Positive non-increasing ``psi`` with ``psi(0) <= 1``."""

    #: ``True``/``False`` when the tail integral is known to converge/diverge.
    tail_finite: Optional[bool] = None

    def __call__(self, r):
        raise NotImplementedError

    def psi_sq(self, d2):
        """``psi`` as a function of the squared distance."""
        return self(np.sqrt(d2))

    def integral(self, a: float, b: float) -> float:
        """``int_a^b psi``; ``b`` may be ``inf``."""
        if b == math.inf:
            return self.tail_integral(a)
        return _segmented_quad(self._scalar, a, b)

    def _scalar(self, r: float) -> float:
        return float(self(np.asarray(r, dtype=float)))

    def tail_integral(self, x0: float) -> float:
        raise NotImplementedError

    def to_config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class PowerKernel(CommunicationKernel):
    """``psi(r) = (1 + r^2)^{-beta/2}``."""

    beta: float

    def __post_init__(self):
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise KernelError(f"beta must be a finite non-negative number, got {self.beta}")

    @property
    def tail_finite(self) -> bool:
        return self.beta > 1

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return (1.0 + r * r) ** (-0.5 * self.beta)

    def psi_sq(self, d2):
        return (1.0 + np.asarray(d2, dtype=float)) ** (-0.5 * self.beta)

    def _scalar(self, r: float) -> float:
        return (1.0 + r * r) ** (-0.5 * self.beta)

    def tail_integral(self, x0: float) -> float:
        _check_r(x0)
        if self.beta <= 1:
            return math.inf
        R = max(x0, TAIL_CUTOFF)
        return _segmented_quad(self._scalar, x0, R) + _power_tail(self.beta, R)

    def to_config(self) -> dict:
        return {"type": "power", "beta": self.beta}


@dataclass(frozen=True, eq=False)
class TableKernel(CommunicationKernel):
    """Monotone (PCHIP) interpolation of tabulated values.

    Past the last node the kernel continues as
    ``psi_last * ((1 + r_last^2) / (1 + r^2))^{tail_beta/2}``; ``tail_beta``
    must agree with the declared tail behaviour.
    """

    r: tuple
    psi: tuple
    tail: str
    tail_beta: Optional[float] = None

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        p = np.asarray(self.psi, dtype=float)
        if r.ndim != 1 or r.shape != p.shape or r.size < 2:
            raise KernelError("table kernel needs matching r and psi arrays of length >= 2")
        if r[0] != 0.0 or np.any(np.diff(r) <= 0):
            raise KernelError("table r must start at 0 and be strictly increasing")
        if np.any(p <= 0) or np.any(np.diff(p) > 0):
            raise KernelError("table psi must be positive and non-increasing")
        if p[0] > 1.0:
            raise KernelError("table psi(0) must not exceed 1")
        if self.tail not in ("finite", "infinite"):
            raise KernelError("table kernel tail must be 'finite' or 'infinite'")
        tb = self.tail_beta
        if tb is None:
            tb = 2.0 if self.tail == "finite" else 1.0
        if (tb > 1) != (self.tail == "finite") or tb < 0:
            raise KernelError(f"tail_beta={tb} contradicts declared tail '{self.tail}'")
        object.__setattr__(self, "tail_beta", float(tb))
        object.__setattr__(self, "r", tuple(r.tolist()))
        object.__setattr__(self, "psi", tuple(p.tolist()))
        object.__setattr__(self, "_interp", PchipInterpolator(r, p, extrapolate=False))

    @property
    def tail_finite(self) -> bool:
        return self.tail == "finite"

    @property
    def r_last(self) -> float:
        return self.r[-1]

    def _tail_scale(self) -> float:
        return self.psi[-1] * (1.0 + self.r_last ** 2) ** (0.5 * self.tail_beta)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        inside = np.clip(r, 0.0, self.r_last)
        vals = np.asarray(self._interp(inside), dtype=float)
        outside = self._tail_scale() * (1.0 + r * r) ** (-0.5 * self.tail_beta)
        return np.where(r > self.r_last, outside, vals)

    def tail_integral(self, x0: float) -> float:
        _check_r(x0)
        if not self.tail_finite:
            return math.inf
        head = _segmented_quad(self._scalar, x0, self.r_last) if x0 < self.r_last else 0.0
        start = max(x0, self.r_last)
        power = PowerKernel(self.tail_beta)
        return head + self._tail_scale() * power.tail_integral(start)

    def to_config(self) -> dict:
        return {"type": "table", "r": list(self.r), "psi": list(self.psi),
                "tail": self.tail, "tail_beta": self.tail_beta}


@dataclass(frozen=True, eq=False)
class FunctionKernel(CommunicationKernel):
    """User-supplied ``psi``; the tail behaviour must be declared, never guessed."""

    func: Callable
    tail_finite: Optional[bool] = None

    def __post_init__(self):
        p0 = float(self.func(0.0))
        if not (0 < p0 <= 1):
            raise KernelError(f"psi(0) must lie in (0, 1], got {p0}")

    def __call__(self, r):
        return np.vectorize(self.func, otypes=[float])(np.asarray(r, dtype=float))

    def _scalar(self, r: float) -> float:
        return float(self.func(r))

    def tail_integral(self, x0: float) -> float:
        _check_r(x0)
        if self.tail_finite is None:
            raise KernelError("user-supplied kernel must declare whether its tail integral converges")
        if not self.tail_finite:
            return math.inf
        val, _ = quad(self._scalar, x0, math.inf, epsabs=QUAD_TOL, epsrel=1e-10, limit=500)
        return val


def _check_r(r: float) -> None:
    if not r >= 0:
        raise KernelError(f"distance must be non-negative, got {r}")


def evaluate(k: CommunicationKernel, r: float) -> float:
    _check_r(r)
    return float(k(r))


def tail_integral(k: CommunicationKernel, x0: float) -> float:
    return k.tail_integral(x0)


def kernel_from_config(spec: dict) -> CommunicationKernel:
    kind = spec.get("type")
    if kind == "power":
        return PowerKernel(float(spec["beta"]))
    if kind == "table":
        return TableKernel(tuple(spec["r"]), tuple(spec["psi"]), spec["tail"], spec.get("tail_beta"))
    raise KernelError(f"unknown kernel type {kind!r}")


# --- rate matrices ----------------------------------------------------------

MODELS = ("CS", "MT")


def check_model(model: str) -> str:
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    return model


def offdiag_rates(g: InteractionGraph, k: CommunicationKernel, model: str, positions) -> np.ndarray:
    """Off-diagonal rates for positions of shape ``(..., n, d)``; zero diagonal.

    Works on a single configuration or a stack of them.
    """
    x = np.asarray(positions, dtype=float)
    diff = x[..., :, None, :] - x[..., None, :, :]
    d2 = np.einsum("...k,...k->...", diff, diff)
    w = g.weights * k.psi_sq(d2)
    if model == "CS":
        return w
    if model == "MT":
        denom = g.offsets + w.sum(axis=-1)
        return w / denom[..., None]
    raise ValueError(f"unknown model {model!r}")


@dataclass(frozen=True)
class RateMatrix:
    Q: np.ndarray
    model: str
    alpha: float

    def __post_init__(self):
        Q = self.Q
        off = Q[~np.eye(Q.shape[0], dtype=bool)]
        if np.any(off < 0):
            raise ValueError("rate matrix has negative off-diagonal entries")
        if np.any(np.abs(Q.sum(axis=1)) > ROW_SUM_ATOL * max(1.0, float(np.abs(Q).max(initial=0.0)))):
            raise ValueError("rate matrix rows do not sum to zero")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


def _assemble(w: np.ndarray, model: str, alpha: float) -> RateMatrix:
    Q = w.copy()
    np.fill_diagonal(Q, 0.0)
    Q[np.diag_indices_from(Q)] = -Q.sum(axis=1)
    return RateMatrix(Q, model, float(alpha))


def rate_matrix_cs(g: InteractionGraph, k: CommunicationKernel, positions, alpha: float) -> RateMatrix:
    return _assemble(offdiag_rates(g, k, "CS", positions), "CS", alpha)


def rate_matrix_mt(g: InteractionGraph, k: CommunicationKernel, positions, alpha: float) -> RateMatrix:
    if not g.mt_denominators_positive():
        raise GraphError("Motsch-Tadmor rates need a_i > 0 for every agent without out-edges")
    return _assemble(offdiag_rates(g, k, "MT", positions), "MT", alpha)


def rate_matrix(g, k, positions, alpha, model) -> RateMatrix:
    return rate_matrix_cs(g, k, positions, alpha) if check_model(model) == "CS" \
        else rate_matrix_mt(g, k, positions, alpha)
