"""Flocking certificates for the four interaction-graph regimes.

Every certificate compares an initial velocity dispersion (``lhs``) with a
threshold built from the graph constants and the communication function.
When it holds, ``radius`` bounds ``sup_t X(t)`` and ``decay_bound(t)``
bounds ``V(t)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import IntegrationWarning, quad
from scipy.optimize import brentq

from .dynamics import AgentState, diameters
from .graph import (GraphError, InteractionGraph, coalescence_diameter, height, is_hierarchical,
                    mt_denominator_bound, mt_matrix, poincare_constant, scrambling_coefficient)
from .kernel import CommunicationKernel, PowerKernel, TableKernel, check_model
from .markov import gamma_tail, gl_contraction, hl_rate

ROOT_CEILING = 1e6
SAFETY_INFLATION = 1e-6
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class EnvelopeError(ValueError):
    """The envelope supremum could not be located inside the search ceiling."""


@dataclass(frozen=True)
class FlockingCertificate:
    regime: str
    model: str
    holds: bool
    lhs: float
    threshold: float
    margin: float
    radius: Optional[float]
    rate: Optional[float]
    witness: dict = field(default_factory=dict)
    decay_prefactor: Optional[float] = None
    H: Optional[int] = None
    step: Optional[float] = None
    contraction: Optional[float] = None
    note: str = ""

    @property
    def unconditional(self) -> bool:
        return self.threshold == math.inf

    def decay_bound(self, t):
        """Upper bound on ``V(t)`` implied by the certificate."""
        if not self.holds:
            raise ValueError("certificate does not hold; no decay bound")
        t = np.asarray(t, dtype=float)
        if self.regime == "hierarchical":
            return self.decay_prefactor * np.vectorize(gamma_tail)(self.H, self.rate * t)
        if self.regime == "general" and self.step is not None:
            return self.decay_prefactor * (1.0 - self.contraction) ** np.floor(t / self.step)
        return self.decay_prefactor * np.exp(-self.rate * t)

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "witness"}
        out["unconditional"] = self.unconditional
        out["witness"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                          for k, v in self.witness.items()}
        return out


# --- numerical building blocks ---------------------------------------------

def solve_xm(phi: Callable[[float], float], X0: float, V0: float, total: Optional[float] = None) -> float:
    """Solve ``int_{X0}^{X_M} phi = V0`` for ``X_M``.

    The bracket grows geometrically from ``X0``; bisection then runs to an
    absolute tolerance of ``1e-10 * max(1, X0)``. ``total`` is the full tail
    integral when known; a finite ``total <= V0`` is rejected. Returns
    ``inf`` when the solution lies beyond floating-point range.
    """
    if V0 < 0:
        raise ValueError("V0 must be non-negative")
    if total is not None and total <= V0:
        raise ValueError(f"no finite X_M: tail integral {total} does not exceed V0={V0}")
    if V0 == 0:
        return float(X0)

    def seg(a, b):
        # late bisection segments are tiny; quad flags roundoff there, not a real failure
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IntegrationWarning)
            return quad(phi, a, b, epsabs=1e-15, epsrel=1e-12, limit=200)[0]

    lo, f_lo = float(X0), 0.0
    step = max(1.0, X0)
    hi = X0 + step
    f_hi = seg(lo, hi)
    while f_hi < V0:
        if hi > 1e300:
            if total is not None and total < math.inf:
                raise ValueError("tail integral does not exceed V0")
            return math.inf
        lo, f_lo = hi, f_hi
        step *= 2.0
        hi = X0 + step
        f_hi = f_lo + seg(lo, hi)
    tol = 1e-10 * max(1.0, X0)
    while hi - lo > tol and hi - lo > 4 * np.spacing(hi):
        mid = 0.5 * (lo + hi)
        f_mid = f_lo + seg(lo, mid)
        if f_mid < V0:
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    # one Newton step from the lower end
    p = phi(lo)
    x = lo + (V0 - f_lo) / p if p > 0 else lo
    return float(min(max(x, lo), hi))


def golden_section_max(f: Callable[[float], float], a: float, b: float, rtol: float = 1e-12,
                       maxiter: int = 500) -> tuple:
    """Maximise a unimodal ``f`` on ``[a, b]``; returns ``(f(r*), r*)``."""
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(maxiter):
        if abs(b - a) <= rtol * max(1.0, abs(a) + abs(b)):
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    r = 0.5 * (a + b)
    return f(r), r


def _mt_factor(psi, mt):
    K, Ahat = mt
    return psi / (K + Ahat * psi)


def envelope_objective(kernel: CommunicationKernel, X0: float, D: int = 1, mt=None) -> Callable:
    """``r -> (r - X0) * phi(r)^D`` with ``phi = psi`` or ``psi / (K + A_hat psi)``."""
    def g(r):
        psi = kernel(r)
        base = psi if mt is None else _mt_factor(psi, mt)
        return (r - X0) * base ** D
    return g


def _near(x: float, y: float) -> bool:
    return abs(x - y) <= 1e-12 * max(1.0, abs(y))


def cs_power_argmax(beta: float, D: int, X0: float) -> float:
    """Closed-form maximiser of ``(r - X0)(1 + r^2)^{-beta D / 2}`` for ``beta D > 1``."""
    bd = beta * D
    return (math.sqrt((bd * X0) ** 2 + 4.0 * (bd - 1.0)) + bd * X0) / (2.0 * (bd - 1.0))


def mt_stationarity(beta: float, D: int, X0: float, K: float, Ahat: float) -> Callable:
    """Zero of this function is the maximiser for the Motsch-Tadmor envelope."""
    bd = beta * D

    def s(r):
        return (1.0 - bd) * r * r + bd * X0 * r + 1.0 + (Ahat / K) * (1.0 + r * r) ** (1.0 - 0.5 * beta)
    return s


def envelope_max(kernel: CommunicationKernel, X0: float, D: int = 1, mt=None) -> tuple:
    """``sup_{r >= X0} (r - X0) phi(r)^D`` and its maximiser.

    ``mt`` is ``(K, A_hat)`` (or ``(a_bar, A_star)`` for the hierarchical
    Motsch-Tadmor envelope, up to the constant factor ``a_bar + A_star``).
    Returns ``(inf, inf)`` when unbounded and ``(limit, inf)`` when the
    supremum is only approached at infinity.
    """
    if X0 < 0:
        raise ValueError("X0 must be non-negative")
    if D < 1:
        raise ValueError("D must be a positive integer")
    g = envelope_objective(kernel, X0, D, mt)
    if mt is not None and mt[0] == 0:
        return math.inf, math.inf
    if isinstance(kernel, PowerKernel):
        beta = kernel.beta
        bd = beta * D
        if bd < 1 and not _near(bd, 1.0):
            return math.inf, math.inf
        if _near(bd, 1.0):
            return (1.0 if mt is None else mt[0] ** (-D)), math.inf
        if mt is None:
            r = cs_power_argmax(beta, D, X0)
            return float(g(r)), r
        K, Ahat = mt
        if beta == 2.0:
            r = (D * X0 + math.sqrt((D * X0) ** 2 + (2 * D - 1) * (1.0 + Ahat / K))) / (2 * D - 1)
            return float(g(r)), r
        s = mt_stationarity(beta, D, X0, K, Ahat)
        hi = X0 + ROOT_CEILING * max(1.0, X0)
        if s(hi) > 0:
            raise EnvelopeError(f"stationary point beyond the search ceiling {hi:g}")
        r = brentq(s, X0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        return float(g(r)), r
    return _numeric_envelope(kernel, X0, D, mt, g)


def _numeric_envelope(kernel, X0, D, mt, g) -> tuple:
    limit = None
    if not kernel.tail_finite:
        if not isinstance(kernel, TableKernel):
            raise EnvelopeError("envelope boundedness is undeclared for this kernel")
        gd = kernel.tail_beta * D
        if gd < 1 and not _near(gd, 1.0):
            return math.inf, math.inf
        c = kernel._tail_scale()
        limit = c ** D if mt is None else (c / mt[0]) ** D
    span = ROOT_CEILING * max(1.0, X0)
    pts = X0 + np.concatenate(([0.0], span * np.logspace(-9, 0, 4000)))
    vals = g(pts)
    k = int(np.argmax(vals))
    if k == pts.size - 1:
        if limit is not None:
            return limit, math.inf
        raise EnvelopeError(f"envelope still increasing at the search ceiling {pts[-1]:g}")
    lo, hi = pts[max(k - 1, 0)], pts[k + 1]
    val, r = golden_section_max(lambda x: float(g(x)), lo, hi)
    if limit is not None and limit > val:
        return limit, math.inf
    return val, r


def decay_estimate_hl(H: int, omega: float, V0: float, t: float) -> float:
    """``V0 * e^{-omega t} * sum_{n<H} (omega t)^n / n!``."""
    return V0 * gamma_tail(H, omega * t)


def _first_crossing(G: Callable, X0: float, level: float, r_peak: float) -> float:
    """Smallest ``r >= X0`` with ``G(r) > level`` (searched below ``r_peak``)."""
    if G(X0) > level:
        return X0
    if r_peak == math.inf:
        hi = X0 + max(1.0, X0)
        while G(hi) <= level:
            hi = X0 + 2.0 * (hi - X0)
            if hi > 1e300:
                return math.inf
    else:
        hi = r_peak
    pts = X0 + (hi - X0) * np.linspace(0.0, 1.0, 257)
    vals = np.array([G(p) for p in pts])
    above = np.nonzero(vals > level)[0]
    if above.size == 0:
        return math.inf
    j = above[0]
    lo, hi = pts[j - 1], pts[j]
    while hi - lo > 1e-13 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if G(mid) > level:
            hi = mid
        else:
            lo = mid
    return hi


def _inflate(r: float) -> float:
    return r * (1.0 + SAFETY_INFLATION)


# --- certificates -----------------------------------------------------------

def _initial(state0: AgentState) -> tuple:
    X0, V0 = diameters(state0)
    return X0, V0


def check_reversible(g: InteractionGraph, pi, kernel: CommunicationKernel, alpha: float,
                     state0: AgentState) -> FlockingCertificate:
    """Poincare-inequality certificate (Cucker-Smale rates only)."""
    if pi is None:
        raise GraphError("reversible certificate needs a reversible measure")
    pi = np.asarray(pi, dtype=float)
    c_P = poincare_constant(g, pi)
    pi_star = float(pi.min())
    X0, _ = _initial(state0)
    v = state0.v
    v_star = pi @ v
    lhs = math.sqrt(float(pi @ np.sum((v - v_star) ** 2, axis=1)))
    coef = alpha * c_P * math.sqrt(pi_star) / 2.0
    integral = kernel.tail_integral(X0)
    threshold = coef * integral
    holds = lhs < threshold
    radius = rate = pre = None
    if holds:
        radius = solve_xm(lambda r: coef * float(kernel(r)), X0, lhs, total=threshold)
        rate = alpha * c_P * float(kernel(radius))
        pre = 2.0 * lhs / math.sqrt(pi_star)
    return FlockingCertificate(
        regime="reversible", model="CS", holds=holds, lhs=lhs, threshold=threshold,
        margin=threshold - lhs, radius=radius, rate=rate, decay_prefactor=pre,
        witness={"c_P": c_P, "pi_star": pi_star, "v_star": v_star, "X_M": radius,
                 "tail_integral": integral})


def check_scrambling(g: InteractionGraph, kernel: CommunicationKernel, alpha: float,
                     state0: AgentState, model: str = "CS") -> FlockingCertificate:
    check_model(model)
    M = g.weights if model == "CS" else mt_matrix(g)
    chi = scrambling_coefficient(M)
    if not chi > 0:
        raise GraphError("scrambling coefficient vanishes; the scrambling assumption fails")
    X0, V0 = _initial(state0)
    integral = kernel.tail_integral(X0)
    threshold = alpha * chi * integral
    holds = V0 < threshold
    radius = rate = pre = None
    if holds:
        radius = solve_xm(lambda r: alpha * chi * float(kernel(r)), X0, V0, total=threshold)
        rate = alpha * chi * float(kernel(radius))
        pre = V0
    return FlockingCertificate(
        regime="scrambling", model=model, holds=holds, lhs=V0, threshold=threshold,
        margin=threshold - V0, radius=radius, rate=rate, decay_prefactor=pre,
        witness={"chi": chi, "X_M": radius, "tail_integral": integral})


def check_hierarchical(g: InteractionGraph, kernel: CommunicationKernel, alpha: float,
                       state0: AgentState, model: str = "CS") -> FlockingCertificate:
    check_model(model)
    if not is_hierarchical(g) or g.n < 2:
        raise GraphError("hierarchical certificate needs a hierarchical graph with n >= 2")
    _, H = height(g)
    X0, V0 = _initial(state0)
    A_star = float(g.row_sums()[1:].min())
    witness = {"H": H, "A_star": A_star}
    note = ""
    if model == "CS":
        const = alpha * A_star / H
        try:
            env, r_star = envelope_max(kernel, X0, 1)
        except EnvelopeError as exc:
            env, r_star, note = 0.0, math.nan, str(exc)
        threshold = const * env

        def omega(r):
            return hl_rate("CS", alpha, A_star, float(kernel(r)))
        witness["C_HL"] = const
    else:
        B_star = float(mt_matrix(g).sum(axis=1)[1:].min())
        a_bar = float(g.offsets[1:].max())
        const = alpha * B_star / H
        witness.update(M_HL=const, B_star=B_star, a_bar=a_bar)
        if a_bar == 0:
            env, r_star = math.inf, math.inf
            threshold = math.inf
        else:
            try:
                env, r_star = envelope_max(kernel, X0, 1, mt=(a_bar, A_star))
            except EnvelopeError as exc:
                env, r_star, note = 0.0, math.nan, str(exc)
            threshold = const * (a_bar + A_star) * env

        def omega(r):
            return hl_rate("MT", alpha, A_star, float(kernel(r)), B_star, a_bar)
    witness["r_star"] = r_star
    holds = V0 < threshold
    radius = rate = None
    if holds:
        r0 = _first_crossing(lambda r: (r - X0) * omega(r) / H, X0, V0, r_star)
        radius = _inflate(r0)
        rate = omega(radius)
    return FlockingCertificate(
        regime="hierarchical", model=model, holds=holds, lhs=V0, threshold=threshold,
        margin=threshold - V0, radius=radius, rate=rate, witness=witness,
        decay_prefactor=V0 if holds else None, H=H, note=note)


def check_general(g: InteractionGraph, kernel: CommunicationKernel, alpha: float,
                  state0: AgentState, model: str = "CS") -> FlockingCertificate:
    check_model(model)
    _, D = coalescence_diameter(g)
    if D is None or D == math.inf:
        raise GraphError("general-leadership certificate needs a unique closed class (finite D)")
    D = int(D)
    X0, V0 = _initial(state0)
    positive = g.weights[g.weights > 0]
    A_hat = float(positive.min())
    witness = {"D": D, "A_hat": A_hat}
    note = ""
    K = None
    mt = None
    if model == "CS":
        A_bar_eff = float(g.row_sums().max())
        witness["A_bar"] = A_bar_eff
    else:
        K = mt_denominator_bound(g)
        if K is None:
            raise GraphError("Motsch-Tadmor general certificate needs K (no qualifying edge)")
        A_bar_eff = float(mt_matrix(g).sum(axis=1).max())
        mt = (K, A_hat)
        witness.update(K=K, B_bar=A_bar_eff)
    const = alpha * (A_hat / D) ** D * ((D - 1) / A_bar_eff) ** (D - 1) * math.exp(1 - D)
    witness["C_GL" if model == "CS" else "M_GL"] = const
    try:
        env, r_star = envelope_max(kernel, X0, D, mt)
    except EnvelopeError as exc:
        env, r_star, note = 0.0, math.nan, str(exc)
    witness["r_star"] = r_star
    threshold = const * env
    holds = V0 < threshold
    radius = rate = step = contraction = None
    if holds:
        obj = envelope_objective(kernel, X0, D, mt)
        r0 = _first_crossing(lambda r: const * float(obj(r)), X0, V0, r_star)
        radius = _inflate(r0)
        psi_r = float(kernel(radius))
        if D == 1:
            low = A_hat * psi_r if model == "CS" else A_hat * psi_r / (K + A_hat * psi_r)
            rate = alpha * low
        else:
            step = (D - 1) / (alpha * A_bar_eff)
            contraction = gl_contraction(model, alpha, D, A_hat, A_bar_eff, psi_r, step, K)
            rate = -math.log1p(-contraction) / step
        witness["t0"] = step
    return FlockingCertificate(
        regime="general", model=model, holds=holds, lhs=V0, threshold=threshold,
        margin=threshold - V0, radius=radius, rate=rate, witness=witness,
        decay_prefactor=V0 if holds else None, step=step, contraction=contraction, note=note)


def certify_all(g: InteractionGraph, kernel: CommunicationKernel, alpha: float, state0: AgentState,
                model: str, profile) -> list:
    """One certificate per applicable regime."""
    certs = []
    if profile.reversible and model == "CS" and g.n > 1:
        certs.append(check_reversible(g, profile.pi, kernel, alpha, state0))
    if profile.scrambling and g.n > 1:
        try:
            certs.append(check_scrambling(g, kernel, alpha, state0, model))
        except GraphError:
            pass  # chi(B) can vanish only through a degenerate MT matrix
    if profile.hierarchical and g.n > 1:
        certs.append(check_hierarchical(g, kernel, alpha, state0, model))
    if profile.general_leadership and g.n > 1:
        certs.append(check_general(g, kernel, alpha, state0, model))
    return certs


def best_certificate(certs: list) -> Optional[FlockingCertificate]:
    """Largest relative margin among holding certificates (unconditional wins)."""
    holding = [c for c in certs if c.holds]
    if not holding:
        return None

    def key(c):
        if c.unconditional:
            return math.inf
        return c.margin / c.threshold if c.threshold > 0 else -math.inf
    return max(holding, key=key)
