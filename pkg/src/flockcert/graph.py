"""Weighted interaction digraphs and their structural constants.

Agents are indexed ``0..n-1``; index 0 plays the role of the leader in the
hierarchical setting. An edge ``i -> j`` exists when ``weights[i, j] > 0``,
meaning agent ``i`` listens to agent ``j``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

DETAILED_BALANCE_RTOL = 1e-10


class GraphError(ValueError):
    """Raised when a graph violates a precondition of an operation."""


@dataclass(frozen=True)
class InteractionGraph:
    """Interaction matrix ``A`` plus the Motsch-Tadmor offsets ``a``."""

    weights: np.ndarray
    offsets: np.ndarray = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise GraphError(f"weights must be a non-empty square matrix, got shape {w.shape}")
        n = w.shape[0]
        if not np.all(np.isfinite(w)):
            raise GraphError("weights must be finite")
        if np.any(w < 0):
            raise GraphError("weights must be non-negative")
        if np.any(np.diag(w) != 0):
            raise GraphError("weights must have a zero diagonal")
        a = np.zeros(n) if self.offsets is None else np.array(self.offsets, dtype=float)
        if a.shape != (n,):
            raise GraphError(f"offsets must have length {n}, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise GraphError("offsets must be finite and non-negative")
        w.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "offsets", a)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def adjacency(self) -> np.ndarray:
        """Boolean edge indicator ``A_ij > 0``."""
        return self.weights > 0

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def mt_denominators_positive(self) -> bool:
        return bool(np.all(self.offsets + self.row_sums() > 0))

    @classmethod
    def from_edges(cls, n: int, edges, offsets=None) -> "InteractionGraph":
        """Build from ``(i, j, w)`` triples (0-based). Repeated edges add up."""
        w = np.zeros((n, n))
        for i, j, wij in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i}, {j}) out of range for n={n}")
            if i == j:
                raise GraphError(f"self-loop ({i}, {i}) not allowed")
            w[i, j] += wij
        return cls(w, offsets)


# --- named families ---------------------------------------------------------

def uniform_graph(n: int, weight: Optional[float] = None, offset: float = 0.0) -> InteractionGraph:
    """Complete graph with ``A_ij = weight`` (default ``1/n``) off the diagonal."""
    c = 1.0 / n if weight is None else weight
    w = np.full((n, n), c)
    np.fill_diagonal(w, 0.0)
    return InteractionGraph(w, np.full(n, offset))


def chain_graph(n: int, weight: float = 1.0, offsets=None) -> InteractionGraph:
    """``A_{i,i-1} = weight``; the hierarchical chain ``n-1 -> ... -> 0``."""
    w = np.zeros((n, n))
    for i in range(1, n):
        w[i, i - 1] = weight
    return InteractionGraph(w, offsets)


def cycle_graph(n: int, weight: float = 1.0, offsets=None) -> InteractionGraph:
    """Directed cycle ``A_{i, i+1 mod n} = weight``."""
    if n < 2:
        raise GraphError("a cycle needs at least two agents")
    w = np.zeros((n, n))
    for i in range(n):
        w[i, (i + 1) % n] = weight
    return InteractionGraph(w, offsets)


# --- assumption profile -----------------------------------------------------

@dataclass(frozen=True)
class AssumptionProfile:
    reversible: bool
    pi: Optional[np.ndarray]
    scrambling: bool
    hierarchical: bool
    heights: Optional[np.ndarray]
    H: Optional[int]
    general_leadership: bool
    leader_class: Optional[frozenset]
    closed_classes: list = field(default_factory=list)

    def regimes(self) -> list:
        """Names of the regimes whose assumption holds, strongest first."""
        out = []
        if self.reversible:
            out.append("reversible")
        if self.scrambling:
            out.append("scrambling")
        if self.hierarchical:
            out.append("hierarchical")
        if self.general_leadership:
            out.append("general")
        return out


def _scc_labels(adj: np.ndarray) -> np.ndarray:
    _, labels = connected_components(csr_matrix(adj.astype(np.int8)), directed=True,
                                     connection="strong")
    return labels


def closed_classes(g: InteractionGraph) -> list:
    """Communication classes with no edge leaving them, ordered by smallest member."""
    adj = g.adjacency
    labels = _scc_labels(adj)
    classes = {}
    for v, lab in enumerate(labels):
        classes.setdefault(lab, []).append(v)
    closed = []
    for members in classes.values():
        lab = labels[members[0]]
        rows = adj[members]
        if np.all(labels[np.nonzero(rows)[1]] == lab):
            closed.append(frozenset(members))
    return sorted(closed, key=min)


def is_irreducible(g: InteractionGraph) -> bool:
    return g.n == 1 or len(set(_scc_labels(g.adjacency))) == 1


def is_hierarchical(g: InteractionGraph) -> bool:
    """Literal index-order check: edges only to smaller indices, every ``i > 0`` has one."""
    adj = g.adjacency
    if np.any(np.triu(adj)):
        return False
    return bool(np.all(adj[1:].any(axis=1)))


def reversible_measure(g: InteractionGraph, rtol: float = DETAILED_BALANCE_RTOL) -> Optional[np.ndarray]:
    """Positive ``pi`` with ``pi_i A_ij = pi_j A_ji``, or ``None`` if none exists.

    Ratios are propagated along a BFS spanning tree from agent 0; every
    remaining edge is then checked against the detailed-balance relation.
    """
    A = g.weights
    adj = g.adjacency
    if not np.array_equal(adj, adj.T) or not is_irreducible(g):
        return None
    n = g.n
    pi = np.full(n, np.nan)
    pi[0] = 1.0
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.nonzero(adj[i])[0]:
            if np.isnan(pi[j]):
                pi[j] = pi[i] * A[i, j] / A[j, i]
                queue.append(j)
    flow = pi[:, None] * A
    scale = np.maximum(flow, flow.T)
    if np.any(np.abs(flow - flow.T) > rtol * scale):
        return None
    return pi / pi.sum()


def detailed_balance_residual(g: InteractionGraph, pi) -> float:
    flow = np.asarray(pi, dtype=float)[:, None] * g.weights
    return float(np.max(np.abs(flow - flow.T)))


def _check_reversible_pair(g: InteractionGraph, pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (g.n,):
        raise GraphError(f"pi must have length {g.n}")
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
        raise GraphError("pi must be a probability vector")
    scale = max(float(np.max(g.weights, initial=0.0)), np.finfo(float).tiny)
    if detailed_balance_residual(g, pi) > DETAILED_BALANCE_RTOL * scale:
        raise GraphError("pi is not reversible for the interaction matrix")
    return pi


def closed_class_measure(g: InteractionGraph) -> Optional[np.ndarray]:
    """Reversible measure of the restriction to the unique closed class, zero elsewhere."""
    classes = closed_classes(g)
    if len(classes) != 1:
        return None
    members = sorted(classes[0])
    sub = InteractionGraph(g.weights[np.ix_(members, members)])
    pi_sub = reversible_measure(sub)
    if pi_sub is None:
        return None
    pi = np.zeros(g.n)
    pi[members] = pi_sub
    return pi


def poincare_constant(g: InteractionGraph, pi) -> float:
    """Spectral gap of ``L = D - A`` in ``L^2(pi)``.

    ``L`` is self-adjoint for the ``pi`` inner product, so
    ``S = Pi^{1/2} L Pi^{-1/2}`` is symmetric with the same spectrum.
    """
    pi = _check_reversible_pair(g, pi)
    if np.any(pi <= 0):
        raise GraphError("Poincare constant needs a positive measure")
    if g.n < 2:
        raise GraphError("Poincare constant is undefined for a single agent")
    A = g.weights
    L = np.diag(A.sum(axis=1)) - A
    s = np.sqrt(pi)
    S = s[:, None] * L / s[None, :]
    S = 0.5 * (S + S.T)
    eig = np.linalg.eigvalsh(S)
    return float(eig[1])


def scrambling_coefficient(M) -> float:
    """``min_{i != j} M_ij + M_ji + sum_{k != i,j} min(M_ik, M_jk)``.

    Zero exactly when some pair has no mutual edge and no common target.
    A single agent has no pairs and gives ``nan``.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if n < 2:
        return float("nan")
    best = np.inf
    for i in range(n - 1):
        overlap = np.minimum(M[i][None, :], M[i + 1:])
        overlap[:, i] = 0.0
        overlap[np.arange(n - i - 1), np.arange(i + 1, n)] = 0.0
        vals = M[i, i + 1:] + M[i + 1:, i] + overlap.sum(axis=1)
        best = min(best, float(vals.min()))
    return best


def mt_matrix(g: InteractionGraph) -> np.ndarray:
    """``B_ij = A_ij / (a_i + sum_k A_ik)``."""
    denom = g.offsets + g.row_sums()
    if np.any(denom <= 0):
        bad = np.nonzero(denom <= 0)[0].tolist()
        raise GraphError(f"Motsch-Tadmor denominator vanishes for agents {bad}")
    return g.weights / denom[:, None]


def height(g: InteractionGraph) -> tuple:
    """Longest-path heights to agent 0 and their maximum ``H`` over ``i > 0``.

    Index order is a topological order under the hierarchical assumption.
    """
    if not is_hierarchical(g):
        raise GraphError("graph is not hierarchical in its index order")
    adj = g.adjacency
    h = np.zeros(g.n, dtype=int)
    for i in range(1, g.n):
        h[i] = 1 + h[np.nonzero(adj[i])[0]].max()
    H = int(h[1:].max()) if g.n > 1 else 0
    return h, H


def hierarchical_relabeling(g: InteractionGraph) -> Optional[np.ndarray]:
    """Permutation ``p`` such that ``A[p][:, p]`` is hierarchical, if one exists.

    Never applied implicitly. Returns ``None`` when the graph is not a DAG
    with a single sink reachable from everyone.
    """
    adj = g.adjacency
    n = g.n
    outdeg = adj.sum(axis=1)
    sinks = np.nonzero(outdeg == 0)[0]
    if len(sinks) != 1:
        return None
    # Kahn's algorithm on the reversed graph, starting from the sink.
    remaining = outdeg.copy()
    order = []
    queue = deque(sinks.tolist())
    while queue:
        j = queue.popleft()
        order.append(j)
        for i in np.nonzero(adj[:, j])[0]:
            remaining[i] -= 1
            if remaining[i] == 0:
                queue.append(i)
    if len(order) != n:
        return None
    perm = np.array(order)
    return perm if is_hierarchical(InteractionGraph(g.weights[np.ix_(perm, perm)])) else None


def hop_distances(g: InteractionGraph) -> np.ndarray:
    """Shortest directed path lengths (``inf`` when unreachable, 0 on the diagonal)."""
    return shortest_path(csr_matrix(g.adjacency.astype(float)), directed=True, unweighted=True)


def coalescence_diameter(g: InteractionGraph) -> tuple:
    """Pairwise coalescence distances ``d`` and ``D = max_{i != j} d_ij``.

    ``d_ij = min_k max(dist(i, k), dist(j, k))`` over targets ``k`` reachable
    from both. A pair of coalescing paths always ends at such a common
    target, and conversely shortest paths to a common target form a
    coalescing pair; taking ``k = j`` covers a path from ``i`` to ``j`` paired
    with the empty path at ``j``. ``D`` is ``inf`` without a unique closed class
    and ``None`` for a single agent.
    """
    dist = hop_distances(g)
    n = g.n
    d = np.empty((n, n))
    for i in range(n):
        d[i] = np.maximum(dist[i][None, :], dist).min(axis=1)
    if n < 2:
        return d, None
    off = d[~np.eye(n, dtype=bool)]
    return d, float(off.max())


def spanning_tree_height(g: InteractionGraph) -> float:
    """Minimum height of an in-tree spanning all agents (``inf`` if none exists)."""
    dist = hop_distances(g)
    return float(dist.max(axis=0).min())


# --- aggregate constants ----------------------------------------------------

@dataclass(frozen=True)
class StructuralConstants:
    chi: Optional[float]
    B: Optional[np.ndarray]
    chi_B: Optional[float]
    A_star: Optional[float]
    A_hat: Optional[float]
    A_bar: float
    B_star: Optional[float]
    B_bar: Optional[float]
    K: Optional[float]
    a_bar: Optional[float]
    pi: Optional[np.ndarray]
    pi_star: Optional[float]
    c_P: Optional[float]
    heights: Optional[np.ndarray]
    H: Optional[int]
    D: Optional[float]
    d: np.ndarray

    def as_dict(self) -> dict:
        out = {}
        for key, val in self.__dict__.items():
            if isinstance(val, np.ndarray):
                val = val.tolist()
            out[key] = val
        return out


def mt_denominator_bound(g: InteractionGraph) -> Optional[float]:
    """``K = sup{a_i + sum_{k != i,j} A_ik : i != j, A_ij > 0}``.

    The supremum (not the infimum) is what makes
    ``Q(i,j) >= A_hat psi / (K + A_hat psi)`` hold on every edge.
    """
    A = g.weights
    rows, cols = np.nonzero(A > 0)
    if rows.size == 0:
        return None
    vals = g.offsets[rows] + A.sum(axis=1)[rows] - A[rows, cols]
    return float(vals.max())


def structural_constants(g: InteractionGraph) -> StructuralConstants:
    A = g.weights
    n = g.n
    rs = A.sum(axis=1)
    positive = A[A > 0]
    chi = scrambling_coefficient(A) if n > 1 else None
    B = mt_matrix(g) if g.mt_denominators_positive() else None
    chi_B = scrambling_coefficient(B) if (B is not None and n > 1) else None
    bs = B.sum(axis=1) if B is not None else None
    pi = reversible_measure(g)
    c_P = poincare_constant(g, pi) if (pi is not None and n > 1) else None
    if is_hierarchical(g) and n > 1:
        heights, H = height(g)
    else:
        heights, H = None, None
    d, D = coalescence_diameter(g)
    return StructuralConstants(
        chi=chi,
        B=B,
        chi_B=chi_B,
        A_star=float(rs[1:].min()) if n > 1 else None,
        A_hat=float(positive.min()) if positive.size else None,
        A_bar=float(rs.max()),
        B_star=float(bs[1:].min()) if (bs is not None and n > 1) else None,
        B_bar=float(bs.max()) if bs is not None else None,
        K=mt_denominator_bound(g),
        a_bar=float(g.offsets[1:].max()) if n > 1 else None,
        pi=pi,
        pi_star=float(pi.min()) if pi is not None else None,
        c_P=c_P,
        heights=heights,
        H=H,
        D=D,
        d=d,
    )


def classify(g: InteractionGraph) -> AssumptionProfile:
    classes = closed_classes(g)
    pi = reversible_measure(g)
    hier = is_hierarchical(g)
    heights, H = height(g) if hier else (None, None)
    if g.n == 1:
        scr = True
    else:
        scr = scrambling_coefficient(g.weights) > 0
    gl = len(classes) == 1
    return AssumptionProfile(
        reversible=pi is not None,
        pi=pi,
        scrambling=scr,
        hierarchical=hier,
        heights=heights,
        H=H,
        general_leadership=gl,
        leader_class=classes[0] if gl else None,
        closed_classes=classes,
    )
