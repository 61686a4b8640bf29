"""Lossy generalized maximum flow and minimum-cost flow.

Every edge ``e = (u, w)`` carries a capacity ``c(e)`` on the flow entering
it and a multiplier ``gamma(e) = gnum / gden <= 1``: sending ``f`` into
``e`` delivers ``gamma(e) f`` at ``w``. The value of a flow is the net
amount delivered to the sink.

The drivers follow a fixed pipeline:

1. Give the sink a single in-edge (:func:`normalize_sink`).
2. Drop vertices that are too lossy to matter or cannot reach the sink
   (:func:`prune`).
3. Solve a penalized linear program with the interior-point method
   (:func:`build_maxflow_lp`, :func:`build_mincost_lp`).
4. Turn the nearly feasible result into an exactly feasible flow
   (:func:`repair_flow`).
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .ipm import CanonicalLP, IpmConfig, IpmError, DirectBackend, IterativeBackend, interior_point
from .linalg import DiagMatrix, solve_gram
from .mmatrix import AugSystem, MMatrixConfig, solve_augmented

__all__ = [
    "FlowNetwork",
    "FlowReport",
    "FlowResult",
    "GenFlowConfig",
    "PruneResult",
    "FlowLP",
    "RepairError",
    "PenaltyError",
    "normalize_sink",
    "least_lossy_tree",
    "prune",
    "eps_flow",
    "build_maxflow_lp",
    "build_mincost_lp",
    "StructuredBackend",
    "structured_backend",
    "repair_flow",
    "report",
    "max_flow",
    "min_cost_flow",
]


class RepairError(ValueError):
    """Input to :func:`repair_flow` violates the approximation bound."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class PenaltyError(IpmError):
    """Penalty variables of the LP solution did not collapse."""


# -- network -------------------------------------------------------------------

def _int_array(values, name):
    arr = np.asarray(values)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name} must be integers")
    return arr.astype(np.int64).ravel()


@dataclass(frozen=True)
class FlowNetwork:
    """Directed network with integer capacities, rational multipliers
    ``gnum/gden <= 1`` and optional integer costs.

    Vertices are ``0..n-1``; edge ``j`` runs ``tail[j] -> head[j]``.
    """

    n: int
    tail: np.ndarray
    head: np.ndarray
    cap: np.ndarray
    gnum: np.ndarray
    gden: np.ndarray
    s: int
    t: int
    cost: np.ndarray | None = None

    def __post_init__(self):
        for name in ("tail", "head", "cap", "gnum", "gden"):
            object.__setattr__(self, name, _int_array(getattr(self, name), name))
        m = self.tail.size
        for name in ("head", "cap", "gnum", "gden"):
            if getattr(self, name).size != m:
                raise ValueError(f"{name} has {getattr(self, name).size} entries, expected {m}")
        if self.cost is not None:
            cost = _int_array(self.cost, "cost")
            if cost.size != m:
                raise ValueError(f"cost has {cost.size} entries, expected {m}")
            if np.any(cost < 0):
                raise ValueError("costs must be nonnegative")
            object.__setattr__(self, "cost", cost)
        if self.n < 2:
            raise ValueError("network needs at least two vertices")
        if not (0 <= self.s < self.n and 0 <= self.t < self.n) or self.s == self.t:
            raise ValueError("s and t must be distinct vertices")
        if m and (self.tail.min() < 0 or self.head.min() < 0
                  or max(self.tail.max(), self.head.max()) >= self.n):
            raise ValueError("edge endpoint out of range")
        if np.any(self.tail == self.head):
            raise ValueError("self-loops are not allowed")
        if np.any(self.cap < 1):
            raise ValueError("capacities must be >= 1")
        if np.any(self.gnum < 1) or np.any(self.gden < 1):
            raise ValueError("gamma numerator and denominator must be >= 1")
        if np.any(self.gnum > self.gden):
            raise ValueError("gamma must be <= 1 (lossy network)")
        for name in ("tail", "head", "cap", "gnum", "gden"):
            getattr(self, name).setflags(write=False)
        if self.cost is not None:
            self.cost.setflags(write=False)

    @classmethod
    def from_edges(cls, n, edges, s, t):
        """Build from ``(tail, head, cap, gnum, gden[, cost])`` tuples."""
        edges = list(edges)
        has_cost = {len(e) for e in edges}
        if has_cost - {5, 6} or len(has_cost) > 1:
            raise ValueError("edges must all have 5 fields or all have 6")
        cols = list(zip(*edges)) if edges else [[]] * 5
        cost = cols[5] if edges and len(edges[0]) == 6 else None
        return cls(n=n, tail=cols[0], head=cols[1], cap=cols[2], gnum=cols[3],
                   gden=cols[4], s=s, t=t, cost=cost)

    @property
    def m(self):
        return self.tail.size

    @property
    def gamma(self):
        return self.gnum / self.gden

    @property
    def U(self):
        vals = [1, self.cap.max(initial=1), self.gden.max(initial=1)]
        if self.cost is not None:
            vals.append(self.cost.max(initial=1))
        return int(max(vals))

    @property
    def has_costs(self):
        return self.cost is not None

    def edges(self):
        out = []
        for j in range(self.m):
            e = (int(self.tail[j]), int(self.head[j]), int(self.cap[j]),
                 int(self.gnum[j]), int(self.gden[j]))
            if self.cost is not None:
                e += (int(self.cost[j]),)
            out.append(e)
        return out

    def subnetwork(self, keep_vertices, keep_edges):
        """Restrict to the given vertices and edges, renumbering both.

        Returns ``(net, vertex_map, edge_ids)`` where ``vertex_map[old]`` is
        the new id or ``-1`` and ``edge_ids[new]`` is the old edge id.
        """
        keep_vertices = np.asarray(keep_vertices, dtype=bool)
        vmap = np.full(self.n, -1, dtype=np.int64)
        vmap[keep_vertices] = np.arange(int(keep_vertices.sum()))
        eids = np.flatnonzero(keep_edges)
        net = FlowNetwork(
            n=int(keep_vertices.sum()), tail=vmap[self.tail[eids]],
            head=vmap[self.head[eids]], cap=self.cap[eids], gnum=self.gnum[eids],
            gden=self.gden[eids], s=int(vmap[self.s]), t=int(vmap[self.t]),
            cost=None if self.cost is None else self.cost[eids],
        )
        return net, vmap, eids


@dataclass(frozen=True)
class FlowReport:
    """Value, cost and worst violations of a flow."""

    value: float
    cost: float | None
    capacity_violation: float
    conservation_violation: float

    @property
    def feasible(self):
        return self.capacity_violation == 0 and self.conservation_violation <= 1e-10


@dataclass(frozen=True)
class FlowResult:
    """Output of the flow drivers.

    ``flow`` is aligned with the input network's edges. ``iterations``
    merges the interior-point counters of every LP solved.
    """

    flow: np.ndarray
    value: float
    cost: float | None
    report: FlowReport
    iterations: dict = field(default_factory=dict)
    lp_value: float | None = None


@dataclass(frozen=True)
class GenFlowConfig:
    """Driver settings.

    ``backend`` selects the interior-point linear solver:

    * ``structured``: block reduction, the default.
    * ``dense``: assembles the full normal matrix.
    * ``iterative``: conjugate gradients.

    ``inner`` picks how the structured backend solves its reduced M-matrix
    system: ``direct`` or ``mmatrix``.
    """

    epsilon: float = 1e-2
    mode: str = "practical"
    seed: int | None = None
    backend: str = "structured"
    inner: str = "direct"
    observer: object = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.mode not in ("practical", "paper_exact"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.backend not in ("structured", "dense", "iterative"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.inner not in ("direct", "mmatrix"):
            raise ValueError(f"unknown inner solver {self.inner!r}")


def report(net: FlowNetwork, flow) -> FlowReport:
    """Value, cost and violations of ``flow`` (amount entering each edge)."""
    f = np.asarray(flow, dtype=float)
    if f.shape != (net.m,):
        raise ValueError(f"flow has shape {f.shape}, expected ({net.m},)")
    inflow = np.bincount(net.head, weights=net.gamma * f, minlength=net.n)
    outflow = np.bincount(net.tail, weights=f, minlength=net.n)
    balance = inflow - outflow
    internal = np.ones(net.n, dtype=bool)
    internal[[net.s, net.t]] = False
    cons = float(np.abs(balance[internal]).max(initial=0.0))
    capv = float(np.maximum(f - net.cap, 0.0).max(initial=0.0))
    cost = None if net.cost is None else float(net.cost @ f)
    return FlowReport(value=float(balance[net.t]), cost=cost,
                      capacity_violation=capv, conservation_violation=cons)


# -- preprocessing ---------------------------------------------------------------

def _reach(n, src, dst, start):
    """Boolean mask of vertices reachable from ``start`` along src->dst edges."""
    adj = [[] for _ in range(n)]
    for a, b in zip(src.tolist(), dst.tolist()):
        adj[a].append(b)
    seen = np.zeros(n, dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if not seen[w]:
                seen[w] = True
                queue.append(w)
    return seen


def normalize_sink(net: FlowNetwork) -> FlowNetwork:
    """Give the sink exactly one in-edge and no out-edges.

    If needed, adds a fresh sink ``t'`` and an edge ``t -> t'`` with
    ``gamma = 1``. Its capacity is the total capacity into ``t``, which
    never binds. The new edge gets cost 0, so costs are unchanged.
    """
    into_t = net.head == net.t
    out_t = net.tail == net.t
    if into_t.sum() == 1 and not out_t.any():
        return net
    cap = int(max(net.cap[into_t].sum(), 1))
    cost = None if net.cost is None else np.append(net.cost, 0)
    return FlowNetwork(
        n=net.n + 1, tail=np.append(net.tail, net.t), head=np.append(net.head, net.n),
        cap=np.append(net.cap, cap), gnum=np.append(net.gnum, 1),
        gden=np.append(net.gden, 1), s=net.s, t=net.n, cost=cost,
    )


def sink_edge(net: FlowNetwork) -> int:
    """Index of the single in-edge of ``t`` in a normalized network."""
    idx = np.flatnonzero(net.head == net.t)
    if idx.size != 1:
        raise ValueError("network is not sink-normalized")
    return int(idx[0])


def least_lossy_tree(net: FlowNetwork):
    """Maximum path gain from ``s`` to every vertex and the tree achieving it.

    Dijkstra on weights ``-log gamma``. Ties go to the smallest edge id.
    Returns ``(parent_edge, gain)``. ``parent_edge[v]`` is ``-1`` for ``s``
    and for unreachable vertices, and an unreachable vertex has gain 0.
    """
    n = net.n
    out = [[] for _ in range(n)]
    weight = -np.log(net.gamma)
    for j in range(net.m):
        out[int(net.tail[j])].append(j)
    dist = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    dist[net.s] = 0.0
    heap = [(0.0, net.s)]
    done = np.zeros(n, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for j in out[u]:
            w = int(net.head[j])
            nd = d + weight[j]
            if nd < dist[w] or (nd == dist[w] and not done[w] and j < parent[w]):
                dist[w] = nd
                parent[w] = j
                heapq.heappush(heap, (nd, w))
    # Gains as exact products along tree paths rather than exp(-dist).
    gain = np.zeros(n)
    gain[net.s] = 1.0
    for v in _tree_order(parent, net.tail, n, net.s):
        j = parent[v]
        gain[v] = gain[net.tail[j]] * net.gamma[j]
    return parent, gain


def _tree_order(parent, other_end, n, root):
    """Vertices of a tree in order of increasing depth (root excluded).

    ``parent[v]`` is the tree edge at ``v`` and ``other_end[edge]`` the
    neighbour closer to the root.
    """
    children = [[] for _ in range(n)]
    for v in range(n):
        if parent[v] >= 0 and v != root:
            children[int(other_end[parent[v]])].append(v)
    order = []
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in children[u]:
            order.append(v)
            queue.append(v)
    return order


@dataclass(frozen=True)
class PruneResult:
    """Pruned network with maps back to the input.

    ``vertex_map[old]`` is the new id or ``-1``; ``edge_ids[new]`` is the
    old edge id. ``trivial`` means ``t`` was cut off and the max flow is 0.
    """

    net: FlowNetwork | None
    vertex_map: np.ndarray
    edge_ids: np.ndarray
    trivial: bool
    threshold: float

    def lift(self, flow, m):
        """Extend a flow on the pruned edges to the original ``m`` edges."""
        full = np.zeros(m)
        if not self.trivial:
            full[self.edge_ids] = flow
        return full


def prune(net: FlowNetwork, epsilon) -> PruneResult:
    """Delete vertices with path gain below ``eps / (2 m n U)`` or no path to
    ``t``, together with their edges."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    threshold = epsilon / (2 * max(net.m, 1) * net.n * net.U)
    _, gain = least_lossy_tree(net)
    keep = gain >= threshold
    keep[net.s] = True
    keep[net.t] = gain[net.t] > 0
    if not keep[net.t]:
        return PruneResult(None, np.full(net.n, -1), np.zeros(0, dtype=np.int64), True, threshold)
    while True:
        live = keep[net.tail] & keep[net.head]
        to_t = _reach(net.n, net.head[live], net.tail[live], net.t)
        new_keep = keep & to_t
        new_keep[net.t] = True
        if not new_keep[net.s]:
            return PruneResult(None, np.full(net.n, -1), np.zeros(0, dtype=np.int64),
                               True, threshold)
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    # Edges into s or out of t carry nothing useful.
    live = keep[net.tail] & keep[net.head] & (net.head != net.s) & (net.tail != net.t)
    sub, vmap, eids = net.subnetwork(keep, live)
    return PruneResult(sub, vmap, eids, False, threshold)


# -- linear programs ---------------------------------------------------------------

def eps_flow(net: FlowNetwork, epsilon, mode="practical"):
    """Approximation target for the LP flow."""
    m, n, U = max(net.m, 1), net.n, net.U
    if mode == "paper_exact":
        return epsilon**2 / (64 * m**2 * n**2 * U**3)
    return epsilon / (16 * m * U)


@dataclass(frozen=True)
class FlowLP:
    """A flow LP together with the block layout the structured backend needs.

    Variables are ``[x1 | x2 | x3 | x4 | x5]`` (flow, capacity slack,
    overflow, conservation surplus, conservation deficit). Rows are the
    kept vertices followed by one capacity row per edge.
    """

    lp: CanonicalLP
    incidence: sp.csr_matrix
    rows: np.ndarray
    eps_flow: float
    penalty: float

    @property
    def m_edges(self):
        return self.incidence.shape[1]

    @property
    def n_rows(self):
        return self.incidence.shape[0]

    def split(self, x):
        m, k = self.m_edges, self.n_rows
        return x[:m], x[m:2 * m], x[2 * m:3 * m], x[3 * m:3 * m + k], x[3 * m + k:]


def _incidence(net: FlowNetwork, rows):
    """Rows ``rows`` of the gain incidence matrix: ``-1`` at tails, ``gamma``
    at heads."""
    pos = np.full(net.n, -1, dtype=np.int64)
    pos[rows] = np.arange(len(rows))
    r_t, r_h = pos[net.tail], pos[net.head]
    cols = np.arange(net.m)
    mt, mh = r_t >= 0, r_h >= 0
    data = np.concatenate([-np.ones(mt.sum()), net.gamma[mh]])
    ri = np.concatenate([r_t[mt], r_h[mh]])
    ci = np.concatenate([cols[mt], cols[mh]])
    return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), net.m))


def _assemble(net, rows, b_rows, c1, penalty, y_cap):
    A = _incidence(net, rows)
    k, m = A.shape
    I_m = sp.identity(m, format="csr")
    I_k = sp.identity(k, format="csr")
    Abar = sp.bmat([
        [A, None, None, I_k, -I_k],
        [I_m, I_m, -I_m, None, None],
    ], format="csr", dtype=float)
    if Abar.shape[0] != k + m:  # bmat drops empty blocks when k == 0
        Abar = sp.csr_matrix(Abar, shape=(k + m, 3 * m + 2 * k))
    b = np.concatenate([b_rows, net.cap.astype(float)])
    c = np.concatenate([c1, np.zeros(m), np.full(m, penalty), np.full(2 * k, penalty)])
    y0 = np.concatenate([np.zeros(k), np.full(m, y_cap)])
    return A, Abar, b, c, y0


def build_maxflow_lp(net: FlowNetwork, eps_f) -> FlowLP:
    """Penalized max-flow LP on a normalized, pruned network.

    The objective is ``-gamma(e_t) x1[e_t] + P (1^T x3 + 1^T x4 + 1^T x5)``
    with ``P = 4U / eps_f``. Its optimum is minus the maximum flow value.
    """
    U = net.U
    rows = np.array([v for v in range(net.n) if v not in (net.s, net.t)], dtype=np.int64)
    et = sink_edge(net)
    penalty = 4 * U / eps_f
    c1 = np.zeros(net.m)
    c1[et] = -net.gamma[et]
    A, Abar, b, c, y0 = _assemble(net, rows, np.zeros(len(rows)), c1, penalty, -2 * U / eps_f)
    T = (net.n * U + 1) * penalty + 1
    lp = CanonicalLP(A=Abar, b=b, c=c, T=T, lambda_min=2.0, y0=y0)
    return FlowLP(lp=lp, incidence=A, rows=rows, eps_flow=eps_f, penalty=penalty)


def build_mincost_lp(net: FlowNetwork, F, eps_f, penalty=None) -> FlowLP:
    """Penalized min-cost LP delivering exactly ``F`` to ``t``.

    The objective is ``q^T x1 + P' (1^T x3 + 1^T x4 + 1^T x5)`` with
    ``P' = 4 m U^2 / eps_f`` unless ``penalty`` is given. The sink row is
    included.
    """
    if net.cost is None:
        raise ValueError("min-cost LP needs edge costs")
    if F < 0:
        raise ValueError("F must be >= 0")
    U, m = net.U, net.m
    rows = np.array([v for v in range(net.n) if v != net.s], dtype=np.int64)
    if penalty is None:
        penalty = 4 * m * U**2 / eps_f
    b_rows = np.zeros(len(rows))
    b_rows[np.flatnonzero(rows == net.t)[0]] = F
    A, Abar, b, c, y0 = _assemble(net, rows, b_rows, net.cost.astype(float), penalty,
                                  -penalty / 4)
    T = (net.n * U + 1) * penalty
    lp = CanonicalLP(A=Abar, b=b, c=c, T=T, lambda_min=2.0, y0=y0)
    return FlowLP(lp=lp, incidence=A, rows=rows, eps_flow=eps_f, penalty=penalty)


# -- structured backend --------------------------------------------------------------

class StructuredBackend:
    """Solves ``A_bar S^{-2} A_bar^T + v v^T`` for a :class:`FlowLP`.

    Slack blocks map to the augmented form as ``D1^2 = S1^{-2}``,
    ``D2^2 = S4^{-2} + S5^{-2}`` and ``D3^2 = S2^{-2} + S3^{-2}``.
    With ``inner="direct"`` the Schur complement is factored densely in
    place. With ``inner="mmatrix"`` each call goes through
    :func:`solve_augmented`.
    """

    def __init__(self, flp: FlowLP, inner="direct", rng=None, mm_cfg=None):
        self.flp = flp
        self.inner = inner
        self.rng = np.random.default_rng() if rng is None else rng
        self.mm_cfg = mm_cfg
        self.A = flp.incidence.tocsc()
        self.Ad = self.A.toarray()
        self.m = self.A.shape[1]
        self.k = self.A.shape[0]
        self.calls = 0
        self.last_iters = 0

    def blocks(self, s):
        m, k = self.m, self.k
        s1, s2, s3 = s[:m], s[m:2 * m], s[2 * m:3 * m]
        s4, s5 = s[3 * m:3 * m + k], s[3 * m + k:]
        d1sq = 1.0 / s1**2
        d2sq = 1.0 / s4**2 + 1.0 / s5**2
        d3sq = 1.0 / s2**2 + 1.0 / s3**2
        return d1sq, d2sq, d3sq

    def aug_system(self, s, v):
        d1sq, d2sq, d3sq = self.blocks(s)
        v = np.zeros(self.k + self.m) if v is None else v
        return AugSystem(self.A, DiagMatrix(np.sqrt(d1sq)), DiagMatrix(np.sqrt(d2sq)),
                         DiagMatrix(np.sqrt(d3sq)), v)

    def __call__(self, s, v, rhs, tol):
        self.calls += 1
        self.last_iters = 1
        if self.inner == "mmatrix":
            return solve_augmented(self.aug_system(s, v), rhs, tol, self.mm_cfg,
                                   self.rng, inner="mmatrix")
        d1sq, d2sq, d3sq = self.blocks(s)
        w2 = d1sq + d3sq
        k = self.k
        ratio = d1sq / w2
        has_v = v is not None and np.any(v)
        # One factorization serves both right-hand sides.
        B = np.column_stack([rhs, v]) if has_v else rhs[:, None]
        B1, B2 = B[:k], B[k:]
        if k:
            # Factor A_S rather than forming A_S A_S^T: the products lose the
            # small grounding terms once slacks span many magnitudes.
            AS = np.hstack([self.Ad * np.sqrt(d1sq * d3sq / w2), np.diag(np.sqrt(d2sq))])
            Y1 = solve_gram(AS, B1 - self.Ad @ (ratio[:, None] * B2))
            Y2 = (B2 - d1sq[:, None] * (self.Ad.T @ Y1)) / w2[:, None]
            Y = np.vstack([Y1, Y2])
        else:
            Y = B2 / w2[:, None]
        y = Y[:, 0]
        if not has_v:
            return y
        z = Y[:, 1]
        return y - z * (float(v @ y) / (1.0 + float(v @ z)))


def structured_backend(flp: FlowLP, inner="direct", rng=None, mm_cfg=None):
    return StructuredBackend(flp, inner=inner, rng=rng, mm_cfg=mm_cfg)


def _backend_for(flp: FlowLP, cfg: GenFlowConfig, rng):
    if cfg.backend == "dense":
        return DirectBackend(flp.lp.A)
    if cfg.backend == "iterative":
        return IterativeBackend(flp.lp.A)
    return StructuredBackend(flp, inner=cfg.inner, rng=rng)


# -- repair --------------------------------------------------------------------------

def _toward_t_tree(net: FlowNetwork):
    """BFS tree on reversed edges from ``t``: ``child_edge[v]`` is the edge
    leaving ``v`` toward ``t`` (smallest id among ties)."""
    into = [[] for _ in range(net.n)]
    for j in range(net.m):
        into[int(net.head[j])].append(j)
    child = np.full(net.n, -1, dtype=np.int64)
    seen = np.zeros(net.n, dtype=bool)
    seen[net.t] = True
    queue = deque([net.t])
    while queue:
        w = queue.popleft()
        for j in into[w]:
            u = int(net.tail[j])
            if not seen[u]:
                seen[u] = True
                child[u] = j
                queue.append(u)
    return child


def repair_flow(net: FlowNetwork, flow, epsilon, eps_f=None, scale_factor=None):
    """Exact flow from an approximately feasible one.

    1. Walk the least-lossy tree from the leaves toward ``s``. Where a
       vertex sends out more than it receives, raise the flow on its tree
       in-edge.
    2. Walk a tree directed toward ``t`` from the leaves. Where a vertex
       receives more than it sends out, raise the flow on its tree out-edge.
    3. Scale by ``(1 + eps/(4U))^{-1}``. If the balancing passes overfilled
       an edge by more than that factor allows, scale further down to the
       largest capacity-feasible factor.

    ``eps_f`` (default: practical :func:`eps_flow`) is the tolerated input
    violation. Edges are assumed to be those of a pruned network.
    """
    f = np.maximum(np.asarray(flow, dtype=float), 0.0)
    eps_f = eps_flow(net, epsilon) if eps_f is None else eps_f
    rep = report(net, f)
    slack = 1e-9 * max(1.0, float(net.cap.max(initial=1)))
    if rep.capacity_violation > eps_f + slack or rep.conservation_violation > eps_f + slack:
        raise RepairError(
            f"input is not {eps_f:.3e}-approximate (capacity {rep.capacity_violation:.3e}, "
            f"conservation {rep.conservation_violation:.3e})", rep)
    if not np.any(f):
        return f
    gamma = net.gamma
    internal = np.ones(net.n, dtype=bool)
    internal[[net.s, net.t]] = False

    def balance():
        return (np.bincount(net.head, weights=gamma * f, minlength=net.n)
                - np.bincount(net.tail, weights=f, minlength=net.n))

    parent, _ = least_lossy_tree(net)
    bal = balance()
    for v in reversed(_tree_order(parent, net.tail, net.n, net.s)):
        if internal[v] and bal[v] < 0:
            j = parent[v]
            add = -bal[v] / gamma[j]
            f[j] += add
            bal[v] = 0.0
            bal[net.tail[j]] -= add
    child = _toward_t_tree(net)
    bal = balance()
    for v in reversed(_tree_order(child, net.head, net.n, net.t)):
        if internal[v] and bal[v] > 0:
            j = child[v]
            f[j] += bal[v]
            bal[net.head[j]] += gamma[j] * bal[v]
            bal[v] = 0.0
    factor = 1.0 / (1.0 + epsilon / (4 * net.U)) if scale_factor is None else scale_factor
    over = f * factor > net.cap
    if np.any(over):
        factor = min(factor, float((net.cap[over] / f[over]).min()))
    return f * factor


# -- drivers ---------------------------------------------------------------------------

def _zero_result(net):
    f = np.zeros(net.m)
    rep = report(net, f)
    return FlowResult(flow=f, value=0.0, cost=rep.cost, report=rep,
                      iterations={"unshift": 0, "shift": 0, "solves": 0})


def _merge_iters(*dicts):
    out = {"unshift": 0, "shift": 0, "solves": 0}
    for d in dicts:
        for key in out:
            out[key] += d.get(key, 0)
    return out


def _prepare(net, epsilon):
    if not 0 < epsilon < net.U:
        raise ValueError(f"epsilon must lie in (0, U = {net.U})")
    norm = normalize_sink(net)
    return norm, prune(norm, epsilon)


def _solve_lp(flp: FlowLP, cfg: GenFlowConfig, rng):
    backend = _backend_for(flp, cfg, rng)
    ipm_eps = min(flp.eps_flow / 2, 0.5)
    res = interior_point(flp.lp, IpmConfig(epsilon=ipm_eps), backend, observer=cfg.observer)
    x1, _, x3, x4, x5 = flp.split(res.x)
    pen = max(x3.max(initial=0.0), x4.max(initial=0.0), x5.max(initial=0.0))
    if pen > flp.eps_flow / 2:
        raise PenaltyError(f"penalty variable {pen:.3e} exceeds eps_flow/2 = "
                           f"{flp.eps_flow / 2:.3e}", res.trace)
    return x1, res


def max_flow(net: FlowNetwork, cfg: GenFlowConfig | None = None) -> FlowResult:
    """Exact feasible flow with value at least the maximum minus ``epsilon``."""
    cfg = GenFlowConfig() if cfg is None else cfg
    rng = np.random.default_rng(cfg.seed)
    norm, pr = _prepare(net, cfg.epsilon)
    if pr.trivial:
        return _zero_result(net)
    sub = pr.net
    eps_f = eps_flow(sub, cfg.epsilon, cfg.mode)
    flp = build_maxflow_lp(sub, eps_f)
    x1, res = _solve_lp(flp, cfg, rng)
    f_sub = repair_flow(sub, x1, cfg.epsilon, eps_f)
    f = pr.lift(f_sub, norm.m)[:net.m]
    rep = report(net, f)
    return FlowResult(flow=f, value=rep.value, cost=rep.cost, report=rep,
                      iterations=res.iterations, lp_value=float(flp.lp.c @ res.x))


def min_cost_flow(net: FlowNetwork, cfg: GenFlowConfig | None = None) -> FlowResult:
    """Exact feasible flow with value within ``epsilon`` of the maximum and
    cost at most the minimum cost of a maximum flow."""
    if net.cost is None:
        raise ValueError("min_cost_flow needs edge costs")
    cfg = GenFlowConfig() if cfg is None else cfg
    rng = np.random.default_rng(cfg.seed)
    first = max_flow(net, GenFlowConfig(
        epsilon=cfg.epsilon / 8, mode=cfg.mode, seed=cfg.seed, backend=cfg.backend,
        inner=cfg.inner, observer=cfg.observer))
    F = first.value
    if F <= 0:
        return _zero_result(net)
    # Prune exactly as the first run did, so F stays feasible.
    norm, pr = _prepare(net, cfg.epsilon / 8)
    sub = pr.net
    eps_f = eps_flow(sub, cfg.epsilon, cfg.mode)
    flp = build_mincost_lp(sub, F, eps_f)
    x1, res = _solve_lp(flp, cfg, rng)
    x1 = (1 - cfg.epsilon / (12 * sub.U)) * x1
    f_sub = repair_flow(sub, x1, cfg.epsilon, eps_f)
    f = pr.lift(f_sub, norm.m)[:net.m]
    rep = report(net, f)
    return FlowResult(flow=f, value=rep.value, cost=rep.cost, report=rep,
                      iterations=_merge_iters(first.iterations, res.iterations),
                      lp_value=float(flp.lp.c @ res.x))
