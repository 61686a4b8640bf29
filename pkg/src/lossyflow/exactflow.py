"""Exact integer max-flow and min-cost flow on standard networks (gamma = 1).

Random tiny cost perturbations make the optimal flow unique with
probability at least 1/2 (isolation). A sufficiently accurate
interior-point solution then lies within 1/3 of that integral optimum and
rounds to it. Rounding is checked, not assumed; on failure the costs are
perturbed again.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .genflow import (
    FlowNetwork,
    GenFlowConfig,
    build_mincost_lp,
    max_flow,
    normalize_sink,
    prune,
    report,
    structured_backend,
)
from .ipm import IpmConfig, interior_point

__all__ = [
    "PerturbedNetwork",
    "ExactFlowResult",
    "InfeasibleFlowError",
    "IsolationError",
    "PrecisionError",
    "perturb_costs",
    "ipm_error",
    "exact_penalty",
    "exact_max_flow_value",
    "exact_min_cost_flow",
    "oracle_min_cost_flow",
]


class InfeasibleFlowError(ValueError):
    """No feasible flow has the requested value."""


class IsolationError(RuntimeError):
    """Rounding failed on every perturbation attempt."""


class PrecisionError(ArithmeticError):
    """Interior-point value is not close enough to an integer."""


def _require_standard(net: FlowNetwork):
    if np.any(net.gnum != net.gden):
        raise ValueError("exact flows need gamma = 1 on every edge")


@dataclass(frozen=True)
class PerturbedNetwork:
    """Network with costs ``q(e) + k_e / (4 m^2 U^2)``, ``k_e`` in
    ``{1, ..., 2mU}``."""

    base: FlowNetwork
    k: np.ndarray

    @property
    def scale(self) -> int:
        """Common denominator ``4 m^2 U^2``."""
        return 4 * self.base.m**2 * self.base.U**2

    @property
    def scaled_costs(self) -> np.ndarray:
        """Exact perturbed costs times :attr:`scale`, as integers."""
        return self.base.cost.astype(np.int64) * self.scale + self.k

    @property
    def costs(self) -> np.ndarray:
        return self.base.cost + self.k / self.scale


def perturb_costs(net: FlowNetwork, rng) -> PerturbedNetwork:
    _require_standard(net)
    if net.cost is None:
        raise ValueError("perturb_costs needs edge costs")
    k = rng.integers(1, 2 * net.m * net.U + 1, size=net.m)
    return PerturbedNetwork(base=net, k=k)


def ipm_error(net: FlowNetwork, mode="practical"):
    """Interior-point accuracy that makes rounding safe."""
    err = 1.0 / (12 * net.m**2 * net.U**3)
    return err if mode == "paper_exact" else min(err, 1e-6)


@dataclass(frozen=True)
class ExactFlowResult:
    """Integral flow with its value, original cost and how many
    perturbations were tried (``retries = attempts - 1``)."""

    flow: np.ndarray
    value: int
    cost: int
    retries: int
    iterations: dict


def exact_max_flow_value(net: FlowNetwork, cfg: GenFlowConfig | None = None) -> int:
    """Integral maximum flow value from an interior-point run at error 1/2."""
    _require_standard(net)
    cfg = GenFlowConfig(epsilon=0.5) if cfg is None else cfg
    res = max_flow(net, cfg)
    if res.lp_value is None:
        return 0
    v = -res.lp_value
    r = round(v)
    if abs(v - r) >= 0.4:
        raise PrecisionError(f"LP value {v!r} is not within 0.4 of an integer")
    return int(r)


def exact_penalty(net: FlowNetwork) -> float:
    """Penalty weight that is exact for integral data with gamma = 1.

    Optimal duals are differences of shortest-path lengths under the
    perturbed costs, so they are below ``n (C + 1)`` in magnitude. Any
    larger weight leaves the penalized optimum unchanged, and a small
    weight keeps ``c - A^T y`` free of cancellation.
    """
    return 4.0 * net.n * (float(net.cost.max(initial=0)) + 1.0)


def _attempt(sub, pert, F, err, mode="practical", observer=None):
    """One perturbed solve; returns ``(rounded flow or None, ipm result)``."""
    pen = None if mode == "paper_exact" else exact_penalty(sub)
    flp = build_mincost_lp(sub, F, 2 * err, penalty=pen)
    # Swap in the perturbed costs; penalties stay as built.
    c = flp.lp.c.copy()
    c[:sub.m] = pert.costs
    lp = type(flp.lp)(A=flp.lp.A, b=flp.lp.b, c=c, T=flp.lp.T,
                      lambda_min=flp.lp.lambda_min, y0=flp.lp.y0)
    flp = type(flp)(lp=lp, incidence=flp.incidence, rows=flp.rows,
                    eps_flow=flp.eps_flow, penalty=flp.penalty)
    res = interior_point(lp, IpmConfig(epsilon=err), structured_backend(flp),
                         observer=observer)
    x1, _, x3, x4, x5 = flp.split(res.x)
    if max(x3.max(initial=0), x4.max(initial=0), x5.max(initial=0)) > 0.25:
        raise InfeasibleFlowError(f"no feasible flow of value {F}")
    rounded = np.rint(x1)
    if np.any(np.abs(x1 - rounded) >= 1 / 3):
        return None, res
    f = rounded.astype(np.int64)
    rep = report(sub, f)
    if (rep.capacity_violation > 0 or rep.conservation_violation > 0
            or round(rep.value) != F or np.any(f < 0)):
        return None, res
    if float(sub.cost @ f) >= float(c @ res.x) + 0.5:
        return None, res
    return f, res


def exact_min_cost_flow(net: FlowNetwork, F: int, rng=None, retries=20,
                        mode="practical", observer=None) -> ExactFlowResult:
    """Minimum-cost integral flow of value ``F``.

    Each attempt perturbs the costs, solves the LP to :func:`ipm_error`
    accuracy and rounds. The rounded flow must be feasible, have value
    ``F`` and cost below the LP objective plus 1/2. Otherwise the costs
    are perturbed again, up to ``retries`` times. ``observer`` is passed
    to :func:`~lossyflow.ipm.interior_point`.
    """
    _require_standard(net)
    if net.cost is None:
        raise ValueError("exact_min_cost_flow needs edge costs")
    F = int(F)
    if F < 0:
        raise ValueError("F must be >= 0")
    if F == 0:
        return ExactFlowResult(np.zeros(net.m, dtype=np.int64), 0, 0, 0,
                               {"unshift": 0, "shift": 0, "solves": 0})
    rng = np.random.default_rng() if rng is None else rng
    norm = normalize_sink(net)
    pr = prune(norm, 0.5)
    if pr.trivial:
        raise InfeasibleFlowError(f"t is unreachable; no flow of value {F}")
    sub = pr.net
    err = ipm_error(sub, mode)
    iters = {"unshift": 0, "shift": 0, "solves": 0}
    for attempt in range(retries + 1):
        pert = perturb_costs(sub, rng)
        f_sub, res = _attempt(sub, pert, F, err, mode, observer)
        for key, val in res.iterations.items():
            iters[key] += val
        if f_sub is not None:
            f = pr.lift(f_sub, norm.m)[:net.m].astype(np.int64)
            return ExactFlowResult(flow=f, value=F, cost=int(net.cost @ f),
                                   retries=attempt, iterations=iters)
    raise IsolationError(f"rounding failed after {retries + 1} perturbations")


# -- certification oracle ---------------------------------------------------------

def oracle_min_cost_flow(net: FlowNetwork, F: int) -> np.ndarray:
    """Optimal integral flow of value ``F`` by successive shortest paths.

    Dijkstra on reduced costs keeps the potentials valid. Costs must be
    nonnegative, which holds for every :class:`FlowNetwork`.
    """
    _require_standard(net)
    if net.cost is None:
        raise ValueError("oracle needs edge costs")
    F = int(F)
    n, m = net.n, net.m
    # residual arc 2j is forward on edge j, 2j+1 is its reverse
    head = np.empty(2 * m, dtype=np.int64)
    head[0::2], head[1::2] = net.head, net.tail
    cost = np.empty(2 * m, dtype=np.int64)
    cost[0::2], cost[1::2] = net.cost, -net.cost
    flow = np.zeros(m, dtype=np.int64)
    out = [[] for _ in range(n)]
    for j in range(m):
        out[int(net.tail[j])].append(2 * j)
        out[int(net.head[j])].append(2 * j + 1)

    def residual(a):
        j = a // 2
        return int(net.cap[j] - flow[j]) if a % 2 == 0 else int(flow[j])

    pot = np.zeros(n, dtype=np.int64)
    sent = 0
    while sent < F:
        dist = np.full(n, np.iinfo(np.int64).max)
        pred = np.full(n, -1, dtype=np.int64)
        dist[net.s] = 0
        heap = [(0, net.s)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for a in out[u]:
                if residual(a) <= 0:
                    continue
                w = int(head[a])
                nd = d + int(cost[a] + pot[u] - pot[w])
                if nd < dist[w]:
                    dist[w] = nd
                    pred[w] = a
                    heapq.heappush(heap, (nd, w))
        if pred[net.t] < 0:
            raise InfeasibleFlowError(f"no feasible flow of value {F} (max {sent})")
        # Capping at dist[t] keeps reduced costs nonnegative everywhere.
        pot += np.minimum(dist, dist[net.t])
        push, v, path = F - sent, net.t, []
        while v != net.s:
            a = int(pred[v])
            path.append(a)
            push = min(push, residual(a))
            v = int(net.tail[a // 2]) if a % 2 == 0 else int(net.head[a // 2])
        for a in path:
            flow[a // 2] += push if a % 2 == 0 else -push
        sent += push
    return flow
