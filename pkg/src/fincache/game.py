"""Caching game: instance, strategies, utilities, constraints and the Nash
bargaining objective.

Strategies are relaxed: ``x[i, k]`` is the cached fraction of object ``k``
at node ``i`` and ``y[p, k]`` the fraction node ``pairs[p, 0]`` retrieves
from node ``pairs[p, 1]``. Retrieval pairs are restricted to the
retriever's neighborhood.

With ``serve_once`` (the default) each unit of demand is served at most
once: ``x[i, k] + sum_j y[i, j, k] <= 1``. This replaces the looser
``sum_j y[i, j, k] <= 1``, which lets a node count an object both from its
own cache and from a neighbor. ``serve_once=False`` restores the looser
form.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable

import numpy as np

from .demand import DemandMatrix
from .topology import Topology, neighborhoods, shortest_paths

__all__ = [
    "DISCOUNTS",
    "NegotiationBreakdown",
    "GameInstance",
    "CachingStrategy",
    "Violation",
    "make_game",
    "duo_game",
    "greedy_placement",
    "best_retrieval",
    "complete_strategy",
    "zero_strategy",
    "disagreement_strategy",
    "utilities",
    "utility",
    "local_utilities",
    "disagreement_point",
    "validate",
    "nash_log_objective",
    "nash_product",
    "surplus",
    "strategy_to_csv",
    "strategy_from_csv",
]


def hop_discount(hops):
    """Default retrieval discount ``1 / (hops + 1)``."""
    return 1.0 / (np.asarray(hops, dtype=np.float64) + 1.0)


def unit_discount(hops):
    """No distance penalty; reproduces plain demand counting."""
    return np.ones_like(np.asarray(hops, dtype=np.float64))


DISCOUNTS: dict[str, Callable] = {"hop": hop_discount, "unit": unit_discount}


class NegotiationBreakdown(ValueError):
    """Some participating node cannot do strictly better than its
    disagreement value."""

    def __init__(self, nodes, message: str = "negotiation breakdown"):
        self.nodes = tuple(int(n) for n in nodes)
        super().__init__(f"{message}: nodes {list(self.nodes)}")


@dataclass(frozen=True, eq=False)
class GameInstance:
    topology: Topology
    dist: np.ndarray
    demand: DemandMatrix
    capacities: np.ndarray
    radii: np.ndarray
    discount: str | Callable = "hop"
    serve_once: bool = True
    sizes: np.ndarray | None = None
    u0_override: np.ndarray | None = None
    eps0: float = 1e-6

    def __post_init__(self):
        n, K = self.demand.w.shape
        if n != self.topology.node_count:
            raise ValueError("demand rows must match node count")
        cap = np.broadcast_to(np.asarray(self.capacities, dtype=np.float64), (n,)).copy()
        if np.any(cap < 0):
            raise ValueError("capacities must be non-negative")
        radii = np.broadcast_to(np.asarray(self.radii, dtype=np.int64), (n,)).copy()
        if np.any(radii < 0):
            raise ValueError("radii must be non-negative")
        object.__setattr__(self, "capacities", cap)
        object.__setattr__(self, "radii", radii)
        f = self.discount_fn
        if not np.isclose(f(np.array([0.0]))[0], 1.0):
            raise ValueError("discount(0) must equal 1")
        probe = f(np.arange(0, 32, dtype=np.float64))
        if np.any(np.diff(probe) > 1e-12) or np.any(probe < 0):
            raise ValueError("discount must be non-negative and non-increasing")

    @property
    def discount_fn(self) -> Callable:
        if callable(self.discount):
            return self.discount
        try:
            return DISCOUNTS[self.discount]
        except KeyError:
            raise ValueError(f"unknown discount rule {self.discount!r}") from None

    @property
    def node_count(self) -> int:
        return self.topology.node_count

    @property
    def object_count(self) -> int:
        return self.demand.object_count

    @cached_property
    def weights(self) -> np.ndarray:
        """Utility weights ``s_k * w[i, k]`` (unit sizes unless given)."""
        if self.sizes is None:
            return self.demand.w
        return self.demand.w * np.asarray(self.sizes, dtype=np.float64)[None, :]

    @cached_property
    def neighborhoods(self):
        return neighborhoods(self.topology, self.dist, self.radii)

    @cached_property
    def pairs(self) -> np.ndarray:
        """Retrieval pairs ``(i, j)``, grouped by ``i`` then ascending ``j``."""
        d = self.dist
        mask = (d >= 1) & (d <= self.radii[:, None])
        i, j = np.nonzero(mask)
        p = np.column_stack([i, j]).astype(np.int64)
        p.setflags(write=False)
        return p

    @cached_property
    def pair_hops(self) -> np.ndarray:
        return self.dist[self.pairs[:, 0], self.pairs[:, 1]]

    @cached_property
    def pair_discount(self) -> np.ndarray:
        return np.asarray(self.discount_fn(self.pair_hops), dtype=np.float64)

    @cached_property
    def pair_offsets(self) -> np.ndarray:
        counts = np.bincount(self.pairs[:, 0], minlength=self.node_count)
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @cached_property
    def u0(self) -> np.ndarray:
        if self.u0_override is not None:
            return np.asarray(self.u0_override, dtype=np.float64)
        return disagreement_point(self)

    @cached_property
    def participants(self) -> np.ndarray:
        """Nodes that can structurally gain from collaborating.

        A node takes part when it has a neighbor with non-zero capacity
        and demand left that its own greedy cache does not cover (any
        demand at all when ``serve_once`` is off). Others are pinned to
        their greedy local strategy and excluded from the objective.
        """
        n = self.node_count
        has_source = np.zeros(n, dtype=bool)
        p = self.pairs
        if len(p):
            ok = (self.capacities[p[:, 1]] > 0) & (self.pair_discount > 0)
            has_source[np.unique(p[ok, 0])] = True
        total = self.weights.sum(axis=1)
        if self.serve_once:
            room = total - self.u0 > 1e-12 * np.maximum(total, 1.0)
        else:
            room = total > 0
        return has_source & room

    def with_radii(self, radii) -> "GameInstance":
        return _rebuild(self, radii=radii)

    def with_demand(self, demand: DemandMatrix, u0=None) -> "GameInstance":
        return _rebuild(self, demand=demand, u0_override=u0)


def _rebuild(g: GameInstance, **changes) -> GameInstance:
    # dataclasses.replace re-runs __post_init__ and drops cached properties
    return replace(g, **changes)


def make_game(topology: Topology, demand: DemandMatrix, capacities, radii,
              discount: str | Callable = "hop", serve_once: bool = True,
              sizes=None, eps0: float = 1e-6, dist=None) -> GameInstance:
    if dist is None:
        dist = shortest_paths(topology)
    return GameInstance(topology, dist, demand, capacities, radii, discount=discount,
                        serve_once=serve_once, sizes=sizes, eps0=eps0)


def duo_game(discount: str | Callable = "unit", **kw) -> GameInstance:
    """Two adjacent caches, capacity 2, demand (3, 2, 2, 1) at both."""
    from .demand import duo_demand
    t = Topology(2, np.array([[0, 1]]))
    return make_game(t, duo_demand(), 2, 1, discount=discount, **kw)


@dataclass(frozen=True, eq=False)
class CachingStrategy:
    """Placement ``x`` (nodes x objects) and sparse retrieval ``y``
    (one row per entry of ``pairs``)."""

    x: np.ndarray
    pairs: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        y = np.array(self.y, dtype=np.float64).reshape(len(pairs), x.shape[1])
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "y", y)

    def y_dense(self) -> np.ndarray:
        n, K = self.x.shape
        out = np.zeros((n, n, K))
        out[self.pairs[:, 0], self.pairs[:, 1]] = self.y
        return out

    def retrieved(self) -> np.ndarray:
        """Total retrieved fraction per (node, object)."""
        out = np.zeros_like(self.x)
        np.add.at(out, self.pairs[:, 0], self.y)
        return out


def zero_strategy(g: GameInstance) -> CachingStrategy:
    return CachingStrategy(np.zeros((g.node_count, g.object_count)), g.pairs,
                           np.zeros((len(g.pairs), g.object_count)))


def disagreement_strategy(g: GameInstance) -> CachingStrategy:
    """Outcome when bargaining breaks down: greedy local caches and no retrieval."""
    x = greedy_placement(g.weights, g.capacities)
    return CachingStrategy(x, g.pairs, np.zeros((len(g.pairs), g.object_count)))


def greedy_placement(weights: np.ndarray, capacities) -> np.ndarray:
    """Fill each row's capacity with its heaviest objects.

    Ties go to the lower object id; a fractional capacity caches the
    remainder of the next object.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n, K = weights.shape
    cap = np.broadcast_to(np.asarray(capacities, dtype=np.float64), (n,))
    x = np.zeros((n, K))
    for i in range(n):
        order = np.lexsort((np.arange(K), -weights[i]))
        left = min(cap[i], K)
        for k in order:
            if left <= 0:
                break
            x[i, k] = min(1.0, left)
            left -= x[i, k]
    return x


def best_retrieval(g: GameInstance, x: np.ndarray, pairs=None) -> np.ndarray:
    """Utility-maximizing retrieval for a fixed placement.

    For each retriever and object the available budget (``1 - x`` under
    serve-once, else 1) is filled from neighbors in order of decreasing
    discount, taking at most what each neighbor caches. Since utility is
    linear in ``y`` and the budget is shared only across sources of the
    same object, this greedy fill is optimal.
    """
    pairs = g.pairs if pairs is None else np.asarray(pairs, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    y = np.zeros((len(pairs), x.shape[1]))
    if not len(pairs):
        return y
    disc = np.asarray(g.discount_fn(g.dist[pairs[:, 0], pairs[:, 1]]), dtype=np.float64)
    order = np.lexsort((pairs[:, 1], -disc, pairs[:, 0]))
    order = order[disc[order] > 0]
    if not len(order):
        return y
    ri = pairs[order, 0]
    supply = np.clip(x[pairs[order, 1]], 0.0, 1.0)
    budget = np.clip(1.0 - x, 0.0, 1.0) if g.serve_once else np.ones_like(x)
    # fill each retriever's budget from its sources in order: a source gets
    # whatever budget the earlier sources left, capped by its own supply
    csum = np.cumsum(supply, axis=0)
    first = np.r_[True, ri[1:] != ri[:-1]]
    seg_base = np.where(first[:, None], csum - supply, 0.0)
    seg_base = np.maximum.accumulate(np.where(first[:, None], seg_base, -np.inf), axis=0)
    before = csum - supply - seg_base
    take = np.clip(budget[ri] - before, 0.0, supply)
    y[order] = take
    return y


def complete_strategy(g: GameInstance, x: np.ndarray, pairs=None) -> CachingStrategy:
    pairs = g.pairs if pairs is None else pairs
    return CachingStrategy(x, pairs, best_retrieval(g, x, pairs))


def utilities(g: GameInstance, s: CachingStrategy) -> np.ndarray:
    """Per-node utility: local hits plus discounted neighbor retrievals."""
    w = g.weights
    u = (w * s.x).sum(axis=1)
    if len(s.pairs):
        i, j = s.pairs[:, 0], s.pairs[:, 1]
        disc = np.asarray(g.discount_fn(g.dist[i, j]), dtype=np.float64)
        remote = (w[i] * s.y).sum(axis=1) * disc
        u = u + np.bincount(i, weights=remote, minlength=g.node_count)
    return u


def utility(g: GameInstance, s: CachingStrategy, i: int) -> float:
    return float(utilities(g, s)[i])


def local_utilities(g: GameInstance, s: CachingStrategy) -> np.ndarray:
    """Demand served from each node's own cache only."""
    return (g.weights * s.x).sum(axis=1)


def disagreement_point(g: GameInstance) -> np.ndarray:
    """Utility of each node caching its heaviest objects and nothing else."""
    x = greedy_placement(g.weights, g.capacities)
    return (g.weights * x).sum(axis=1)


def surplus(g: GameInstance, s: CachingStrategy) -> np.ndarray:
    return utilities(g, s) - g.u0


def nash_log_objective(g: GameInstance, s: CachingStrategy) -> float:
    """Sum over participating nodes of ``ln(U_i - u0_i)``."""
    gap = surplus(g, s)[g.participants]
    if np.any(gap <= 0):
        bad = np.flatnonzero(g.participants)[gap <= 0]
        raise NegotiationBreakdown(bad)
    return float(np.log(gap).sum())


def nash_product(g: GameInstance, s: CachingStrategy) -> float:
    return float(np.prod(surplus(g, s)[g.participants]))


@dataclass(frozen=True)
class Violation:
    constraint: str
    index: tuple
    slack: float


def validate(g: GameInstance, s: CachingStrategy, tol: float = 1e-9) -> list[Violation]:
    """List every violated constraint with its index and excess."""
    out: list[Violation] = []
    x, y, pairs = s.x, s.y, s.pairs
    n, K = x.shape
    if (n, K) != (g.node_count, g.object_count):
        raise ValueError("strategy shape does not match the game")

    allowed = set(map(tuple, g.pairs.tolist()))
    for p, (i, j) in enumerate(pairs.tolist()):
        if (i, j) not in allowed and np.any(y[p] > tol):
            out.append(Violation("neighborhood", (i, j), float(y[p].max())))

    excess = x.sum(axis=1) - g.capacities
    for i in np.flatnonzero(excess > tol):
        out.append(Violation("capacity", (int(i),), float(excess[i])))

    got = s.retrieved()
    if g.serve_once:
        served = got + x - 1.0
        for i, k in zip(*np.nonzero(served > tol)):
            out.append(Violation("serve_once", (int(i), int(k)), float(served[i, k])))
    else:
        over = got - 1.0
        for i, k in zip(*np.nonzero(over > tol)):
            out.append(Violation("retrieval", (int(i), int(k)), float(over[i, k])))

    if len(pairs):
        avail = y - x[pairs[:, 1]]
        for p, k in zip(*np.nonzero(avail > tol)):
            i, j = pairs[p]
            out.append(Violation("availability", (int(i), int(j), int(k)), float(avail[p, k])))

    for name, arr, idx in (("x_bounds", x, None), ("y_bounds", y, pairs)):
        low = -arr
        high = arr - 1.0
        for a, k in zip(*np.nonzero((low > tol) | (high > tol))):
            ex = float(max(low[a, k], high[a, k]))
            key = (int(a), int(k)) if idx is None else (int(idx[a, 0]), int(idx[a, 1]), int(k))
            out.append(Violation(name, key, ex))
    return out


def strategy_to_csv(s: CachingStrategy) -> tuple[str, str]:
    """Placement matrix as CSV and non-zero retrievals as ``i,j,k,y`` triples."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"o{k}" for k in range(s.x.shape[1])])
    for row in s.x:
        w.writerow([repr(float(v)) for v in row])
    tri = io.StringIO()
    w = csv.writer(tri, lineterminator="\n")
    w.writerow(["i", "j", "k", "y"])
    for p, k in zip(*np.nonzero(s.y)):
        w.writerow([int(s.pairs[p, 0]), int(s.pairs[p, 1]), int(k), repr(float(s.y[p, k]))])
    return buf.getvalue(), tri.getvalue()


def strategy_from_csv(x_text: str, triples_text: str, pairs) -> CachingStrategy:
    """Inverse of :func:`strategy_to_csv` for a given pair list."""
    rows = [r for r in csv.reader(io.StringIO(x_text)) if r][1:]
    x = np.array([[float(v) for v in r] for r in rows])
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    index = {(int(i), int(j)): p for p, (i, j) in enumerate(pairs.tolist())}
    y = np.zeros((len(pairs), x.shape[1]))
    for r in list(csv.DictReader(io.StringIO(triples_text))):
        key = (int(r["i"]), int(r["j"]))
        if key not in index:
            raise ValueError(f"retrieval pair {key} is not in the pair list")
        y[index[key], int(r["k"])] = float(r["y"])
    return CachingStrategy(x, pairs, y)
