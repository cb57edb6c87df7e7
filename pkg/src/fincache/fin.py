"""Distributed solution by dual decomposition and projected subgradient ascent.

The availability constraints ``y[i, j, k] <= x[j, k]`` are priced with
multipliers ``lam[p, k]`` (one per retrieval pair ``p = (i, j)`` and object).
Given the prices, the Lagrangian separates into one problem per node:

    minimize  -ln(U_i - u0_i) + sum_{j, k} lam[i, j, k] y[i, j, k]
                               - sum_k income[i, k] x[i, k]

over the node's own placement row and retrieval rows, where
``income[i, k] = sum_{j : i in N_j} lam[j, i, k]``. The prices then move
along the subgradient ``h = y - x_source`` and are projected onto the
non-negative orthant. Multiplier ``lam[i, j, k]`` is owned by the
retriever ``i``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .game import (CachingStrategy, GameInstance, NegotiationBreakdown,
                   best_retrieval, greedy_placement, utilities)

__all__ = [
    "StepSchedule",
    "DualState",
    "FinRecord",
    "FinTrace",
    "FinResult",
    "step_size",
    "dual_update",
    "local_subproblem",
    "solve_subproblems",
    "messages_per_iteration",
    "run_fin",
    "run_fin_growth",
    "save_state",
    "load_state",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepSchedule:
    """``kind`` is ``"constant"`` (``xi0`` every step) or ``"diminishing"``
    (``xi0 / k``). ``xi0=None`` lets :func:`run_fin` pick a scale from the
    initial prices."""

    kind: str = "diminishing"
    xi0: float | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "diminishing", "polyak"):
            raise ValueError(f"unknown step schedule {self.kind!r}")
        if self.xi0 is not None and self.xi0 <= 0:
            raise ValueError("xi0 must be positive")


def step_size(schedule: StepSchedule, k: int) -> float:
    if k < 1:
        raise ValueError("iteration index starts at 1")
    if schedule.xi0 is None:
        raise ValueError("schedule has no step scale")
    if schedule.kind == "constant":
        return float(schedule.xi0)
    return float(schedule.xi0) / k


@dataclass
class DualState:
    lam: np.ndarray          # (P, K), row p prices pair g.pairs[p]
    iteration: int = 0
    best_dual: float = -np.inf
    schedule: StepSchedule = field(default_factory=StepSchedule)


def dual_update(state: DualState, h: np.ndarray, xi: float) -> DualState:
    """Projected step ``max(0, lam + xi * h)``."""
    if xi <= 0:
        raise ValueError("step must be positive")
    lam = np.maximum(0.0, state.lam + xi * np.asarray(h, dtype=np.float64))
    return replace(state, lam=lam, iteration=state.iteration + 1)


# ----------------------------------------------------------------------------
# Node subproblems


def _income(g: GameInstance, lam: np.ndarray) -> np.ndarray:
    out = np.zeros((g.node_count, g.object_count))
    if len(g.pairs):
        np.add.at(out, g.pairs[:, 1], lam)
    return out


class _Responder:
    """Vectorized best response of all active nodes to prices ``lam``.

    For a fixed ``rho`` the node problem with linearized log term is an LP
    over the node polytope; its solution is a fractional knapsack over
    objects. ``rho`` is then tuned so that ``rho = 1 / (U - u0)``.
    """

    def __init__(self, g: GameInstance, active: np.ndarray):
        self.g = g
        self.active = active
        self.w = g.weights
        pairs = g.pairs
        self.pi = pairs[:, 0]
        self.pj = pairs[:, 1]
        self.disc = g.pair_discount
        self.offsets = g.pair_offsets
        counts = np.diff(self.offsets)
        self.has_pairs = counts > 0
        self.seg_start = self.offsets[:-1][self.has_pairs]
        self.cap = np.minimum(g.capacities, g.object_count)
        self.u0 = g.u0
        self.wd = self.w[self.pi] * self.disc[:, None] if len(pairs) else np.zeros((0, g.object_count))
        self.fixed_x = greedy_placement(self.w, g.capacities)

    def set_prices(self, lam: np.ndarray):
        self.lam = lam
        self.mu = _income(self.g, lam)

    def lp(self, rho: np.ndarray):
        """Minimize ``(prices - rho * utility weights) . z`` per node."""
        g = self.g
        n, K = g.node_count, g.object_count
        P = len(self.pi)
        x_cost = -self.mu - rho[:, None] * self.w
        m = np.full((n, K), np.inf)
        arg = np.full((n, K), -1, dtype=np.int64)
        if P:
            cy = self.lam - rho[self.pi][:, None] * self.wd
            seg_min = np.minimum.reduceat(cy, self.seg_start, axis=0)
            m[self.has_pairs] = seg_min
            hit = cy <= m[self.pi]
            idx = np.where(hit, np.arange(P)[:, None], P)
            arg[self.has_pairs] = np.minimum.reduceat(idx, self.seg_start, axis=0)
        best_y = np.minimum(m, 0.0)
        e = x_cost - best_y if g.serve_once else x_cost
        order = np.argsort(e, axis=1, kind="stable")
        e_sorted = np.take_along_axis(e, order, axis=1)
        fill = np.clip(self.cap[:, None] - np.arange(K)[None, :], 0.0, 1.0)
        fill = np.where(e_sorted < 0, fill, 0.0)
        x = np.zeros((n, K))
        np.put_along_axis(x, order, fill, axis=1)
        y = np.zeros((P, K))
        if P:
            use = (m < 0) & self.active[:, None]
            ii, kk = np.nonzero(use)
            amount = 1.0 - x[ii, kk] if g.serve_once else np.ones(len(ii))
            y[arg[ii, kk], kk] = amount
        x = np.where(self.active[:, None], x, self.fixed_x)
        return x, y

    def utility(self, x, y):
        u = (self.w * x).sum(axis=1)
        if len(self.pi):
            u += np.bincount(self.pi, weights=(self.wd * y).sum(axis=1), minlength=self.g.node_count)
        return u

    def price_cost(self, x, y):
        """Per-node price term ``sum lam y - sum income x``."""
        v = -(self.mu * x).sum(axis=1)
        if len(self.pi):
            v += np.bincount(self.pi, weights=(self.lam * y).sum(axis=1), minlength=self.g.node_count)
        return v

    def _eval(self, rho):
        x, y = self.lp(rho)
        return x, y, self.utility(x, y), self.price_cost(x, y)

    def respond(self, rho_hint: np.ndarray | None = None, max_rounds: int = 200):
        """Exact node minimizers; returns ``(x, y, U, rho)``.

        ``phi(rho) = min_z (c - rho a) . z`` is concave and piecewise linear
        in ``rho``; every LP solution ``z`` gives a supporting line with
        slope ``-U(z)``. The optimal ``rho`` satisfies
        ``U(rho) - u0 = 1 / rho``, possibly at a kink where the two
        adjacent solutions are mixed. Brackets shrink by intersecting the
        supporting lines at both ends, which finishes in a handful of LP
        evaluations.
        """
        g = self.g
        act = self.active
        n = g.node_count
        u0 = self.u0
        # utility ceiling: every unit of demand served once, or twice
        # (locally and remotely) without the serve-once constraint
        ceiling = self.w.sum(axis=1) * (1.0 if g.serve_once else 2.0)
        floor = 1.0 / np.maximum(ceiling - u0, 1e-300)
        if rho_hint is None:
            lo = floor.copy()
        else:
            lo = np.maximum(floor, rho_hint / 1.5)
        lo = np.where(act, lo, 1.0)

        def side(rho):
            x, y, U, c = self._eval(rho)
            return x, y, U, c, U - u0 - 1.0 / rho

        xl, yl, Ul, cl, gl = side(lo)
        bad = act & (gl >= 0)
        while np.any(bad):
            lo = np.where(bad, np.maximum(lo / 4.0, floor), lo)
            xl, yl, Ul, cl, gl = side(lo)
            bad = act & (gl >= 0) & (lo > floor)
        hi = np.where(act, lo * (2.25 if rho_hint is not None else 2.0), 1.0)
        xh, yh, Uh, ch, gh = side(hi)
        need = act & (gh < 0)
        rounds = 0
        while np.any(need):
            hi = np.where(need, hi * 4.0, hi)
            xn, yn, Un, cn, gn = side(hi)
            xh, yh, Uh, ch, gh = _take(need, (xn, yn, Un, cn, gn), (xh, yh, Uh, ch, gh), self.pi)
            need = act & (gh < 0)
            rounds += 1
            if rounds > 80:
                raise NegotiationBreakdown(np.flatnonzero(need),
                                           "node cannot reach a positive surplus at any price")

        x_out = np.where(act[:, None], 0.0, xl)
        y_out = np.zeros_like(yl)
        rho_out = np.where(act, 0.0, 1.0)
        theta = np.zeros(n)
        open_ = act.copy()
        for _ in range(max_rounds):
            if not open_.any():
                break
            dU = Uh - Ul
            with np.errstate(divide="ignore", invalid="ignore"):
                rb = np.where(dU > 0, (ch - cl) / np.where(dU > 0, dU, 1.0), hi)
            rb = np.clip(rb, lo, hi)
            xb, yb, Ub, cb = self._eval(rb)
            phi_b = cb - rb * Ub
            line = cl - rb * Ul
            scale = np.abs(cl) + rb * np.abs(Ul) + 1e-300
            kink = open_ & ((phi_b >= line - 1e-12 * scale) | (dU <= 1e-14 * np.maximum(Uh, 1.0)))
            if kink.any():
                # the bracket ends are adjacent pieces meeting at rb
                sl = Ul - u0
                sh = Uh - u0
                left = kink & (sl >= 1.0 / rb)
                right = kink & ~left & (sh <= 1.0 / rb)
                mid = kink & ~left & ~right
                rho_out = np.where(left, 1.0 / np.where(left, sl, 1.0), rho_out)
                rho_out = np.where(right, 1.0 / np.where(right, sh, 1.0), rho_out)
                rho_out = np.where(mid, rb, rho_out)
                th = np.where(mid, (u0 + 1.0 / rb - Ul) / np.where(dU > 0, dU, 1.0), 0.0)
                th = np.where(right, 1.0, th)
                theta = np.where(kink, np.clip(th, 0.0, 1.0), theta)
                open_ &= ~kink
            gb = Ub - u0 - 1.0 / rb
            up = open_ & (gb >= 0)
            down = open_ & (gb < 0)
            exact = open_ & (np.abs(gb) <= 1e-13 * np.maximum(np.abs(Ub), 1.0))
            if exact.any():
                rho_out = np.where(exact, rb, rho_out)
                theta = np.where(exact, 2.0, theta)   # marker: take the probe
                x_out = np.where(exact[:, None], xb, x_out)
                y_out = np.where(exact[self.pi][:, None], yb, y_out) if len(self.pi) else y_out
                open_ &= ~exact
                up &= ~exact
                down &= ~exact
            hi = np.where(up, rb, hi)
            xh, yh, Uh, ch = _take(up, (xb, yb, Ub, cb), (xh, yh, Uh, ch), self.pi)
            lo = np.where(down, rb, lo)
            xl, yl, Ul, cl = _take(down, (xb, yb, Ub, cb), (xl, yl, Ul, cl), self.pi)
        else:
            log.debug("price search hit the round limit for %d nodes", int(open_.sum()))
            rho_out = np.where(open_, hi, rho_out)
            theta = np.where(open_, 1.0, theta)

        mix = act & (theta <= 1.0)
        t = np.where(mix, theta, 0.0)
        x_mix = t[:, None] * xh + (1 - t[:, None]) * xl
        x_out = np.where(mix[:, None], x_mix, x_out)
        if len(self.pi):
            tp = t[self.pi][:, None]
            y_mix = tp * yh + (1 - tp) * yl
            y_out = np.where(mix[self.pi][:, None], y_mix, y_out)
        x_out = np.where(act[:, None], x_out, self.fixed_x)
        return x_out, y_out, self.utility(x_out, y_out), rho_out

    def lagrangian(self, x, y, U) -> float:
        act = self.active
        gap = (U - self.u0)[act]
        val = -float(np.log(gap).sum())
        return val + float((self.lam * y).sum()) - float((self.mu * x).sum())


def _take(mask, new, old, pi):
    """Select ``new`` over ``old`` for masked nodes; tuples hold
    ``(x, y, per-node values...)``."""
    out = []
    for pos, (a, b) in enumerate(zip(new, old)):
        if pos == 0:
            m = mask[:, None]
        elif pos == 1:
            m = mask[pi][:, None]
        else:
            m = mask
        out.append(np.where(m, a, b))
    return tuple(out)


def solve_subproblems(g: GameInstance, lam: np.ndarray):
    """All node minimizers at prices ``lam``: ``(x, y, dual value)``."""
    r = _Responder(g, g.participants)
    r.set_prices(np.asarray(lam, dtype=np.float64))
    x, y, U, _ = r.respond()
    return x, y, r.lagrangian(x, y, U)


def local_subproblem(g: GameInstance, i: int, lam) -> tuple[np.ndarray, np.ndarray]:
    """Minimizer of node ``i``'s Lagrangian term.

    ``lam`` is a :class:`DualState` or a ``(P, K)`` price array. Returns the
    placement row and the retrieval rows for ``i``'s pairs (in pair order).
    """
    prices = lam.lam if isinstance(lam, DualState) else np.asarray(lam, dtype=np.float64)
    if np.any(prices < 0):
        raise ValueError("prices must be non-negative")
    active = np.zeros(g.node_count, dtype=bool)
    active[i] = bool(g.participants[i])
    r = _Responder(g, active)
    r.set_prices(prices)
    x, y, _, _ = r.respond()
    lo, hi = g.pair_offsets[i], g.pair_offsets[i + 1]
    return x[i], y[lo:hi]


# ----------------------------------------------------------------------------
# Main loop


def messages_per_iteration(g: GameInstance, c: int = 1) -> int:
    """Prices go out to every neighbor and placements come back from
    every node whose neighborhood one belongs to, ``|O|`` values each."""
    K = g.object_count
    return int(sum(c * K * (len(nb.members) + len(nb.co_members)) for nb in g.neighborhoods))


@dataclass(frozen=True)
class FinRecord:
    iter: int
    dual: float
    primal: float
    gap: float
    max_h: float
    messages: int


@dataclass
class FinTrace:
    records: list = field(default_factory=list)

    @property
    def total_messages(self) -> int:
        return int(sum(r.messages for r in self.records))

    def best_dual_series(self) -> np.ndarray:
        return np.maximum.accumulate(np.array([r.dual for r in self.records]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iter", "dual", "primal", "gap", "max_h", "messages"])
        for r in self.records:
            wr.writerow([r.iter, repr(r.dual), repr(r.primal), repr(r.gap), repr(r.max_h), r.messages])
        return buf.getvalue()


@dataclass
class FinResult:
    strategy: CachingStrategy
    trace: FinTrace
    state: DualState
    objective: float
    converged: bool

    @property
    def gap(self) -> float:
        return -self.objective - self.state.best_dual


class _TailAverage:
    """Average over a trailing window of iterates.

    Two running sums are kept; the younger one restarts whenever it has
    covered half the run, so the reported mean spans between a quarter
    and a half of all iterates seen so far.
    """

    def __init__(self):
        self.seen = 0
        self.old = None
        self.old_n = 0
        self.new = None
        self.new_n = 0

    def add(self, x):
        self.seen += 1
        if self.new is None:
            self.new = np.zeros_like(x)
        self.new += x
        self.new_n += 1
        if self.new_n * 2 >= self.seen and self.seen >= 4:
            self.old, self.old_n = self.new, self.new_n
            self.new, self.new_n = np.zeros_like(x), 0

    @property
    def count(self) -> int:
        return self.old_n + self.new_n if self.old is not None else self.new_n

    def mean(self):
        if self.old is None:
            return self.new / self.new_n
        return (self.old + self.new) / (self.old_n + self.new_n)


def _nash(g: GameInstance, U: np.ndarray) -> float:
    gap = (U - g.u0)[g.participants]
    if np.any(gap <= 0):
        return -np.inf
    return float(np.log(gap).sum())


def _completed(g: GameInstance, x: np.ndarray):
    s = CachingStrategy(x, g.pairs, best_retrieval(g, x))
    return _nash(g, utilities(g, s)), s


def _mix_search(g: GameInstance, x_best: np.ndarray, x_new: np.ndarray):
    """Best point on the segment from ``x_best`` to ``x_new``."""
    def loss(t):
        val = _completed(g, x_best + t * (x_new - x_best))[0]
        return -val if np.isfinite(val) else 1e30

    res = minimize_scalar(loss, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-4})
    return _completed(g, x_best + res.x * (x_new - x_best))


def run_fin(g: GameInstance, schedule: StepSchedule | None = None, k_stop: int = 2000,
            tol: float = 1e-6, window: int = 50, gap_tol: float | None = None,
            state: DualState | None = None, c: int = 1, line_search: bool = True) -> FinResult:
    """Projected subgradient ascent on the dual with primal recovery.

    Stops when the best dual value improves by less than ``tol`` over
    ``window`` iterations, when the primal-dual gap drops below
    ``gap_tol`` (if given), or after ``k_stop`` iterations.

    Every iterate's placement is completed with the optimal retrieval;
    a tail average of the placements (covering at least the last quarter
    of the run) is completed the same way. With ``line_search`` the best
    placement so far is also moved toward the new response by a bounded
    scalar search. The best completed strategy is returned.

    The ``"polyak"`` schedule uses ``xi0 * (best primal - dual) / |h|^2``
    once an individually rational strategy exists (``xi0`` defaults to 1)
    and a diminishing fallback before that.
    """
    schedule = schedule or StepSchedule()
    part = g.participants
    n, K, P = g.node_count, g.object_count, len(g.pairs)
    if state is None:
        state = DualState(np.zeros((P, K)), 0, -np.inf, schedule)
    else:
        state = replace(state, lam=np.array(state.lam, dtype=np.float64), schedule=schedule)
    retr_active = part[g.pairs[:, 0]][:, None] if P else np.zeros((0, 1), dtype=bool)

    responder = _Responder(g, part)
    msgs = messages_per_iteration(g, c)
    trace = FinTrace()
    best = (-np.inf, None)
    rho = None
    tail = _TailAverage()
    best_dual_hist: list[float] = []
    converged = False
    xi_fallback = None
    polyak = schedule.xi0 if schedule.xi0 is not None else 1.0

    if not part.any():
        x = greedy_placement(g.weights, g.capacities)
        s = CachingStrategy(x, g.pairs, best_retrieval(g, x))
        return FinResult(s, trace, replace(state, best_dual=0.0), 0.0, True)

    for k in range(state.iteration + 1, state.iteration + k_stop + 1):
        responder.set_prices(state.lam)
        x, y, U, rho = responder.respond(rho)
        dual = responder.lagrangian(x, y, U)
        best_dual = max(state.best_dual, dual)
        h = np.where(retr_active, y - x[g.pairs[:, 1]], 0.0) if P else np.zeros((0, K))

        tail.add(x)
        primal = -np.inf
        for xc in ([x, tail.mean()] if tail.count > 1 else [x]):
            val, s = _completed(g, xc)
            primal = max(primal, val)
            if val > best[0]:
                best = (val, s)
        if best[1] is not None and line_search:
            val, s = _mix_search(g, best[1].x, x)
            primal = max(primal, val)
            if val > best[0]:
                best = (val, s)
        gap = -best[0] - best_dual
        max_h = float(np.abs(h).max(initial=0.0))
        trace.records.append(FinRecord(k, dual, primal, gap, max_h, msgs))
        best_dual_hist.append(best_dual)

        if xi_fallback is None:
            # price level at which nodes trade off own demand
            xi_fallback = float(np.median((rho[:, None] * g.weights)[part].max(axis=1)))
            if schedule.xi0 is None and schedule.kind != "polyak":
                schedule = replace(schedule, xi0=xi_fallback)
        state = replace(state, best_dual=best_dual, schedule=schedule)
        if gap_tol is not None and gap <= gap_tol:
            converged = True
            break
        if len(best_dual_hist) > window and best_dual_hist[-1] - best_dual_hist[-1 - window] < tol:
            converged = True
            break
        if schedule.kind == "polyak" and np.isfinite(best[0]):
            hn = float((h ** 2).sum())
            if hn == 0.0 or -best[0] - best_dual <= 0.0:
                converged = True
                break
            xi = polyak * max(-best[0] - dual, 0.0) / hn
        elif schedule.kind == "polyak":
            xi = xi_fallback / k
        else:
            xi = step_size(schedule, k)
        state = dual_update(state, h, xi)
        state.iteration = k

    if best[1] is None:
        raise NegotiationBreakdown(np.flatnonzero(part), "no recovered strategy is individually rational")
    return FinResult(best[1], trace, state, best[0], converged)


@dataclass
class GrowthStage:
    radii: np.ndarray
    result: FinResult
    utilities: np.ndarray


def run_fin_growth(g: GameInstance, schedule: StepSchedule | None = None, k_stop: int = 2000,
                   tol: float = 1e-6, threshold: float = 1e-3, r_max: int | None = None,
                   **kw) -> list[GrowthStage]:
    """Grow each node's radius one hop at a time while it still pays off.

    All radii start at 1. After each solve a node moves to the next
    radius only if its utility rose by more than ``threshold`` (relative
    to its disagreement value) with its last increment.
    """
    n = g.node_count
    finite = g.dist[g.dist >= 0]
    r_max = int(finite.max(initial=1)) if r_max is None else r_max
    radii = np.ones(n, dtype=np.int64)
    growing = np.ones(n, dtype=bool)
    prev_u = None
    stages: list[GrowthStage] = []
    while True:
        gg = g.with_radii(radii)
        res = run_fin(gg, schedule, k_stop, tol, **kw)
        U = utilities(gg, res.strategy)
        stages.append(GrowthStage(radii.copy(), res, U))
        if prev_u is not None:
            gain = (U - prev_u) / np.maximum(g.u0, 1e-12)
            growing &= gain > threshold
        growing &= radii < r_max
        if not growing.any():
            break
        prev_u = U
        radii = radii + growing
    return stages


# ----------------------------------------------------------------------------
# Checkpoints


def save_state(state: DualState, path) -> None:
    meta = {"iteration": state.iteration, "best_dual": state.best_dual,
            "kind": state.schedule.kind, "xi0": state.schedule.xi0}
    np.savez(path, lam=state.lam, meta=np.array(json.dumps(meta)))


def load_state(path) -> DualState:
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["meta"]))
        lam = f["lam"].copy()
    return DualState(lam, int(meta["iteration"]), float(meta["best_dual"]),
                     StepSchedule(meta["kind"], meta["xi0"]))
