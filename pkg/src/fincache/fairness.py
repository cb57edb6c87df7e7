"""Egalitarian, max-min and proportional fairness checks on solver outputs."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .demand import DemandMatrix
from .game import (CachingStrategy, GameInstance, NegotiationBreakdown, best_retrieval,
                   nash_log_objective, utilities)

__all__ = [
    "EFResult",
    "MFResult",
    "PFResult",
    "FairnessReport",
    "check_ef",
    "check_mf",
    "check_pf",
    "proportional_sum",
    "random_feasible_strategy",
    "scale_node",
    "scale_invariance_gap",
    "fairness_report",
]


@dataclass(frozen=True)
class EFResult:
    holds: bool
    max_spread: float


@dataclass(frozen=True)
class MFResult:
    holds_over_candidates: bool
    selected: int
    bottleneck_node: int
    best_min: float
    candidate_mins: tuple[float, ...]


@dataclass(frozen=True)
class PFResult:
    holds: bool
    worst_perturbation_sum: float
    trials: int


@dataclass(frozen=True)
class FairnessReport:
    ef: EFResult
    mf: MFResult | None
    pf: PFResult

    def as_dict(self) -> dict:
        return {"ef": asdict(self.ef),
                "mf": None if self.mf is None else asdict(self.mf),
                "pf": asdict(self.pf)}


def check_ef(u, u_w, tol: float = 1e-6) -> EFResult:
    """Equal gains over the worst case, up to ``tol``."""
    u = np.asarray(u, dtype=np.float64)
    u_w = np.asarray(u_w, dtype=np.float64)
    if u.shape != u_w.shape:
        raise ValueError("utility vectors must have the same length")
    gain = u - u_w
    spread = float(gain.max() - gain.min()) if gain.size else 0.0
    return EFResult(spread <= tol, spread)


def check_mf(candidates: Sequence[tuple[object, np.ndarray]], u_w, target: int = 0,
             tol: float = 1e-9) -> MFResult:
    """Max-min selection over a finite candidate list.

    ``candidates`` holds ``(strategy, utilities)`` pairs. The candidate at
    index ``target`` holds when its worst gain is within ``tol`` of the
    best worst gain among all candidates. This is a check over the given
    set only.
    """
    if not candidates:
        raise ValueError("check_mf needs at least one candidate")
    u_w = np.asarray(u_w, dtype=np.float64)
    mins = np.array([float(np.min(np.asarray(u, dtype=np.float64) - u_w))
                     for _, u in candidates])
    best = int(np.argmax(mins))
    gains = np.asarray(candidates[best][1], dtype=np.float64) - u_w
    return MFResult(bool(mins[target] >= mins[best] - tol), best, int(np.argmin(gains)),
                    float(mins[best]), tuple(float(m) for m in mins))


def random_feasible_strategy(g: GameInstance, rng: np.random.Generator,
                             pinned: CachingStrategy | None = None) -> CachingStrategy:
    """Draw a feasible strategy with random placement and retrieval.

    Each row of ``x`` is uniform noise rescaled to fit the capacity;
    ``y`` is the best retrieval for that placement thinned entrywise by
    uniform factors. Rows of non-participants are copied from ``pinned``.
    """
    n, K = g.node_count, g.object_count
    x = rng.random((n, K))
    cap = np.minimum(g.capacities, K)
    row = x.sum(axis=1)
    x *= np.minimum(1.0, cap / np.where(row > 0, row, 1.0))[:, None]
    if pinned is not None:
        fixed = ~g.participants
        x[fixed] = pinned.x[fixed]
    y = best_retrieval(g, x) * rng.random((len(g.pairs), K))
    return CachingStrategy(x, g.pairs, y)


def proportional_sum(u, u_star, u0) -> float:
    """``sum_i (u_i - u*_i) / (u*_i - u0_i)``."""
    u, u_star, u0 = (np.asarray(a, dtype=np.float64) for a in (u, u_star, u0))
    return float(((u - u_star) / (u_star - u0)).sum())


def check_pf(g: GameInstance, s_star: CachingStrategy, trials: int = 500, seed: int = 0) -> PFResult:
    """Sample feasible moves away from ``s_star`` and test the proportional
    fairness inequality.

    Each trial mixes ``s_star`` with a random feasible strategy at a random
    weight ``t`` in ``(0, 1]`` and evaluates the sum over participants of
    ``(u_i - u*_i) / (u*_i - u0_i)``. Holding over all trials is a
    necessary condition only.
    """
    part = g.participants
    u_star = utilities(g, s_star)
    base = (u_star - g.u0)[part]
    if np.any(base <= 0):
        raise NegotiationBreakdown(np.flatnonzero(part)[base <= 0])
    root = np.random.default_rng(seed)
    worst = -np.inf
    for child in root.spawn(trials):
        other = random_feasible_strategy(g, child, pinned=s_star)
        t = 1.0 - child.random()
        s = CachingStrategy(s_star.x + t * (other.x - s_star.x), g.pairs,
                            s_star.y + t * (other.y - s_star.y))
        val = proportional_sum(utilities(g, s)[part], u_star[part], g.u0[part])
        worst = max(worst, val)
    return PFResult(bool(worst < 0.0), float(worst), int(trials))


def scale_node(g: GameInstance, node: int, factor: float) -> GameInstance:
    """Multiply one node's demand row and disagreement value by ``factor``."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    w = g.demand.w.copy()
    w[node] *= factor
    u0 = g.u0.copy()
    u0[node] *= factor
    return g.with_demand(DemandMatrix(w), u0=u0)


def scale_invariance_gap(g: GameInstance, node: int, factor: float, solve=None) -> float:
    """Loss in the original objective from using the optimum of the scaled game.

    The bargaining optimum may be a face rather than a point, so argmax
    invariance is measured as optimality of the scaled game's placement
    in the original game: a gap near zero means it is an original argmax.
    """
    if solve is None:
        from .central import solve_central as solve
    base = solve(g)
    scaled = solve(scale_node(g, node, factor))
    moved = CachingStrategy(scaled.strategy.x, g.pairs, best_retrieval(g, scaled.strategy.x))
    return float(base.objective - nash_log_objective(g, moved))


def fairness_report(g: GameInstance, s: CachingStrategy, candidates=None,
                    trials: int = 500, seed: int = 0, tol: float = 1e-6) -> FairnessReport:
    """Run all three checks with the disagreement point as the worst case."""
    u = utilities(g, s)
    part = g.participants
    ef = check_ef(u[part], g.u0[part], tol)
    mf = None
    if candidates:
        cands = [(s, u[part])] + [(c, utilities(g, c)[part]) for c in candidates]
        mf = check_mf(cands, g.u0[part])
    return FairnessReport(ef, mf, check_pf(g, s, trials, seed))
