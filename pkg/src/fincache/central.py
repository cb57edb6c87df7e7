"""Centralized Nash bargaining solve, KKT certificate and brute-force oracle.

The program maximizes ``sum_i ln(U_i - u0_i)`` over participating nodes
subject to capacity, serve-once (or per-object retrieval), availability
``y[i, j, k] <= x[j, k]`` and box constraints. It is solved with a
primal-dual interior-point method, which returns the constraint
multipliers alongside the strategy.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import nnls
from scipy.sparse.linalg import splu

from .game import (CachingStrategy, GameInstance, NegotiationBreakdown,
                   greedy_placement, utilities)

__all__ = [
    "KKTMultipliers",
    "KKTReport",
    "SolveReport",
    "OracleResult",
    "Program",
    "build_program",
    "solve_central",
    "kkt_check",
    "recover_multipliers",
    "brute_force_nbs",
    "brute_force_max_total",
    "grid_gap_bound",
]

log = logging.getLogger(__name__)


@dataclass
class KKTMultipliers:
    """Multipliers of the Nash program, indexed like the constraints.

    ``alpha`` capacity (node), ``beta`` serve-once / retrieval budget
    (node x object), ``gamma`` ``x <= 1``, ``eta`` ``x >= 0`` (node x
    object), ``delta`` ``y >= 0`` and ``lam`` availability (pair x object).
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    delta: np.ndarray
    lam: np.ndarray

    @classmethod
    def zeros(cls, g: GameInstance) -> "KKTMultipliers":
        n, K, P = g.node_count, g.object_count, len(g.pairs)
        return cls(np.zeros(n), np.zeros((n, K)), np.zeros((n, K)), np.zeros((n, K)),
                   np.zeros((P, K)), np.zeros((P, K)))

    def as_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("alpha", "beta", "gamma", "eta", "delta", "lam")}


@dataclass
class KKTReport:
    multipliers: KKTMultipliers
    stationarity_residual: float
    slackness_residual: float
    slackness_by_constraint: dict
    tau: np.ndarray
    tau_prime: np.ndarray

    @property
    def min_multiplier(self) -> float:
        m = self.multipliers
        return float(min(a.min(initial=0.0) for a in
                         (m.alpha, m.beta, m.gamma, m.eta, m.delta, m.lam)))


@dataclass
class SolveReport:
    strategy: CachingStrategy
    objective: float
    iterations: int
    converged: bool
    kkt: KKTReport | None
    history: list = field(default_factory=list)
    gap: float = float("nan")

    def history_csv(self) -> str:
        """Objective per iteration plus final residuals."""
        lines = ["iter,objective"] + [f"{k},{v!r}" for k, v in enumerate(self.history)]
        if self.kkt is not None:
            lines += ["", "residual,value",
                      f"stationarity,{self.kkt.stationarity_residual!r}",
                      f"slackness,{self.kkt.slackness_residual!r}"]
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        out = {
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "duality_gap": self.gap,
            "x": self.strategy.x.tolist(),
            "pairs": self.strategy.pairs.tolist(),
            "y": self.strategy.y.tolist(),
        }
        if self.kkt is not None:
            out["kkt"] = {
                "stationarity_residual": self.kkt.stationarity_residual,
                "slackness_residual": self.kkt.slackness_residual,
                "slackness_by_constraint": self.kkt.slackness_by_constraint,
                "multipliers": self.kkt.multipliers.as_dict(),
            }
        return out


# ----------------------------------------------------------------------------
# Program assembly


@dataclass
class Program:
    """Linear constraint data ``G z <= h`` and affine utilities
    ``U = A z + b`` over the free variables ``z``."""

    g: GameInstance
    x_var: np.ndarray           # (n, K) variable index or -1
    y_var: np.ndarray           # (P, K) variable index or -1
    x_fixed: np.ndarray         # (n, K) values of fixed placement entries
    G: sp.csr_matrix
    h: np.ndarray
    kinds: np.ndarray           # constraint family per row
    rows: np.ndarray            # (m, 3) family-specific index per row
    A: sp.csr_matrix            # participants x variables
    b: np.ndarray
    free_nodes: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.G.shape[1]

    def strategy(self, z: np.ndarray) -> CachingStrategy:
        g = self.g
        x = self.x_fixed.copy()
        mask = self.x_var >= 0
        x[mask] = z[self.x_var[mask]]
        y = np.zeros(self.y_var.shape)
        ym = self.y_var >= 0
        y[ym] = z[self.y_var[ym]]
        return CachingStrategy(x, g.pairs, y)

    def pack(self, s: CachingStrategy) -> np.ndarray:
        z = np.zeros(self.n_vars)
        mask = self.x_var >= 0
        z[self.x_var[mask]] = s.x[mask]
        ym = self.y_var >= 0
        z[self.y_var[ym]] = s.y[ym]
        return z


_CAP, _BUDGET, _XHI, _XLO, _YLO, _AVAIL = range(6)
_KIND_NAMES = {_CAP: "capacity", _BUDGET: "serve_once", _XHI: "x_upper",
               _XLO: "x_lower", _YLO: "y_lower", _AVAIL: "availability"}


def build_program(g: GameInstance) -> Program:
    n, K = g.node_count, g.object_count
    pairs = g.pairs
    P = len(pairs)
    part = g.participants
    cap = g.capacities
    w = g.weights

    # Non-participants keep their greedy cache; participants with no
    # capacity have x pinned to zero.
    x_fixed = np.zeros((n, K))
    pinned = ~part
    x_fixed[pinned] = greedy_placement(w[pinned], cap[pinned])
    free_x = part[:, None] & (cap[:, None] > 0) & np.ones((n, K), dtype=bool)
    x_var = np.full((n, K), -1, dtype=np.int64)
    x_var[free_x] = np.arange(free_x.sum())
    nx_ = int(free_x.sum())

    y_var = np.full((P, K), -1, dtype=np.int64)
    if P:
        src_free = free_x[pairs[:, 1]]
        src_pos = x_fixed[pairs[:, 1]] > 0
        ok = part[pairs[:, 0]][:, None] & (src_free | src_pos) & (g.pair_discount[:, None] > 0)
        y_var[ok] = nx_ + np.arange(ok.sum())
    nv = nx_ + int((y_var >= 0).sum())

    rows_i, cols_i, vals = [], [], []
    h, kinds, rows = [], [], []

    def add(cols, coef, rhs, kind, idx):
        r = len(h)
        rows_i.extend([r] * len(cols))
        cols_i.extend(cols)
        vals.extend(coef)
        h.append(rhs)
        kinds.append(kind)
        rows.append(idx)

    for i in range(n):
        cols = x_var[i][x_var[i] >= 0].tolist()
        if cols:
            add(cols, [1.0] * len(cols), cap[i], _CAP, (i, -1, -1))
    lo, hi = g.pair_offsets[:-1], g.pair_offsets[1:]
    for i in range(n):
        if not part[i]:
            continue
        for k in range(K):
            cols, coef = [], []
            rhs = 1.0
            if g.serve_once:
                if x_var[i, k] >= 0:
                    cols.append(x_var[i, k])
                    coef.append(1.0)
                else:
                    rhs -= x_fixed[i, k]
            ycols = y_var[lo[i]:hi[i], k]
            ycols = ycols[ycols >= 0].tolist()
            cols += ycols
            coef += [1.0] * len(ycols)
            if ycols:
                add(cols, coef, rhs, _BUDGET, (i, k, -1))
    for (i, k), v in np.ndenumerate(x_var):
        if v >= 0:
            add([v], [1.0], 1.0, _XHI, (i, k, -1))
            add([v], [-1.0], 0.0, _XLO, (i, k, -1))
    for (p, k), v in np.ndenumerate(y_var):
        if v < 0:
            continue
        add([v], [-1.0], 0.0, _YLO, (p, k, -1))
        j = pairs[p, 1]
        if x_var[j, k] >= 0:
            add([v, x_var[j, k]], [1.0, -1.0], 0.0, _AVAIL, (p, k, -1))
        else:
            add([v], [1.0], x_fixed[j, k], _AVAIL, (p, k, -1))

    G = sp.csr_matrix((vals, (rows_i, cols_i)), shape=(len(h), nv))

    free_nodes = np.flatnonzero(part)
    a_rows, a_cols, a_vals = [], [], []
    b = np.zeros(len(free_nodes))
    for r, i in enumerate(free_nodes):
        xi = x_var[i]
        m = xi >= 0
        a_rows += [r] * int(m.sum())
        a_cols += xi[m].tolist()
        a_vals += w[i, m].tolist()
        b[r] = float((w[i] * x_fixed[i]).sum())
        for p in range(lo[i], hi[i]):
            yp = y_var[p]
            m = yp >= 0
            a_rows += [r] * int(m.sum())
            a_cols += yp[m].tolist()
            a_vals += (w[i, m] * g.pair_discount[p]).tolist()
    A = sp.csr_matrix((a_vals, (a_rows, a_cols)), shape=(len(free_nodes), nv))
    return Program(g, x_var, y_var, x_fixed, G, np.array(h, dtype=np.float64),
                   np.array(kinds, dtype=np.int64), np.array(rows, dtype=np.int64).reshape(-1, 3),
                   A, b, free_nodes)


def _interior_start(prog: Program) -> np.ndarray:
    """A point strictly inside the linear constraints."""
    g = prog.g
    n, K = g.node_count, g.object_count
    theta = 0.5 * np.minimum(1.0, g.capacities / K)
    x = np.where(prog.x_var >= 0, theta[:, None], prog.x_fixed)
    z = np.zeros(prog.n_vars)
    m = prog.x_var >= 0
    z[prog.x_var[m]] = x[m]
    deg = np.diff(g.pair_offsets)
    for (p, k), v in np.ndenumerate(prog.y_var):
        if v >= 0:
            i, j = g.pairs[p]
            z[v] = min(0.5 * x[j, k], 0.4 / deg[i])
    return z


# ----------------------------------------------------------------------------
# Primal-dual interior point


class _Objective:
    """Either ``-sum ln(A z + b - u0)`` or the phase-I linear objective."""

    def __init__(self, A, c):
        self.A = A
        self.c = c

    def value(self, z):
        s = self.A @ z + self.c
        if np.any(s <= 0):
            return np.inf
        return -float(np.log(s).sum())

    def grad(self, z):
        s = self.A @ z + self.c
        return -(self.A.T @ (1.0 / s))

    def hess_factor(self, z):
        s = self.A @ z + self.c
        return 1.0 / s ** 2


def _factor_kkt(G: sp.csr_matrix, r: np.ndarray, lam: np.ndarray,
                A: sp.csr_matrix | None, d: np.ndarray | None):
    """Factor the augmented Newton system

    ``[[A^T diag(d) A, G^T], [G, -diag(r/lam)]]``

    with the utility Hessian lifted into auxiliary rows ``u = diag(d) A dz``
    so the matrix stays sparse. Returns ``solve(rhs_z, rhs_lam)``.
    """
    n, m = G.shape[1], G.shape[0]
    p = A.shape[0] if A is not None else 0
    blocks = [[None, G.T, A.T if p else None],
              [G, sp.diags(-r / lam), None],
              [A if p else None, None, sp.diags(-1.0 / d) if p else None]]
    if not p:
        blocks = [row[:2] for row in blocks[:2]]
        blocks[0][0] = sp.csr_matrix((n, n))
    else:
        blocks[0][0] = sp.csr_matrix((n, n))
    K = sp.bmat(blocks, format="csc")
    lu = splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1)

    def solve(rz, rl):
        rhs = np.concatenate([rz, rl, np.zeros(p)])
        v = lu.solve(rhs)
        v += lu.solve(rhs - K @ v)
        return v[:n], v[n:n + m]
    return solve


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _pdip(obj: _Objective | None, G, h, z, *, linear_c=None, tol=1e-10, max_iter=200,
          stop=None, history=None):
    """Mehrotra predictor-corrector for ``min f(z) s.t. G z <= h``.

    ``f`` is ``obj`` (negative sum of log surpluses) or, when ``linear_c``
    is given, ``linear_c @ z``. Primal iterates stay strictly feasible.
    Returns ``(z, lam, iters, converged)``.
    """
    m = G.shape[0]
    r = h - G @ z
    if np.any(r <= 0):
        raise ValueError("start point is not strictly feasible")
    GT = G.T.tocsr()
    nonlinear = linear_c is None
    if nonlinear:
        lam = np.maximum(1.0 / r, 1e-8) * float(np.abs(obj.grad(z)).max() + 1.0) / max(m, 1) * 10
    else:
        lam = np.ones(m) / r * 1e-2
    lam = np.maximum(lam, 1e-10)

    def fval(zz):
        return float(linear_c @ zz) if not nonlinear else obj.value(zz)

    def fgrad(zz):
        return obj.grad(zz) if nonlinear else linear_c

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = fgrad(z)
        rd = grad + GT @ lam
        comp = lam * r
        if history is not None:
            history.append(fval(z))
        if stop is not None and stop(z):
            converged = True
            break
        # roundoff in stationarity grows with the gradient as surpluses shrink
        floor = 1e-10 * float(np.max(np.abs(grad), initial=0.0))
        if np.max(np.abs(rd), initial=0.0) <= max(tol, floor) and comp.max(initial=0.0) <= tol:
            converged = True
            break
        mu = comp.mean() if m else 0.0
        if nonlinear:
            solve = _factor_kkt(G, r, lam, obj.A, obj.hess_factor(z))
        else:
            solve = _factor_kkt(G, r, lam, None, None)

        def direction(target):
            dz, dlam = solve(-rd, -(target - comp) / lam)
            return dz, dlam, -(G @ dz)

        def step_len(dz, dlam, dr):
            a = min(_max_step(r, dr), _max_step(lam, dlam))
            if nonlinear:
                s0 = obj.A @ z + obj.c
                a = min(a, _max_step(s0, obj.A @ dz))
            return a

        dz, dlam, dr = direction(np.zeros(m))
        a_aff = min(1.0, step_len(dz, dlam, dr))
        mu_aff = float(((r + a_aff * dr) @ (lam + a_aff * dlam)) / m)
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
        target = sigma * mu - dr * dlam
        dz, dlam, dr = direction(target)
        a = min(1.0, 0.99 * step_len(dz, dlam, dr))
        if nonlinear:
            # keep the objective finite and avoid a blow-up in stationarity
            f0 = np.max(np.abs(rd))
            for _ in range(30):
                zn = z + a * dz
                ln_ = lam + a * dlam
                rdn = fgrad(zn) + GT @ ln_
                if np.isfinite(obj.value(zn)) and (np.max(np.abs(rdn)) <= max(10 * f0, 1e-6) or a < 1e-4):
                    break
                a *= 0.5
        if a < 1e-14:
            log.debug("interior point stalled at iteration %d", it)
            break
        z = z + a * dz
        lam = lam + a * dlam
        r = h - G @ z
        if np.any(r <= 0):
            # roundoff at the boundary: pull back slightly
            z = z - a * dz * 1e-3
            r = h - G @ z
    return z, lam, it, converged


def _phase_one(prog: Program, eps0: float, max_iter: int = 200):
    """Find a point where every participant's surplus exceeds ``eps0``.

    The budget is separate from the main solve so that a short main run
    never turns into a spurious breakdown.
    """
    g = prog.g
    z0 = _interior_start(prog)
    u0 = g.u0[prog.free_nodes]
    surplus = prog.A @ z0 + prog.b - u0
    if np.all(surplus > eps0) or len(prog.free_nodes) == 0:
        return z0
    # variables (z, sigma): minimize sigma with u0 - U(z) <= sigma, sigma >= -cap
    nv = prog.n_vars
    scale = max(float(np.abs(u0).max(initial=0.0)), 1.0)
    cap_sigma = scale
    Gs = sp.vstack([
        sp.hstack([prog.G, sp.csr_matrix((prog.G.shape[0], 1))]),
        sp.hstack([-prog.A, -sp.csr_matrix(np.ones((len(u0), 1)))]),
        sp.hstack([sp.csr_matrix((1, nv)), -sp.csr_matrix(np.ones((1, 1)))]),
    ]).tocsr()
    hs = np.concatenate([prog.h, prog.b - u0, [cap_sigma]])
    sigma0 = float(np.max(u0 - prog.A @ z0 - prog.b)) + 1.0
    zs = np.concatenate([z0, [sigma0]])
    c = np.zeros(nv + 1)
    c[-1] = 1.0
    target = -max(10 * eps0, 1e-3 * scale)

    zs, _, _, _ = _pdip(None, Gs, hs, zs, linear_c=c, tol=1e-11, max_iter=max_iter,
                        stop=lambda v: v[-1] <= target)
    z = zs[:-1]
    surplus = prog.A @ z + prog.b - u0
    if np.min(surplus) <= eps0:
        blocking = prog.free_nodes[surplus <= eps0 + 1e-9 * scale]
        raise NegotiationBreakdown(blocking, "no strictly individually rational strategy")
    return _recentre(prog, z, z0, surplus, surplus0=surplus - (prog.A @ (z - z0)))


def _recentre(prog: Program, z, z0, surplus, surplus0):
    """Move toward the interior start while keeping half of every surplus.

    A phase I run that ends at an LP vertex leaves slacks near zero, which
    stalls the main solve; the segment to ``z0`` restores them.
    """
    drop = surplus - surplus0
    with np.errstate(divide="ignore", invalid="ignore"):
        limits = np.where(drop > 0, 0.5 * surplus / drop, 1.0)
    t = float(min(0.5, limits.min(initial=1.0)))
    return z + t * (z0 - z)


def solve_central(g: GameInstance, tol: float = 1e-9, max_iter: int = 200) -> SolveReport:
    """Maximize the Nash log objective; see module docstring."""
    prog = build_program(g)
    if len(prog.free_nodes) == 0:
        s = prog.strategy(np.zeros(prog.n_vars))
        return SolveReport(s, 0.0, 0, True, kkt_check(g, s, KKTMultipliers.zeros(g)), [0.0], 0.0)
    z = _phase_one(prog, g.eps0)
    obj = _Objective(prog.A, prog.b - g.u0[prog.free_nodes])
    hist: list[float] = []
    z, lam, iters, converged = _pdip(obj, prog.G, prog.h, z, tol=tol, max_iter=max_iter,
                                     history=hist)
    s = prog.strategy(z)
    mult = _unpack_multipliers(prog, lam, s)
    report = kkt_check(g, s, mult)
    objective = -obj.value(z)
    gap = float((prog.h - prog.G @ z) @ lam)
    history = [-v for v in hist] + [objective]
    return SolveReport(s, objective, iters, converged, report, history, gap)


def _unpack_multipliers(prog: Program, lam: np.ndarray, s: CachingStrategy) -> KKTMultipliers:
    g = prog.g
    m = KKTMultipliers.zeros(g)
    for kind, (a, b_, _), v in zip(prog.kinds, prog.rows, lam):
        if kind == _CAP:
            m.alpha[a] = v
        elif kind == _BUDGET:
            m.beta[a, b_] = v
        elif kind == _XHI:
            m.gamma[a, b_] = v
        elif kind == _XLO:
            m.eta[a, b_] = v
        elif kind == _YLO:
            m.delta[a, b_] = v
        else:
            m.lam[a, b_] = v
    _complete_fixed(prog, s, m)
    return m


def _complete_fixed(prog: Program, s: CachingStrategy, m: KKTMultipliers) -> None:
    """Fill multipliers for variables the program pinned to a bound, so
    stationarity holds for every participant-owned variable."""
    g = prog.g
    gx, gy = _log_gradients(g, s)
    pairs = g.pairs
    part = g.participants
    for (p, k), v in np.ndenumerate(prog.y_var):
        if v >= 0 or not part[pairs[p, 0]]:
            continue
        i = pairs[p, 0]
        rest = gy[p, k] - m.beta[i, k]
        m.lam[p, k] = max(rest, 0.0)
        m.delta[p, k] = max(-rest, 0.0)
    for i in np.flatnonzero(part & (g.capacities <= 0)):
        income = _income(g, m.lam)
        rest = gx[i] + income[i] - m.beta[i] - m.gamma[i]
        m.alpha[i] = max(float(rest.max(initial=0.0)), 0.0)
        m.eta[i] = m.alpha[i] - rest


def _income(g: GameInstance, lam: np.ndarray) -> np.ndarray:
    """``sum_{j : i in N_j} lam[j, i, k]`` for every node ``i``."""
    out = np.zeros((g.node_count, g.object_count))
    if len(g.pairs):
        np.add.at(out, g.pairs[:, 1], lam)
    return out


def _log_gradients(g: GameInstance, s: CachingStrategy):
    """Gradient of ``sum ln(U_i - u0_i)`` over participants w.r.t. x, y."""
    gap = utilities(g, s) - g.u0
    inv = np.where(g.participants, 1.0 / np.where(gap > 0, gap, np.nan), 0.0)
    gx = g.weights * inv[:, None]
    i = s.pairs[:, 0]
    disc = np.asarray(g.discount_fn(g.dist[i, s.pairs[:, 1]]), dtype=np.float64)
    gy = g.weights[i] * (disc * inv[i])[:, None]
    return gx, gy


def kkt_check(g: GameInstance, s: CachingStrategy, m: KKTMultipliers) -> KKTReport:
    """Stationarity and complementary-slackness residuals.

    Stationarity for participant-owned variables:

    ``w/(U-u0) + income - alpha - beta - gamma + eta = 0`` for ``x`` and
    ``w d/(U-u0) - lam - beta + delta = 0`` for ``y``.
    """
    n, K = g.node_count, g.object_count
    P = len(g.pairs)
    shapes = {"alpha": (n,), "beta": (n, K), "gamma": (n, K), "eta": (n, K),
              "delta": (P, K), "lam": (P, K)}
    for name, shp in shapes.items():
        if np.shape(getattr(m, name)) != shp:
            raise ValueError(f"multiplier {name} has shape {np.shape(getattr(m, name))}, expected {shp}")
    if s.x.shape != (n, K) or s.y.shape != (P, K):
        raise ValueError("strategy dimensions do not match the game")

    part = g.participants
    gx, gy = _log_gradients(g, s)
    income = _income(g, m.lam)
    res_x = gx + income - m.alpha[:, None] - m.beta - m.gamma + m.eta
    res_y = gy - m.lam - m.beta[g.pairs[:, 0]] + m.delta if P else np.zeros((0, K))
    owned_x = part[:, None] & np.ones((n, K), dtype=bool)
    owned_y = part[g.pairs[:, 0]][:, None] & np.ones((P, K), dtype=bool)
    stat = max(np.abs(res_x[owned_x]).max(initial=0.0), np.abs(res_y[owned_y]).max(initial=0.0))

    x, y = s.x, s.y
    retrieved = s.retrieved()
    budget = (x + retrieved - 1.0) if g.serve_once else (retrieved - 1.0)
    slack = {
        "capacity": np.abs(m.alpha * (x.sum(axis=1) - g.capacities))[part],
        "serve_once": np.abs(m.beta * budget)[owned_x],
        "x_upper": np.abs(m.gamma * (x - 1.0))[owned_x],
        "x_lower": np.abs(m.eta * x)[owned_x],
        "y_lower": np.abs(m.delta * y)[owned_y],
        "availability": np.abs(m.lam * (y - x[g.pairs[:, 1]]))[owned_y] if P else np.zeros(0),
    }
    by = {k: float(v.max(initial=0.0)) for k, v in slack.items()}

    U = utilities(g, s)
    tau = (U - g.u0)[:, None] - g.weights * x
    disc = g.pair_discount
    tau_p = (U - g.u0)[g.pairs[:, 0]][:, None] - g.weights[g.pairs[:, 0]] * disc[:, None] * y
    return KKTReport(m, float(stat), max(by.values(), default=0.0), by, tau, tau_p)


def recover_multipliers(g: GameInstance, s: CachingStrategy, active_tol: float = 1e-7) -> KKTMultipliers:
    """Non-negative least-squares multipliers on the active constraints."""
    prog = build_program(g)
    z = prog.pack(s)
    r = prog.h - prog.G @ z
    active = np.flatnonzero(r <= active_tol)
    gx, gy = _log_gradients(g, s)
    target = np.zeros(prog.n_vars)
    mx = prog.x_var >= 0
    target[prog.x_var[mx]] = gx[mx]
    my = prog.y_var >= 0
    target[prog.y_var[my]] = gy[my]
    lam = np.zeros(prog.G.shape[0])
    if len(active):
        # gradient of the log objective = G_active^T lam_active
        M = prog.G[active].T.toarray()
        sol, _ = nnls(M, target, maxiter=50 * M.shape[1] + 100)
        lam[active] = sol
    return _unpack_multipliers(prog, lam, s)


# ----------------------------------------------------------------------------
# Brute-force oracle


@dataclass
class OracleResult:
    strategy: CachingStrategy
    objective: float
    utilities: np.ndarray
    total: float
    evaluated: int


def _grid_rows(K: int, cap: float, step: float) -> np.ndarray:
    levels = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    rows = np.array(list(itertools.product(levels, repeat=K)), dtype=np.float64).reshape(-1, K)
    return rows[rows.sum(axis=1) <= cap + 1e-12]


def _batch_utilities(g: GameInstance, X: np.ndarray):
    """Utilities with optimal retrieval for a batch of placements
    ``X`` of shape (B, n, K)."""
    w = g.weights
    pairs = g.pairs
    U = (X * w[None]).sum(axis=2)
    if not len(pairs):
        return U, np.zeros((X.shape[0], 0, X.shape[2]))
    disc = g.pair_discount
    order = np.lexsort((pairs[:, 1], -disc, pairs[:, 0]))
    budget = np.clip(1.0 - X, 0.0, 1.0) if g.serve_once else np.ones_like(X)
    Y = np.zeros((X.shape[0], len(pairs), X.shape[2]))
    for p in order:
        i, j = pairs[p]
        if disc[p] <= 0:
            continue
        take = np.minimum(X[:, j], budget[:, i])
        Y[:, p] = take
        budget[:, i] -= take
        U[:, i] += disc[p] * (take * w[i]).sum(axis=1)
    return U, Y


def _enumerate(g: GameInstance, grid: float, max_points: int):
    if grid not in (1.0, 0.5, 0.25):
        raise ValueError("grid must be one of 1, 0.5, 0.25")
    n, K = g.node_count, g.object_count
    if n > 3 or K > 4:
        raise ValueError(f"instance too large for brute force ({n} nodes, {K} objects)")
    part = g.participants
    fixed = greedy_placement(g.weights, g.capacities)
    choices = []
    for i in range(n):
        if part[i]:
            choices.append(_grid_rows(K, g.capacities[i], grid))
        else:
            choices.append(fixed[i:i + 1])
    total = int(np.prod([len(c) for c in choices]))
    if total > max_points:
        raise ValueError(f"brute force would evaluate {total} placements (limit {max_points})")
    return choices, total


def _scan(g: GameInstance, grid: float, score, max_points: int, chunk: int = 20000) -> OracleResult:
    choices, total = _enumerate(g, grid, max_points)
    sizes = [len(c) for c in choices]
    best = (-np.inf, None)
    flat = np.arange(total)
    for start in range(0, total, chunk):
        idx = np.unravel_index(flat[start:start + chunk], sizes)
        X = np.stack([choices[i][idx[i]] for i in range(len(choices))], axis=1)
        U, Y = _batch_utilities(g, X)
        val = score(U, X)
        b = int(np.argmax(val))
        if val[b] > best[0]:
            best = (float(val[b]), (X[b], Y[b], U[b]))
    if best[1] is None:
        raise NegotiationBreakdown(np.flatnonzero(g.participants),
                                   "no grid strategy gives every participant a positive surplus")
    x, y, U = best[1]
    return OracleResult(CachingStrategy(x, g.pairs, y), best[0], U, float(U.sum()), total)


def brute_force_nbs(g: GameInstance, grid: float = 1.0, require_local_rationality: bool = False,
                    max_points: int = 5_000_000) -> OracleResult:
    """Exhaustive Nash-product maximization over grid placements.

    Each placement is completed with the optimal retrieval. With
    ``require_local_rationality`` a placement is admissible only if every
    node's own-cache utility stays at or above its disagreement value.
    """
    part = g.participants
    u0 = g.u0
    w = g.weights

    def score(U, X):
        gap = (U - u0[None])[:, part]
        ok = np.all(gap > 0, axis=1)
        if require_local_rationality:
            local = (X * w[None]).sum(axis=2)
            ok &= np.all(local >= u0[None] - 1e-12, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.log(np.where(gap > 0, gap, 1.0)).sum(axis=1)
        return np.where(ok, val, -np.inf)

    return _scan(g, grid, score, max_points)


def brute_force_max_total(g: GameInstance, grid: float = 1.0, max_points: int = 5_000_000) -> OracleResult:
    """Exhaustive maximization of the aggregate utility ``sum_i U_i``."""
    return _scan(g, grid, lambda U, X: U.sum(axis=1), max_points)


def grid_gap_bound(g: GameInstance, s: CachingStrategy, grid: float) -> float:
    """Upper bound on ``optimum - best grid objective``.

    Rounds the placement down to the grid (capacity stays satisfied),
    completes retrieval optimally and returns the objective loss.
    """
    from .game import complete_strategy, nash_log_objective

    x = np.floor(s.x / grid + 1e-9) * grid
    part = g.participants
    x = np.where(part[:, None], x, s.x)
    try:
        rounded = nash_log_objective(g, complete_strategy(g, x))
    except NegotiationBreakdown:
        return np.inf
    return nash_log_objective(g, s) - rounded
