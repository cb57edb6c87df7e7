"""Message-count overhead of collaboration and its growth with the search radius."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .topology import DegreeStats, Neighborhood

__all__ = [
    "OverheadParams",
    "GrowthLaw",
    "GrowthFit",
    "node_overhead",
    "system_overhead",
    "average_form_overhead",
    "analytic_zr",
    "delta_phi",
    "er_overhead",
    "stirling2_table",
    "poisson_moment",
    "growth_law",
    "fit_growth_ratio",
]


@dataclass(frozen=True)
class OverheadParams:
    """Message constant ``c`` and catalog size; ``theta = 2 c |O|``."""

    c: float
    catalog_size: int

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("message constant c must be positive")
        if self.catalog_size < 0:
            raise ValueError("catalog_size must be non-negative")

    @property
    def theta(self) -> float:
        return 2 * self.c * self.catalog_size


def node_overhead(p: OverheadParams, n_i: int, n_plus_i: int) -> float:
    """Messages one node exchanges per iteration: ``c |O| (|N+_i| + |N_i|)``."""
    if n_i < 0 or n_plus_i < 0:
        raise ValueError("neighborhood sizes must be non-negative")
    return p.c * p.catalog_size * (n_plus_i + n_i)


def system_overhead(p: OverheadParams, neighborhoods: Sequence[Neighborhood]) -> float:
    """Total per-iteration messages ``theta * sum |N_i|``.

    Every pair ``(i, j)`` with ``j`` in ``N_i`` is counted once in
    ``|N_i|`` and once in ``|N+_j|``, so both sums agree; this is checked.
    """
    n_sum = sum(len(nb.members) for nb in neighborhoods)
    plus_sum = sum(len(nb.co_members) for nb in neighborhoods)
    if n_sum != plus_sum:
        raise AssertionError(f"sum |N_i| = {n_sum} differs from sum |N+_i| = {plus_sum}")
    return p.theta * n_sum


def average_form_overhead(p: OverheadParams, neighborhoods: Sequence[Neighborhood]) -> float:
    """Same total written as ``theta * |V| * mean |N_i|``."""
    sizes = np.array([len(nb.members) for nb in neighborhoods], dtype=np.float64)
    return p.theta * len(sizes) * float(sizes.mean()) if sizes.size else 0.0


def _check_stats(stats: DegreeStats):
    if stats.z1 <= 0:
        raise ValueError("z1 = <k> must be positive for the ring-size recursion")


def analytic_zr(stats: DegreeStats, r: int) -> float:
    """Tree-approximation ring size ``(z2/z1)^(r-1) z1``."""
    if r < 1:
        raise ValueError("r must be >= 1")
    _check_stats(stats)
    return (stats.z2 / stats.z1) ** (r - 1) * stats.z1


def delta_phi(p: OverheadParams, stats: DegreeStats, n_nodes: int, r: int) -> float:
    """Extra messages when every radius grows from ``r`` to ``r + 1``."""
    if r < 0:
        raise ValueError("r must be >= 0")
    _check_stats(stats)
    return p.theta * n_nodes * (stats.z2 / stats.z1) ** r * stats.z1


def er_overhead(p: OverheadParams, z: float, n_nodes: int, r: int) -> tuple[float, float]:
    """Closed forms on a Poisson random graph with mean degree ``z``.

    Returns ``(delta, total)`` where ``delta = theta |V| z^(r+1)`` and
    ``total = theta |V| (z + ... + z^r)``. At ``z = 1`` the geometric sum
    degenerates to ``r``.
    """
    if z <= 0:
        raise ValueError("mean degree must be positive")
    if r < 0:
        raise ValueError("r must be >= 0")
    scale = p.theta * n_nodes
    delta = scale * z ** (r + 1)
    if z == 1.0:
        return delta, scale * r
    return delta, scale * z * (1.0 - z ** r) / (1.0 - z)


def stirling2_table(n_max: int) -> np.ndarray:
    """Stirling numbers of the second kind ``S[n, k]`` for ``n, k <= n_max``.

    Stored as Python ints in an object array so large entries stay exact.
    """
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    S = np.zeros((n_max + 1, n_max + 1), dtype=object)
    S[0, 0] = 1
    for n in range(1, n_max + 1):
        for k in range(1, n + 1):
            S[n, k] = k * S[n - 1, k] + S[n - 1, k - 1]
    return S


def poisson_moment(z: float, n: int) -> float:
    """Raw moment ``E[k^n]`` of a Poisson(``z``) variable, ``sum_k S(n,k) z^k``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if z <= 0:
        raise ValueError("z must be positive")
    if n == 0:
        return 1.0
    S = stirling2_table(n)
    return math.fsum(float(S[n, k]) * z ** k for k in range(1, n + 1))


@dataclass(frozen=True)
class GrowthLaw:
    """Per-radius ring sizes, analytic and measured, with overhead increments."""

    z1: float
    z2: float
    theta: float
    n_nodes: int
    radii: np.ndarray
    z_analytic: np.ndarray
    z_empirical: np.ndarray
    delta: np.ndarray
    phi: np.ndarray

    @property
    def ratio(self) -> float:
        return self.z2 / self.z1

    @property
    def diverging(self) -> bool:
        return self.ratio > 1.0

    @property
    def relative_error(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.abs(self.z_analytic - self.z_empirical) / self.z_empirical

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "z_r_analytic", "z_r_empirical", "delta_phi", "phi_cumulative"])
        for row in zip(self.radii, self.z_analytic, self.z_empirical, self.delta, self.phi):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def growth_law(p: OverheadParams, stats: DegreeStats, n_nodes: int, r_max: int) -> GrowthLaw:
    """Tabulate ``r = 1..r_max``.

    ``delta[r]`` is the cost of growing the radius from ``r - 1`` to ``r``
    (it adds the ring at distance ``r``) and ``phi[r]`` the running total,
    both from the analytic ring sizes.
    """
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    _check_stats(stats)
    radii = np.arange(1, r_max + 1)
    za = np.array([analytic_zr(stats, int(r)) for r in radii])
    ze = np.asarray(stats.z_ring, dtype=np.float64)
    ze = np.concatenate([ze, np.zeros(max(0, r_max + 1 - ze.size))])[1:r_max + 1]
    delta = np.array([delta_phi(p, stats, n_nodes, int(r) - 1) for r in radii])
    return GrowthLaw(stats.z1, stats.z2, p.theta, n_nodes, radii, za, ze, delta, np.cumsum(delta))


@dataclass(frozen=True)
class GrowthFit:
    ratio: float
    intercept: float
    residuals: np.ndarray = field(repr=False)
    radii: np.ndarray = field(repr=False)


def fit_growth_ratio(z_ring: Sequence[float], r_lo: int = 1, r_hi: int = 3) -> GrowthFit:
    """Least-squares fit of ``log z_r = a + r log b`` over ``r_lo..r_hi``.

    ``b`` is the per-hop growth ratio; residuals are in log space.
    """
    z = np.asarray(z_ring, dtype=np.float64)
    radii = np.arange(r_lo, r_hi + 1)
    if r_hi >= z.size or r_lo < 1 or r_hi <= r_lo:
        raise ValueError("need ring sizes for at least two radii in range")
    vals = z[radii]
    if np.any(vals <= 0):
        raise ValueError("ring sizes must be positive to fit a growth ratio")
    coef = np.polyfit(radii.astype(np.float64), np.log(vals), 1)
    resid = np.log(vals) - np.polyval(coef, radii)
    return GrowthFit(float(np.exp(coef[0])), float(coef[1]), resid, radii)
