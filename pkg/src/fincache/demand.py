"""Content catalog and per-node demand with Weibull-ranked popularity."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .topology import Topology

__all__ = [
    "DEFAULT_OBJECT_SIZE_MB",
    "DEFAULT_WEIBULL_SHAPE",
    "DEFAULT_WEIBULL_SCALE",
    "Catalog",
    "DemandMatrix",
    "weibull_popularity",
    "build_demand",
    "duo_demand",
    "demand_to_csv",
    "demand_from_csv",
]

DEFAULT_OBJECT_SIZE_MB = 8.4
DEFAULT_WEIBULL_SHAPE = 0.513
# Not given by the workload description; chosen so the head spans tens of ranks.
DEFAULT_WEIBULL_SCALE = 40.0


@dataclass(frozen=True)
class Catalog:
    object_count: int
    sizes: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.float64)
        if sizes.shape != (self.object_count,):
            raise ValueError("sizes must have one entry per object")
        if np.any(sizes <= 0):
            raise ValueError("object sizes must be positive")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def uniform(cls, object_count: int, size: float = DEFAULT_OBJECT_SIZE_MB) -> "Catalog":
        return cls(object_count, np.full(object_count, float(size)))


@dataclass(frozen=True)
class DemandMatrix:
    """Request rates ``w[i, k]`` of node ``i`` for object ``k``."""

    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("demand must be a node x object matrix")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("demand rates must be finite and non-negative")
        if np.any(w.sum(axis=1) <= 0):
            raise ValueError("every node needs at least one positive demand entry")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def node_count(self) -> int:
        return self.w.shape[0]

    @property
    def object_count(self) -> int:
        return self.w.shape[1]


def weibull_popularity(n_objects: int, shape: float = DEFAULT_WEIBULL_SHAPE,
                       scale: float = DEFAULT_WEIBULL_SCALE) -> np.ndarray:
    """Popularity of ranks ``1..n_objects``.

    Rank ``j`` gets ``F(j) - F(j-1)`` with ``F`` the Weibull CDF; the masses
    are sorted non-increasing (only matters for ``shape > 1``, where the
    density is not monotone) and normalized to sum to one.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if shape <= 0 or scale <= 0:
        raise ValueError("Weibull shape and scale must be positive")
    ranks = np.arange(n_objects + 1, dtype=np.float64)
    # 1 - F(x) = exp(-(x/scale)^shape); differences of the tail are exact
    # where F(j) and F(j-1) are both close to one.
    tail = np.exp(-(ranks / scale) ** shape)
    weights = tail[:-1] - tail[1:]
    if weights.sum() <= 0:
        weights = np.ones(n_objects)
    weights = np.sort(weights)[::-1]
    return weights / weights.sum()


def build_demand(t: Topology, pop, total_rate_per_node: float = 1.0,
                 perturb: float = 0.0, seed: int = 0) -> DemandMatrix:
    """Scale the popularity vector per node with multiplicative noise
    ``1 + eps``, ``eps ~ U[-perturb, perturb]``."""
    if not 0.0 <= perturb < 1.0:
        raise ValueError("perturb must lie in [0, 1)")
    pop = np.asarray(pop, dtype=np.float64)
    rng = np.random.default_rng(seed)
    eps = rng.uniform(-perturb, perturb, size=(t.node_count, pop.size))
    w = total_rate_per_node * pop[None, :] * (1.0 + eps)
    return DemandMatrix(np.clip(w, 0.0, None))


def duo_demand() -> DemandMatrix:
    """Two nodes with identical demand (3, 2, 2, 1) for objects A..D."""
    return DemandMatrix(np.array([[3.0, 2.0, 2.0, 1.0], [3.0, 2.0, 2.0, 1.0]]))


def demand_to_csv(d: DemandMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"o{k}" for k in range(d.object_count)])
    for row in d.w:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def demand_from_csv(text: str) -> DemandMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2:
        raise ValueError("demand CSV needs a header and at least one row")
    header, body = rows[0], [r for r in rows[1:] if r]
    w = np.array([[float(v) for v in r] for r in body])
    if w.shape[1] != len(header):
        raise ValueError("row width does not match header")
    return DemandMatrix(w)
