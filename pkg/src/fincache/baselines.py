"""Non-negotiating baselines (per-node LRU, nearby search) and the
traffic metrics used to compare them with negotiated placements."""
from __future__ import annotations

import csv
import io
import itertools
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .demand import DemandMatrix
from .game import (CachingStrategy, GameInstance, best_retrieval, greedy_placement,
                   utilities)
from .topology import Topology, diameter

__all__ = [
    "DEFAULT_STREAM_LENGTH",
    "RequestStream",
    "LRUResult",
    "MetricsReport",
    "generate_stream",
    "run_lru",
    "run_ns",
    "greedy_tie_placements",
    "expected_greedy_total",
    "served_mass",
    "byte_hitrate",
    "stream_byte_hitrate",
    "footprint_reduction",
    "content_overlap",
    "distance_histogram",
    "evaluate_strategy",
    "evaluate_lru",
    "RESULT_COLUMNS",
    "results_csv",
]

DEFAULT_STREAM_LENGTH = 100_000


@dataclass(frozen=True)
class RequestStream:
    """Ordered ``(node, object)`` request events."""

    nodes: np.ndarray
    objects: np.ndarray
    seed: int

    @property
    def total_count(self) -> int:
        return int(self.nodes.size)

    def __iter__(self):
        return zip(self.nodes.tolist(), self.objects.tolist())


def generate_stream(demand: DemandMatrix, total_count: int = DEFAULT_STREAM_LENGTH,
                    seed: int = 0) -> RequestStream:
    """Draw i.i.d. requests: the node with probability proportional to its
    total rate, then the object proportional to that node's row."""
    if total_count < 0:
        raise ValueError("total_count must be non-negative")
    w = demand.w
    rng = np.random.default_rng(seed)
    rates = w.sum(axis=1)
    nodes = rng.choice(w.shape[0], size=total_count, p=rates / rates.sum())
    objects = np.empty(total_count, dtype=np.int64)
    for i in np.unique(nodes):
        at = np.flatnonzero(nodes == i)
        objects[at] = rng.choice(w.shape[1], size=at.size, p=w[i] / rates[i])
    return RequestStream(nodes.astype(np.int64), objects, seed)


@dataclass
class LRUResult:
    """Per-node hit counters and the final cache contents (0/1 matrix)."""

    requests: np.ndarray
    hits: np.ndarray
    requested_bytes: np.ndarray
    hit_bytes: np.ndarray
    snapshot: np.ndarray

    @property
    def hitrate(self) -> float:
        total = self.requests.sum()
        return float(self.hits.sum() / total) if total else 0.0


def run_lru(t: Topology, stream: RequestStream, cache_bytes, sizes) -> LRUResult:
    """Independent byte-capacity LRU at every node, no collaboration.

    A miss inserts the object and evicts least recently used entries
    until the cache fits.
    """
    n = t.node_count
    sizes = np.asarray(sizes, dtype=np.float64)
    cap = np.broadcast_to(np.asarray(cache_bytes, dtype=np.float64), (n,))
    if np.any(cap < sizes.max()):
        raise ValueError("cache_bytes must hold at least the largest object")
    caches = [OrderedDict() for _ in range(n)]
    used = np.zeros(n)
    req = np.zeros(n, dtype=np.int64)
    hits = np.zeros(n, dtype=np.int64)
    rbytes = np.zeros(n)
    hbytes = np.zeros(n)
    size_list = sizes.tolist()
    for i, k in stream:
        c = caches[i]
        sz = size_list[k]
        req[i] += 1
        rbytes[i] += sz
        if k in c:
            c.move_to_end(k)
            hits[i] += 1
            hbytes[i] += sz
            continue
        c[k] = None
        used[i] += sz
        while used[i] > cap[i]:
            old, _ = c.popitem(last=False)
            used[i] -= size_list[old]
    snap = np.zeros((n, sizes.size))
    for i, c in enumerate(caches):
        snap[i, list(c)] = 1.0
    return LRUResult(req, hits, rbytes, hbytes, snap)


def run_ns(g: GameInstance, radius: int) -> CachingStrategy:
    """Greedy local placement plus nearest-copy retrieval within ``radius``.

    The returned strategy carries its own retrieval pairs for the given
    radius, independent of the radii stored in ``g``.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    x = greedy_placement(g.weights, g.capacities)
    pairs = g.with_radii(radius).pairs
    return CachingStrategy(x, pairs, best_retrieval(g, x, pairs))


def greedy_tie_placements(weights: np.ndarray, capacity: float) -> list[np.ndarray]:
    """Every top-``capacity`` placement of one node under some tie-break.

    Objects strictly heavier than the boundary weight are always cached;
    the remaining slots go to any subset of the boundary tie group.
    Capacity is rounded down to whole objects.
    """
    w = np.asarray(weights, dtype=np.float64)
    c = int(min(np.floor(capacity), w.size))
    if c == 0:
        return [np.zeros(w.size)]
    cut = np.sort(w)[::-1][c - 1]
    sure = np.flatnonzero(w > cut)
    ties = np.flatnonzero(w == cut)
    out = []
    for pick in itertools.combinations(ties.tolist(), c - sure.size):
        x = np.zeros(w.size)
        x[sure] = 1.0
        x[list(pick)] = 1.0
        out.append(x)
    return out


def expected_greedy_total(g: GameInstance, max_combinations: int = 100_000) -> float:
    """Mean aggregate utility when every node caches its top objects with
    uniformly random tie-breaking and then retrieves optimally from its
    neighbors."""
    options = [greedy_tie_placements(g.weights[i], g.capacities[i]) for i in range(g.node_count)]
    count = int(np.prod([len(o) for o in options]))
    if count > max_combinations:
        raise ValueError(f"{count} tie-break combinations exceed the limit {max_combinations}")
    total = 0.0
    for rows in itertools.product(*options):
        x = np.array(rows)
        total += float(utilities(g, CachingStrategy(x, g.pairs, best_retrieval(g, x))).sum())
    return total / count


def _origin(g: GameInstance, origin_distance: int | None) -> int:
    d = diameter(g.dist)
    if origin_distance is None:
        return d + 1
    if origin_distance < d + 1:
        raise ValueError(f"origin_distance must be at least diameter + 1 = {d + 1}")
    return int(origin_distance)


def served_mass(g: GameInstance, s: CachingStrategy, origin_distance: int | None = None,
                byte_sizes=None) -> np.ndarray:
    """Requested bytes per hop distance; the last bucket is the origin.

    Each request is served locally up to ``min(x, 1)``, then from the
    retrieval sources in order of increasing distance until fully served;
    whatever remains goes to the origin. Bytes are the game weights unless
    ``byte_sizes`` overrides the per-object size.
    """
    origin = _origin(g, origin_distance)
    w = g.weights
    if byte_sizes is not None:
        w = g.demand.w * np.asarray(byte_sizes, dtype=np.float64)[None, :]
    out = np.zeros(origin + 1)
    left = 1.0 - np.clip(s.x, 0.0, 1.0)
    out[0] = float((w * (1.0 - left)).sum())
    if len(s.pairs):
        hops = g.dist[s.pairs[:, 0], s.pairs[:, 1]]
        for p in np.lexsort((s.pairs[:, 1], hops, s.pairs[:, 0])):
            i = s.pairs[p, 0]
            take = np.minimum(np.clip(s.y[p], 0.0, None), left[i])
            left[i] -= take
            out[hops[p]] += float(w[i] @ take)
    out[origin] += float((w * left).sum())
    return out


def distance_histogram(g: GameInstance, s: CachingStrategy, origin_distance: int | None = None,
                       byte_sizes=None) -> np.ndarray:
    """Fraction of requested bytes served at each hop distance (last = origin)."""
    mass = served_mass(g, s, origin_distance, byte_sizes)
    return mass / mass.sum()


def byte_hitrate(g: GameInstance, s: CachingStrategy, byte_sizes=None) -> float:
    """Expected share of requested bytes served inside the network."""
    mass = served_mass(g, s, None, byte_sizes)
    return float(1.0 - mass[-1] / mass.sum())


def stream_byte_hitrate(result: LRUResult) -> float:
    total = result.requested_bytes.sum()
    return float(result.hit_bytes.sum() / total) if total else 0.0


def footprint_reduction(g: GameInstance, s: CachingStrategy, origin_distance: int | None = None,
                        byte_sizes=None) -> float:
    """Relative cut in bytes x hops against fetching everything from the origin."""
    mass = served_mass(g, s, origin_distance, byte_sizes)
    origin = mass.size - 1
    cost = float(mass @ np.arange(origin + 1))
    return float(1.0 - cost / (mass.sum() * origin))


def content_overlap(snapshot: np.ndarray, capacities=None, threshold: float = 0.5) -> float:
    """Mean over node pairs of shared cached objects, as a fraction of the
    smaller cache capacity (in objects)."""
    member = np.asarray(snapshot) >= threshold
    n = member.shape[0]
    if n < 2:
        raise ValueError("overlap needs at least two caches")
    if capacities is None:
        cap = member.sum(axis=1).astype(np.float64)
    else:
        cap = np.broadcast_to(np.asarray(capacities, dtype=np.float64), (n,))
    m = member.astype(np.float64)
    shared = m @ m.T
    iu, ju = np.triu_indices(n, k=1)
    denom = np.minimum(cap[iu], cap[ju])
    vals = np.divide(shared[iu, ju], denom, out=np.zeros(iu.size), where=denom > 0)
    return float(vals.mean())


@dataclass(frozen=True)
class MetricsReport:
    bhr: float
    fpr: float
    overlap: float
    distance_hist: np.ndarray = field(repr=False)

    def row(self) -> dict:
        return {"bhr": self.bhr, "fpr": self.fpr, "overlap": self.overlap}


def evaluate_strategy(g: GameInstance, s: CachingStrategy, origin_distance: int | None = None,
                      byte_sizes=None) -> MetricsReport:
    hist = distance_histogram(g, s, origin_distance, byte_sizes)
    origin = hist.size - 1
    fpr = float(1.0 - (hist @ np.arange(origin + 1)) / origin)
    return MetricsReport(float(1.0 - hist[-1]), fpr,
                         content_overlap(s.x, np.minimum(g.capacities, g.object_count)), hist)


def evaluate_lru(g: GameInstance, result: LRUResult, origin_distance: int | None = None,
                 object_capacity=None) -> MetricsReport:
    """Metrics from a realized stream: hits are local, misses go to the origin."""
    origin = _origin(g, origin_distance)
    bhr = stream_byte_hitrate(result)
    hist = np.zeros(origin + 1)
    hist[0], hist[-1] = bhr, 1.0 - bhr
    # every hit is local, so the footprint cut equals the hit share
    return MetricsReport(bhr, bhr, content_overlap(result.snapshot, object_capacity), hist)


RESULT_COLUMNS = ("topology", "cache_size", "algorithm", "seed", "bhr", "fpr", "overlap")


def results_csv(rows: Iterable[dict], extra: Sequence[str] = ()) -> str:
    """Render result rows sorted by the key columns."""
    cols = list(RESULT_COLUMNS) + [c for c in extra if c not in RESULT_COLUMNS]
    key = lambda r: (str(r["topology"]), float(r["cache_size"]), str(r["algorithm"]), int(r["seed"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in sorted(rows, key=key):
        w.writerow([repr(float(r[c])) if isinstance(r.get(c), (float, np.floating)) else r.get(c, "")
                    for c in cols])
    return buf.getvalue()
