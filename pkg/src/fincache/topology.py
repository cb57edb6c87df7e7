"""Network graphs: generators, edge-list ingestion, hop distances,
radius-defined neighborhoods and degree statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

__all__ = [
    "UNREACHABLE",
    "EdgeListError",
    "Topology",
    "Neighborhood",
    "DegreeStats",
    "gen_er",
    "gen_ba",
    "load_edge_list",
    "to_edge_list",
    "shortest_paths",
    "neighborhoods",
    "degree_stats",
    "diameter",
]

#: Marker stored in distance matrices for node pairs in different components.
UNREACHABLE = -1


class EdgeListError(ValueError):
    """Raised when an edge-list document cannot be parsed."""

    def __init__(self, lineno: int, line: str, reason: str):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno
        self.line = line


@dataclass(frozen=True, eq=False)
class Topology:
    """Undirected simple graph on nodes ``0..node_count-1``.

    ``edges`` is an ``(E, 2)`` integer array with ``u < v`` in every row,
    sorted lexicographically. ``labels`` keeps the original node names
    when the graph was read from a file.
    """

    node_count: int
    edges: np.ndarray
    labels: tuple[str, ...] | None = None
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be positive")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            if edges.min() < 0 or edges.max() >= self.node_count:
                raise ValueError("edge endpoint out of range")
        edges = np.sort(edges, axis=1)
        edges = np.unique(edges, axis=0) if edges.size else edges
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> tuple[np.ndarray, ...]:
        nbrs: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v in self.edges.tolist():
            nbrs[u].append(v)
            nbrs[v].append(u)
        return tuple(np.array(sorted(a), dtype=np.int64) for a in nbrs)

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.bincount(self.edges.ravel(), minlength=self.node_count)
        return deg.astype(np.int64)

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return (self.node_count == other.node_count
                and np.array_equal(self.edges, other.edges))

    __hash__ = None


@dataclass(frozen=True)
class Neighborhood:
    """Nodes within ``radius`` hops of ``center`` (``members``) and the
    nodes whose own neighborhood contains ``center`` (``co_members``)."""

    center: int
    radius: int
    members: frozenset[int]
    co_members: frozenset[int]


@dataclass(frozen=True)
class DegreeStats:
    """First two degree moments and empirical ring sizes.

    ``z_ring[r]`` is the average number of nodes at exactly ``r`` hops;
    ``z_ring[0] == 1`` (the node itself).
    """

    mean_k: float
    mean_k2: float
    z_ring: np.ndarray

    @property
    def z1(self) -> float:
        return self.mean_k

    @property
    def z2(self) -> float:
        return self.mean_k2 - self.mean_k


def gen_er(n: int, p: float, seed: int) -> Topology:
    """Erdős–Rényi G(n, p): every unordered pair is an edge independently
    with probability ``p``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return Topology(n, np.column_stack([iu[keep], ju[keep]]))


def gen_ba(n: int, m: int, seed: int) -> Topology:
    """Barabási–Albert preferential attachment.

    Starts from a complete graph on ``m + 1`` nodes; every later node
    attaches to ``m`` distinct existing nodes chosen with probability
    proportional to their current degree.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if n <= m:
        raise ValueError(f"need n > m, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    core = m + 1
    iu, ju = np.triu_indices(core, k=1)
    edges = list(zip(iu.tolist(), ju.tolist()))
    deg = np.zeros(n, dtype=np.float64)
    deg[:core] = m
    for v in range(core, n):
        prob = deg[:v] / deg[:v].sum()
        targets = rng.choice(v, size=m, replace=False, p=prob)
        for t in sorted(targets.tolist()):
            edges.append((t, v))
        deg[targets] += 1
        deg[v] = m
    return Topology(n, np.array(edges, dtype=np.int64))


def load_edge_list(text: str) -> Topology:
    """Parse a whitespace-separated edge list.

    Blank lines and lines starting with ``#`` are skipped. Labels are
    remapped to dense ids in order of first appearance. Self-loops and
    repeated edges are dropped; each drop is recorded in ``warnings``.
    """
    index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    warnings: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise EdgeListError(lineno, raw, "expected two node labels")
        ids = []
        for label in parts:
            if label not in index:
                index[label] = len(index)
            ids.append(index[label])
        u, v = ids
        if u == v:
            warnings.append(f"line {lineno}: self-loop on {parts[0]!r} dropped")
            continue
        key = (min(u, v), max(u, v))
        if key in seen:
            warnings.append(f"line {lineno}: duplicate edge {parts[0]}-{parts[1]} dropped")
            continue
        seen.add(key)
        edges.append(key)
    if not index:
        raise EdgeListError(0, "", "document contains no edges")
    return Topology(len(index), np.array(edges, dtype=np.int64).reshape(-1, 2),
                    labels=tuple(index), warnings=tuple(warnings))


def to_edge_list(t: Topology) -> str:
    names = t.labels if t.labels is not None else [str(i) for i in range(t.node_count)]
    lines = [f"# nodes={t.node_count} edges={t.edge_count}"]
    lines += [f"{names[u]} {names[v]}" for u, v in t.edges.tolist()]
    return "\n".join(lines) + "\n"


def shortest_paths(t: Topology) -> np.ndarray:
    """All-pairs hop distances; ``UNREACHABLE`` across components."""
    n = t.node_count
    if t.edge_count == 0:
        dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
        np.fill_diagonal(dist, 0)
        return dist
    u, v = t.edges[:, 0], t.edges[:, 1]
    adj = coo_matrix((np.ones(len(u)), (u, v)), shape=(n, n)).tocsr()
    raw = shortest_path(adj, method="D", directed=False, unweighted=True)
    dist = np.where(np.isinf(raw), UNREACHABLE, raw).astype(np.int64)
    dist.setflags(write=False)
    return dist


def diameter(dist: np.ndarray) -> int:
    """Largest finite hop distance."""
    return int(dist.max()) if dist.size else 0


def neighborhoods(t: Topology, dist: np.ndarray, radii) -> list[Neighborhood]:
    """Per-node neighborhoods for the given search radii."""
    n = t.node_count
    radii = np.broadcast_to(np.asarray(radii, dtype=np.int64), (n,))
    if np.any(radii < 0):
        raise ValueError("radii must be non-negative")
    member = (dist >= 1) & (dist <= radii[:, None])
    members = [frozenset(np.flatnonzero(member[i]).tolist()) for i in range(n)]
    co = [frozenset(np.flatnonzero(member[:, i]).tolist()) for i in range(n)]
    return [Neighborhood(i, int(radii[i]), members[i], co[i]) for i in range(n)]


def degree_stats(t: Topology, dist: np.ndarray, r_max: int) -> DegreeStats:
    """Degree moments and empirical average ring sizes up to ``r_max``."""
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    k = t.degrees.astype(np.float64)
    counts = np.array([(dist == r).sum() for r in range(r_max + 1)], dtype=np.float64)
    return DegreeStats(float(k.mean()), float((k ** 2).mean()), counts / t.node_count)
