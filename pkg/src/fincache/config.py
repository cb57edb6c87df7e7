"""INI experiment configuration: parsing, validation and instance building."""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .demand import (DEFAULT_OBJECT_SIZE_MB, DEFAULT_WEIBULL_SCALE, DEFAULT_WEIBULL_SHAPE,
                     DemandMatrix, build_demand, duo_demand, weibull_popularity)
from .game import GameInstance, make_game
from .topology import Topology, diameter, gen_ba, gen_er, load_edge_list, shortest_paths

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ValidationResult",
    "parse_config",
    "load_config",
    "validate_config",
    "derive_seed",
    "build_topology",
    "build_instance",
]

GENERATORS = ("er", "ba", "edgelist", "duo")
SOLVERS = ("oracle", "central", "fin")
SCHEDULES = ("diminishing", "constant", "polyak")


class ConfigError(ValueError):
    """Raised with the full list of validation errors."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(errors))


@dataclass(frozen=True)
class ExperimentConfig:
    text: str
    base_dir: Path
    generator: str
    n: int
    p: float | None
    z: float | None
    m: int
    path: Path | None
    label: str
    demand: str
    objects: int
    size_mb: float
    shape: float
    scale: float
    perturb: float
    capacity: float
    radius: int
    discount: str
    serve_once: bool
    eps0: float
    solvers: tuple[str, ...]
    schedule: str
    xi0: float | None
    k_stop: int
    tol: float
    window: int
    gap_tol: float | None
    max_iter: int
    oracle_grid: float
    local_rationality: bool
    growth: bool
    baselines: tuple[str, ...]
    stream_length: int
    origin_distance: int | None
    overhead: bool
    c: float
    r_max: int
    overhead_model: str
    fairness: bool
    trials: int
    seeds: tuple[int, ...]
    out: Path

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=(int(seed),))


@dataclass
class ValidationResult:
    config: ExperimentConfig | None
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _list(raw: str) -> tuple[str, ...]:
    return tuple(s.strip().lower() for s in raw.replace(";", ",").split(",") if s.strip())


class _Reader:
    """Typed lookups that collect errors instead of raising."""

    def __init__(self, cp: configparser.ConfigParser, errors: list[str]):
        self.cp = cp
        self.errors = errors

    def get(self, sec, key, conv, default=None, required=False):
        if not self.cp.has_option(sec, key):
            if required:
                self.errors.append(f"{sec}.{key}: required")
            return default
        raw = self.cp.get(sec, key).strip()
        if raw.lower() in ("", "none", "auto") and not required:
            return None
        try:
            return conv(raw)
        except ValueError as exc:
            self.errors.append(f"{sec}.{key}: invalid value {raw!r} ({exc})")
            return default

    def boolean(self, sec, key, default):
        if not self.cp.has_option(sec, key):
            return default
        try:
            return self.cp.getboolean(sec, key)
        except ValueError:
            self.errors.append(f"{sec}.{key}: expected a boolean")
            return default


def parse_config(text: str, base_dir: Path | str = ".") -> ValidationResult:
    """Parse and check a config document; cross-field checks that need a
    topology are done by :func:`validate_config`."""
    errors: list[str] = []
    warnings: list[str] = []
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        return ValidationResult(None, [f"config: cannot parse ({exc.message})"])
    r = _Reader(cp, errors)
    base_dir = Path(base_dir)

    if not cp.has_section("topology"):
        errors.append("topology: required")
    gen = r.get("topology", "generator", str.lower, "er", required=cp.has_section("topology"))
    if gen not in GENERATORS:
        errors.append(f"topology.generator: must be one of {', '.join(GENERATORS)}")
    n = r.get("topology", "n", int, 0, required=gen in ("er", "ba"))
    p = r.get("topology", "p", float)
    z = r.get("topology", "z", float)
    m = r.get("topology", "m", int, 2)
    path = r.get("topology", "path", str, required=gen == "edgelist")
    if gen in ("er", "ba") and n is not None and n < 2:
        errors.append("topology.n: must be >= 2")
    if gen == "er":
        if (p is None) == (z is None):
            errors.append("topology.p: give exactly one of p or z for the er generator")
        elif p is not None and not 0 <= p <= 1:
            errors.append("topology.p: must lie in [0, 1]")
        elif z is not None and (z < 0 or (n and z > n - 1)):
            errors.append("topology.z: mean degree must lie in [0, n - 1]")
    if gen == "ba" and m is not None and n is not None and not 1 <= m < n:
        errors.append("topology.m: must satisfy 1 <= m < n")
    if path is not None:
        path = (base_dir / path).resolve()
        if not path.is_file():
            errors.append(f"topology.path: file not found: {path}")
    label = r.get("topology", "label", str) or gen

    demand = r.get("catalog", "demand", str.lower, "weibull")
    if demand not in ("weibull", "duo"):
        errors.append("catalog.demand: must be weibull or duo")
    objects = r.get("catalog", "objects", int, 4 if demand == "duo" else 100)
    if objects is not None and objects < 1:
        errors.append("catalog.objects: must be >= 1")
    size_mb = r.get("catalog", "size_mb", float, DEFAULT_OBJECT_SIZE_MB)
    shape = r.get("catalog", "weibull_shape", float, DEFAULT_WEIBULL_SHAPE)
    scale = r.get("catalog", "weibull_scale", float, DEFAULT_WEIBULL_SCALE)
    perturb = r.get("catalog", "perturb", float, 0.0)
    for key, val in (("size_mb", size_mb), ("weibull_shape", shape), ("weibull_scale", scale)):
        if val is not None and val <= 0:
            errors.append(f"catalog.{key}: must be positive")
    if perturb is not None and not 0 <= perturb < 1:
        errors.append("catalog.perturb: must lie in [0, 1)")
    if demand == "duo" and gen != "duo":
        errors.append("catalog.demand: duo demand needs the duo topology")

    capacity = r.get("game", "capacity", float, 1.0)
    if capacity is not None and capacity < 0:
        errors.append("game.capacity: must be non-negative")
    elif capacity is not None and objects and capacity > objects:
        warnings.append(f"game.capacity: {capacity:g} exceeds the catalog size {objects}")
    radius = r.get("game", "radius", int, 1)
    if radius is not None and radius < 0:
        errors.append("game.radius: must be non-negative")
    discount = r.get("game", "discount", str.lower, "hop")
    if discount not in ("hop", "unit"):
        errors.append("game.discount: must be hop or unit")
    serve_once = r.boolean("game", "serve_once", True)
    eps0 = r.get("game", "eps0", float, 1e-6)

    solvers = _list(r.get("solver", "kinds", str, "central") or "")
    for s in solvers:
        if s not in SOLVERS:
            errors.append(f"solver.kinds: unknown solver {s!r}")
    schedule = r.get("solver", "schedule", str.lower, "polyak")
    if schedule not in SCHEDULES:
        errors.append(f"solver.schedule: must be one of {', '.join(SCHEDULES)}")
    xi0 = r.get("solver", "xi0", float)
    if xi0 is not None and xi0 <= 0:
        errors.append("solver.xi0: must be positive")
    k_stop = r.get("solver", "k_stop", int, 500)
    if k_stop is not None and k_stop < 1:
        errors.append("solver.k_stop: must be >= 1")
    tol = r.get("solver", "tol", float, 1e-6)
    window = r.get("solver", "window", int, 50)
    gap_tol = r.get("solver", "gap_tol", float)
    max_iter = r.get("solver", "max_iter", int, 200)
    grid = r.get("solver", "oracle_grid", float, 1.0)
    if grid not in (1.0, 0.5, 0.25):
        errors.append("solver.oracle_grid: must be 1, 0.5 or 0.25")
    local_rat = r.boolean("solver", "local_rationality", True)
    growth = r.boolean("solver", "growth", False)

    baselines = _list(r.get("baselines", "algorithms", str, "") or "")
    for b in baselines:
        if not (b in ("lru", "greedy") or (b.startswith("ns") and b[2:].isdigit())):
            errors.append(f"baselines.algorithms: unknown baseline {b!r}")
    stream_length = r.get("baselines", "stream_length", int, 100_000)
    origin = r.get("baselines", "origin_distance", int)

    overhead = r.boolean("overhead", "enabled", cp.has_section("overhead"))
    c = r.get("overhead", "c", float, 1.0)
    if c is not None and c <= 0:
        errors.append("overhead.c: must be positive")
    r_max = r.get("overhead", "r_max", int, 3)
    model = r.get("overhead", "model", str.lower, "degrees")
    if model not in ("degrees", "poisson"):
        errors.append("overhead.model: must be degrees or poisson")
    elif model == "poisson" and gen != "er":
        errors.append("overhead.model: poisson needs the er generator")
    if r_max is not None and r_max < 1:
        errors.append("overhead.r_max: must be >= 1")

    fairness = r.boolean("fairness", "enabled", cp.has_section("fairness"))
    trials = r.get("fairness", "trials", int, 500)

    seeds_raw = r.get("run", "seeds", str, "0") or ""
    seeds: tuple[int, ...] = ()
    try:
        seeds = tuple(_expand_seeds(seeds_raw))
    except ValueError:
        errors.append(f"run.seeds: cannot parse {seeds_raw!r}")
    if not seeds and not any(e.startswith("run.seeds") for e in errors):
        errors.append("run.seeds: seed list must not be empty")
    out = Path(r.get("run", "out", str, "out") or "out")

    if errors:
        return ValidationResult(None, errors, warnings)
    cfg = ExperimentConfig(
        text=text, base_dir=base_dir, generator=gen, n=n or 0, p=p, z=z, m=m, path=path,
        label=label, demand=demand, objects=objects, size_mb=size_mb, shape=shape, scale=scale,
        perturb=perturb, capacity=capacity, radius=radius, discount=discount,
        serve_once=serve_once, eps0=eps0, solvers=solvers, schedule=schedule, xi0=xi0,
        k_stop=k_stop, tol=tol, window=window, gap_tol=gap_tol, max_iter=max_iter,
        oracle_grid=grid, local_rationality=local_rat, growth=growth, baselines=baselines,
        stream_length=stream_length, origin_distance=origin, overhead=overhead, c=c,
        r_max=r_max, overhead_model=model, fairness=fairness, trials=trials, seeds=seeds, out=out)
    return ValidationResult(cfg, errors, warnings)


def _expand_seeds(raw: str) -> list[int]:
    """``"0,1,5"`` or ranges ``"0-9"``."""
    out: list[int] = []
    for part in _list(raw):
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def load_config(path: Path | str) -> ValidationResult:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        return ValidationResult(None, [f"config: cannot read {path} ({exc.strerror})"])
    return parse_config(text, path.parent)


def derive_seed(seed: int, stream: str) -> int:
    """Independent sub-seed for one random component of a run."""
    tag = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def build_topology(cfg: ExperimentConfig, seed: int) -> Topology:
    if cfg.generator == "duo":
        return Topology(2, np.array([[0, 1]]))
    if cfg.generator == "edgelist":
        return load_edge_list(Path(cfg.path).read_text())
    tseed = derive_seed(seed, "topology")
    if cfg.generator == "ba":
        return gen_ba(cfg.n, cfg.m, tseed)
    p = cfg.p if cfg.p is not None else cfg.z / (cfg.n - 1)
    return gen_er(cfg.n, p, tseed)


def build_demand_for(cfg: ExperimentConfig, t: Topology, seed: int) -> DemandMatrix:
    if cfg.demand == "duo":
        return duo_demand()
    pop = weibull_popularity(cfg.objects, cfg.shape, cfg.scale)
    return build_demand(t, pop, perturb=cfg.perturb, seed=derive_seed(seed, "demand"))


def validate_config(cfg_or_result, seeds=None) -> ValidationResult:
    """Cross-field checks that need the generated topology.

    A radius beyond the diameter is clamped with a warning.
    """
    res = cfg_or_result if isinstance(cfg_or_result, ValidationResult) else ValidationResult(cfg_or_result)
    cfg = res.config
    if cfg is None:
        return res
    seeds = cfg.seeds if seeds is None else seeds
    for seed in seeds:
        try:
            t = build_topology(cfg, seed)
        except (ValueError, OSError) as exc:
            res.errors.append(f"topology: cannot build for seed {seed} ({exc})")
            continue
        d = diameter(shortest_paths(t))
        if cfg.radius > d:
            res.warnings.append(f"game.radius: {cfg.radius} exceeds the diameter {d} "
                                f"for seed {seed}; clamped")
    if res.errors:
        res.config = None
    return res


def build_instance(cfg: ExperimentConfig, seed: int) -> tuple[Topology, GameInstance]:
    """Topology and game for one seed; the radius is clamped to the diameter."""
    t = build_topology(cfg, seed)
    dist = shortest_paths(t)
    d = build_demand_for(cfg, t, seed)
    radius = min(cfg.radius, max(diameter(dist), 1 if cfg.radius else 0))
    cap = min(cfg.capacity, float(d.object_count))
    g = make_game(t, d, cap, radius, discount=cfg.discount, serve_once=cfg.serve_once,
                  eps0=cfg.eps0, dist=dist)
    return t, g
