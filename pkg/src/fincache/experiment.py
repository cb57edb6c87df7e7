"""Per-seed experiment pipeline and report writing."""
from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baselines import (evaluate_lru, evaluate_strategy, expected_greedy_total, generate_stream,
                        results_csv, run_lru, run_ns)
from .central import brute_force_max_total, brute_force_nbs, solve_central
from .config import ExperimentConfig, build_instance, derive_seed
from .fairness import fairness_report
from .fin import StepSchedule, run_fin, run_fin_growth
from .game import (CachingStrategy, GameInstance, NegotiationBreakdown, disagreement_strategy,
                   nash_log_objective, utilities)
from .overhead import OverheadParams, growth_law, poisson_moment, system_overhead
from .topology import DegreeStats, degree_stats, diameter, to_edge_list

__all__ = ["SeedOutput", "run_seed", "run_experiment", "write_json", "strategy_to_json"]

log = logging.getLogger(__name__)

EXTRA_COLUMNS = ("utility_total", "nash_log", "converged")


class SolverFailure(RuntimeError):
    """A solver stopped without converging or the bargaining broke down."""


@dataclass
class SeedOutput:
    seed: int
    rows: list[dict] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)
    fairness: dict | None = None
    overhead: dict | None = None
    failures: list[str] = field(default_factory=list)


def strategy_to_json(s: CachingStrategy) -> dict:
    return {"x": s.x.tolist(), "pairs": s.pairs.tolist(), "y": s.y.tolist()}


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path: Path, obj) -> None:
    path.write_text(_dumps(obj))


def _row(cfg: ExperimentConfig, seed: int, algo: str, g: GameInstance, s: CachingStrategy,
         converged=True) -> dict:
    m = evaluate_strategy(g, s, cfg.origin_distance)
    U = utilities(g, s)
    try:
        nl = nash_log_objective(g, s)
    except NegotiationBreakdown:
        nl = float("-inf")
    return {"topology": cfg.label, "cache_size": float(cfg.capacity), "algorithm": algo,
            "seed": seed, "bhr": m.bhr, "fpr": m.fpr, "overlap": m.overlap,
            "utility_total": float(U.sum()), "nash_log": float(nl), "converged": int(bool(converged))}


def _schedule(cfg: ExperimentConfig) -> StepSchedule:
    return StepSchedule(cfg.schedule, cfg.xi0)


def run_seed(cfg: ExperimentConfig, seed: int, parts=None) -> SeedOutput:
    """Run the parts of the pipeline named in ``parts`` for one seed.

    ``parts`` defaults to everything the config enables: ``solvers``,
    ``baselines``, ``fairness`` and ``overhead``. Solver failures are
    recorded and do not stop the remaining parts.
    """
    parts = set(parts or ("solvers", "baselines", "fairness", "overhead"))
    out = SeedOutput(seed)
    t, g = build_instance(cfg, seed)
    out.files[f"topology_seed{seed}.txt"] = to_edge_list(t)
    reference: CachingStrategy | None = None
    fin_messages = None

    if "solvers" in parts or "fairness" in parts:
        for kind in cfg.solvers:
            try:
                if kind == "oracle":
                    nbs = brute_force_nbs(g, cfg.oracle_grid, cfg.local_rationality)
                    glob = brute_force_max_total(g, cfg.oracle_grid)
                    out.rows.append(_row(cfg, seed, "nbs_oracle", g, nbs.strategy))
                    out.rows.append(_row(cfg, seed, "global_oracle", g, glob.strategy))
                    expected = expected_greedy_total(g)
                    out.rows.append({**_row(cfg, seed, "greedy_expected", g, run_ns(g, g.radii.max())),
                                     "utility_total": expected})
                    reference = reference or nbs.strategy
                elif kind == "central":
                    rep = solve_central(g, max_iter=cfg.max_iter)
                    out.rows.append(_row(cfg, seed, "central", g, rep.strategy, rep.converged))
                    out.files[f"central_seed{seed}.json"] = _dumps(rep.as_dict())
                    if not rep.converged:
                        raise SolverFailure(f"central solver did not converge in {rep.iterations} iterations")
                    reference = rep.strategy
                elif kind == "fin":
                    if cfg.growth:
                        stages = run_fin_growth(g, _schedule(cfg), cfg.k_stop, cfg.tol,
                                                window=cfg.window, gap_tol=cfg.gap_tol)
                        res = stages[-1].result
                        g_fin = g.with_radii(stages[-1].radii)
                    else:
                        res = run_fin(g, _schedule(cfg), cfg.k_stop, cfg.tol, window=cfg.window,
                                      gap_tol=cfg.gap_tol)
                        g_fin = g
                    out.rows.append(_row(cfg, seed, "fin", g_fin, res.strategy, res.converged))
                    out.files[f"fin_trace_seed{seed}.csv"] = res.trace.to_csv()
                    out.files[f"fin_seed{seed}.json"] = _dumps(
                        {"objective": res.objective, "converged": res.converged,
                         "iterations": len(res.trace.records),
                         "best_dual": res.state.best_dual,
                         "messages": res.trace.total_messages,
                         **strategy_to_json(res.strategy)})
                    fin_messages = (len(res.trace.records), res.trace.total_messages)
                    if reference is None and not cfg.growth:
                        reference = res.strategy
            except NegotiationBreakdown as exc:
                # no agreement: every node keeps its disagreement outcome
                if kind in ("central", "fin"):
                    out.rows.append(_row(cfg, seed, kind, g, disagreement_strategy(g), False))
                out.failures.append(f"seed {seed}: {kind}: {exc}")
                log.warning("seed %d: %s failed: %s", seed, kind, exc)
            except SolverFailure as exc:
                out.failures.append(f"seed {seed}: {kind}: {exc}")
                log.warning("seed %d: %s failed: %s", seed, kind, exc)

    if "baselines" in parts:
        for b in cfg.baselines:
            if b == "lru":
                sizes = np.full(g.object_count, cfg.size_mb)
                stream = generate_stream(g.demand, cfg.stream_length, derive_seed(seed, "stream"))
                res = run_lru(t, stream, max(cfg.capacity, 1.0) * cfg.size_mb, sizes)
                m = evaluate_lru(g, res, cfg.origin_distance, np.minimum(g.capacities, g.object_count))
                out.rows.append({"topology": cfg.label, "cache_size": float(cfg.capacity),
                                 "algorithm": "lru", "seed": seed, "bhr": m.bhr, "fpr": m.fpr,
                                 "overlap": m.overlap, "utility_total": "", "nash_log": "",
                                 "converged": 1})
            else:
                radius = 0 if b == "greedy" else int(b[2:])
                out.rows.append(_row(cfg, seed, b, g, run_ns(g, radius)))

    if "fairness" in parts and cfg.fairness and reference is not None:
        try:
            out.fairness = fairness_report(g, reference, trials=cfg.trials,
                                           seed=derive_seed(seed, "fairness")).as_dict()
        except NegotiationBreakdown as exc:
            out.failures.append(f"seed {seed}: fairness: {exc}")

    if "overhead" in parts and cfg.overhead:
        p = OverheadParams(cfg.c, g.object_count)
        r_max = max(1, min(cfg.r_max, diameter(g.dist)))
        stats = degree_stats(t, g.dist, r_max)
        if cfg.overhead_model == "poisson":
            # moments of the generating distribution instead of the sample
            z = cfg.z if cfg.z is not None else cfg.p * (t.node_count - 1)
            stats = DegreeStats(z, poisson_moment(z, 2), stats.z_ring)
        info = {"theta": p.theta, "system_overhead": system_overhead(p, g.neighborhoods),
                "z1": stats.z1, "z2": stats.z2}
        if stats.z1 > 0:
            law = growth_law(p, stats, t.node_count, r_max)
            out.files[f"growth_law_seed{seed}.csv"] = law.to_csv()
            info["ratio"] = law.ratio
            info["diverging"] = law.diverging
        if fin_messages is not None:
            iters, total = fin_messages
            info["fin_iterations"] = iters
            info["fin_messages"] = total
            info["messages_match"] = total == iters * info["system_overhead"]
        out.overhead = info
    return out


def _run_one(args):
    cfg, seed, parts = args
    try:
        return run_seed(cfg, seed, parts)
    except Exception as exc:  # isolate unexpected per-seed failures
        out = SeedOutput(seed)
        out.failures.append(f"seed {seed}: {type(exc).__name__}: {exc}")
        return out


def run_experiment(cfg: ExperimentConfig, out_dir: Path | str, threads: int = 1,
                   parts=None) -> tuple[dict, list[str]]:
    """Run every seed, write the report bundle and return ``(manifest, failures)``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, s, parts) for s in cfg.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(_run_one, jobs))
    else:
        outputs = [_run_one(j) for j in jobs]
    outputs.sort(key=lambda o: o.seed)

    written: dict[str, str] = {}

    def emit(name: str, text: str):
        (out_dir / name).write_text(text)
        written[name] = hashlib.sha256(text.encode()).hexdigest()

    rows = [r for o in outputs for r in o.rows]
    emit("results.csv", results_csv(rows, EXTRA_COLUMNS))
    for o in outputs:
        for name, text in sorted(o.files.items()):
            emit(name, text)
    if any(o.fairness is not None for o in outputs):
        emit("fairness.json", _dumps({str(o.seed): o.fairness for o in outputs}))
    if any(o.overhead is not None for o in outputs):
        emit("overhead.json", _dumps({str(o.seed): o.overhead for o in outputs}))
    failures = [f for o in outputs for f in o.failures]
    manifest = {
        "config_sha256": cfg.sha256,
        "config": cfg.text,
        "seeds": list(cfg.seeds),
        "derived_seeds": {str(s): {k: derive_seed(s, k) for k in
                                   ("topology", "demand", "stream", "fairness")} for s in cfg.seeds},
        "versions": {"fincache": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": written,
        "failures": failures,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out_dir / "manifest.json").write_text(_dumps(manifest))
    return manifest, failures
