"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration, 2 a solver did not
converge or the bargaining broke down for some seed.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .config import ExperimentConfig, load_config, validate_config
from .experiment import run_experiment

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2

log = logging.getLogger("fincache")

_PARTS = {
    "gen-topology": (),
    "solve-central": ("solvers",),
    "solve-fin": ("solvers",),
    "baseline": ("baselines",),
    "overhead": ("overhead",),
    "fairness": ("fairness",),
    "run": None,
}


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``duo.cfg`` and so on)."""
    return Path(str(resources.files("fincache") / "data" / name))


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH",
                        help="INI config; 'bundled:NAME' selects a packaged one")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--out", metavar="DIR", help="output directory (default: run.out, relative to the working directory)")
    common.add_argument("--threads", type=int, default=1, help="worker processes over seeds")
    common.add_argument("--quiet", action="store_true", help="only report errors")
    ap = argparse.ArgumentParser(prog="fincache", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "gen-topology": "write the generated topology as an edge list",
        "solve-central": "solve the bargaining program centrally",
        "solve-fin": "run the distributed dual-decomposition solver",
        "baseline": "evaluate LRU and nearby-search baselines",
        "overhead": "collaboration overhead and growth-law tables",
        "fairness": "fairness checks on the solver output",
        "run": "full pipeline with results, traces and manifest",
        "validate": "check a config and report errors and warnings",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return ap


def _load(source: str):
    if source.startswith("bundled:"):
        return load_config(bundled_config(source.split(":", 1)[1]))
    return load_config(source)


def _restrict(cfg: ExperimentConfig, command: str) -> ExperimentConfig:
    if command == "solve-central":
        return replace(cfg, solvers=("central",))
    if command == "solve-fin":
        return replace(cfg, solvers=("fin",))
    if command == "fairness":
        return replace(cfg, fairness=True, solvers=cfg.solvers or ("central",))
    if command == "overhead":
        return replace(cfg, overhead=True)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    res = _load(args.config)
    if res.config is not None and args.seed is not None:
        res.config = res.config.with_seed(args.seed)
    res = validate_config(res)
    for w in res.warnings:
        log.warning("%s", w)
    if not res.ok:
        for e in res.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    cfg = res.config
    if args.command == "validate":
        if not args.quiet:
            print(f"ok: {len(cfg.seeds)} seed(s), config sha256 {cfg.sha256[:12]}")
        return EXIT_OK

    out_dir = Path(args.out) if args.out else cfg.out
    cfg = _restrict(cfg, args.command)
    manifest, failures = run_experiment(cfg, out_dir, max(1, args.threads), _PARTS[args.command])
    for f in failures:
        log.error("%s", f)
    if not args.quiet:
        for name in manifest["outputs"]:
            print(out_dir / name)
    return EXIT_SOLVER if failures else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
