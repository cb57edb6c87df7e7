"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is echoed in the terminal summary.
"""
import csv
import io
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_game, record_criterion
from fincache.baselines import expected_greedy_total
from fincache.central import brute_force_max_total, brute_force_nbs, grid_gap_bound, solve_central
from fincache.config import parse_config
from fincache.demand import DemandMatrix, build_demand, weibull_popularity
from fincache.experiment import run_experiment
from fincache.fairness import check_pf, scale_invariance_gap
from fincache.fin import StepSchedule, messages_per_iteration, run_fin
from fincache.game import NegotiationBreakdown, duo_game, make_game, utilities
from fincache.overhead import (OverheadParams, analytic_zr, er_overhead, node_overhead,
                               poisson_moment, system_overhead)
from fincache.topology import Topology, degree_stats, gen_ba, gen_er, neighborhoods, shortest_paths

TABLE1_FIXTURES = Path(__file__).parent / "fixtures" / "rocketfuel"


def _random_instances(count, seed=2024, n_max=10, k_max=20):
    """Random solvable games with ``2 <= |V| <= n_max`` and ``2 <= |O| <= k_max``."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(2, n_max + 1))
        K = int(rng.integers(2, k_max + 1))
        t = gen_er(n, 0.5, int(rng.integers(1 << 30)))
        d = build_demand(t, weibull_popularity(K, scale=5.0), perturb=0.5,
                         seed=int(rng.integers(1 << 30)))
        g = make_game(t, d, int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        try:
            ref = solve_central(g)
        except NegotiationBreakdown:
            continue
        out.append((g, ref))
    return out


def test_criterion_01_duo_reproduction():
    start = time.perf_counter()
    g = duo_game("unit")
    greedy = expected_greedy_total(g)
    glob = brute_force_max_total(g, 1.0).total
    fair = brute_force_nbs(g, 1.0, require_local_rationality=True).total
    elapsed = time.perf_counter() - start
    ok = (greedy, glob, fair) == (12, 16, 14) and elapsed < 1.0
    record_criterion(1, ok, f"greedy={greedy:g} global={glob:g} nash={fair:g} in {elapsed:.2f}s")
    assert ok


def test_criterion_02_duality_gap():
    start = time.perf_counter()
    errors = []
    for g, ref in _random_instances(20):
        try:
            res = run_fin(g, StepSchedule("diminishing"), 2000, tol=-1.0, window=10 ** 9,
                          gap_tol=1e-4)
            errors.append(ref.objective - res.objective)
        except NegotiationBreakdown:
            errors.append(np.inf)
    elapsed = time.perf_counter() - start
    errors = np.array(errors)
    within = int((np.abs(errors) <= 1e-2).sum())
    ok = within == len(errors) and elapsed < 120
    record_criterion(2, ok, f"{within}/{len(errors)} instances within 1e-2, "
                            f"worst error {np.max(np.abs(errors)):.3g}, {elapsed:.0f}s")
    assert ok


def test_criterion_03_kkt_certificate():
    worst_stat = worst_slack = 0.0
    solved = 0
    rng = np.random.default_rng(3)
    for seed in range(30):
        g = random_game(seed, n=int(rng.integers(2, 7)), K=int(rng.integers(2, 9)),
                        capacity=int(rng.integers(1, 4)), radius=int(rng.integers(1, 3)))
        try:
            rep = solve_central(g)
        except NegotiationBreakdown:
            continue
        if not rep.converged:
            continue
        solved += 1
        worst_stat = max(worst_stat, rep.kkt.stationarity_residual)
        worst_slack = max(worst_slack, rep.kkt.slackness_residual)
    ok = solved >= 20 and worst_stat <= 1e-5 and worst_slack <= 1e-5
    record_criterion(3, ok, f"{solved} converged solves, stationarity {worst_stat:.2e}, "
                            f"slackness {worst_slack:.2e}")
    assert ok


def _tiny_instances():
    rng = np.random.default_rng(4)
    for n in (1, 2):
        t = Topology(n, np.array([[0, 1]]) if n == 2 else np.zeros((0, 2)))
        for K in (1, 2, 3):
            for cap in range(1, K + 1):
                for discount in ("unit", "hop"):
                    for _ in range(2):
                        w = rng.random((n, K))
                        yield make_game(t, DemandMatrix(w), cap, 1, discount=discount)


def test_criterion_04_oracle_equivalence():
    worst = -np.inf
    count = 0
    for g in _tiny_instances():
        count += 1
        orc = brute_force_nbs(g, 0.25).objective
        try:
            rep = solve_central(g)
        except NegotiationBreakdown:
            worst = max(worst, 0.0 if orc == -np.inf else np.inf)
            continue
        bound = grid_gap_bound(g, rep.strategy, 0.25)
        # solver must dominate the grid and the grid must come within its gap bound
        excess = max(orc - rep.objective - 1e-3, rep.objective - orc - bound - 1e-3)
        worst = max(worst, excess)
    ok = worst <= 0
    record_criterion(4, ok, f"{count} instances, worst excess over tolerance {worst:.2e}")
    assert ok


def test_criterion_05_overhead_exactness():
    mismatches = 0
    rng = np.random.default_rng(5)
    for seed in range(100):
        n = int(rng.integers(3, 30))
        t = gen_ba(n, 1 + seed % 2, seed) if seed % 2 else gen_er(n, 0.2, seed)
        radii = rng.integers(0, 4, size=n)
        p = OverheadParams(int(rng.integers(1, 4)), int(rng.integers(1, 50)))
        nbs = neighborhoods(t, shortest_paths(t), radii)
        phi = system_overhead(p, nbs)
        mismatches += phi != sum(node_overhead(p, len(b.members), len(b.co_members)) for b in nbs)
    for seed in range(5):
        g = random_game(seed, n=5, K=4, capacity=2, radius=1 + seed % 2)
        res = run_fin(g, StepSchedule("polyak"), 25, tol=-1.0, window=10 ** 9)
        per_iter = system_overhead(OverheadParams(1, g.object_count), g.neighborhoods)
        mismatches += per_iter != messages_per_iteration(g)
        mismatches += res.trace.total_messages != len(res.trace.records) * per_iter
    ok = mismatches == 0
    record_criterion(5, ok, f"{mismatches} mismatches over 100 graphs and 5 FIN runs")
    assert ok


def test_criterion_06_growth_law():
    worst_ring = 0.0
    for z in (3.0, 4.0, 6.0):
        t = gen_er(2000, z / 1999, int(z))
        stats = degree_stats(t, shortest_paths(t), 2)
        for r in (1, 2):
            worst_ring = max(worst_ring, abs(analytic_zr(stats, r) - stats.z_ring[r]) / stats.z_ring[r])
    exact = True
    p = OverheadParams(0.5, 1)
    for z in (2, 3, 4, 6):
        for r in range(0, 7):
            delta, phi = er_overhead(p, float(z), 1000, r)
            exact &= phi == 1000 * sum(z ** j for j in range(1, r + 1))
            exact &= delta == 1000 * z ** (r + 1)
    rng = np.random.default_rng(6)
    worst_mc = 0.0
    for z in (0.5, 3.0, 6.0):
        sample = rng.poisson(z, 10 ** 6).astype(np.float64)
        for n in range(1, 5):
            mc = float((sample ** n).mean())
            worst_mc = max(worst_mc, abs(poisson_moment(z, n) - mc) / mc)
    ok = worst_ring <= 0.15 and exact and worst_mc <= 0.01
    record_criterion(6, ok, f"ring error {worst_ring:.3f}, closed forms exact={exact}, "
                            f"Monte Carlo error {worst_mc:.4f}")
    assert ok


def test_criterion_07_convergence_behavior():
    monotone = True
    max_h = 0.0
    for seed in range(8):
        g = random_game(seed, n=4, K=5, capacity=2)
        try:
            ref = solve_central(g)
        except NegotiationBreakdown:
            continue
        res = run_fin(g, StepSchedule("diminishing", 1.0), 150, tol=-1.0, window=10 ** 9)
        gaps = -ref.objective - res.trace.best_dual_series()
        monotone &= bool(np.all(np.diff(gaps) <= 0))
        max_h = max(max_h, max(r.max_h for r in res.trace.records))
    ok = monotone and max_h <= 1.0
    record_criterion(7, ok, f"best-dual gap non-increasing={monotone}, max |h|={max_h:.3f}")
    assert ok


def test_criterion_08_fairness():
    pf_ok = ir_ok = True
    worst_pf = -np.inf
    worst_scale = 0.0
    solved = 0
    for seed in range(10):
        g = random_game(seed, n=3, K=4, capacity=2)
        try:
            rep = solve_central(g)
        except NegotiationBreakdown:
            continue
        if not rep.converged:
            continue
        solved += 1
        pf = check_pf(g, rep.strategy, trials=500, seed=seed)
        pf_ok &= pf.holds
        worst_pf = max(worst_pf, pf.worst_perturbation_sum)
        part = g.participants
        ir_ok &= bool(np.all(utilities(g, rep.strategy)[part] >= g.u0[part]))
        for factor in (0.25, 4.0):
            worst_scale = max(worst_scale, abs(scale_invariance_gap(g, seed % 3, factor)))
    ok = solved >= 5 and pf_ok and ir_ok and worst_scale <= 1e-6
    record_criterion(8, ok, f"{solved} solves, worst PF sum {worst_pf:.3g}, "
                            f"scale gap {worst_scale:.1e}, IR={ir_ok}")
    assert ok


BASELINE_CFG = """
[topology]
generator = {gen}
n = 100
{shape}
label = {gen}

[catalog]
objects = 500
perturb = 0.3

[game]
capacity = 25
radius = 1

[solver]
kinds = fin
schedule = polyak
k_stop = 20

[baselines]
algorithms = lru, ns1, ns4

[run]
seeds = 0-9
"""


def _means(path):
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    out = {}
    for algo in ("fin", "ns4", "ns1", "lru"):
        sel = [r for r in rows if r["algorithm"] == algo]
        out[algo] = (np.mean([float(r["bhr"]) for r in sel]), np.mean([float(r["fpr"]) for r in sel]),
                     len(sel))
    ns_pairs = {}
    for r in rows:
        if r["algorithm"] in ("ns1", "ns4"):
            ns_pairs.setdefault(r["seed"], {})[r["algorithm"]] = (float(r["bhr"]), float(r["fpr"]))
    return out, ns_pairs


def test_criterion_09_baseline_ordering(tmp_path):
    start = time.perf_counter()
    ok = True
    details = []
    tendency = []
    breakdowns = 0
    for gen, shape in (("ba", "m = 2"), ("er", "z = 4")):
        cfg = parse_config(BASELINE_CFG.format(gen=gen, shape=shape)).config
        _, failures = run_experiment(cfg, tmp_path / gen)
        m, pairs = _means(tmp_path / gen / "results.csv")
        bhr = {a: v[0] for a, v in m.items()}
        # a seed without agreement is scored at its disagreement outcome
        fin_breaks = [f for f in failures if ": fin: " in f and "individually rational" in f]
        breakdowns += len(fin_breaks)
        ok &= len(failures) == len(fin_breaks) and all(v[2] == 10 for v in m.values())
        ok &= bhr["fin"] >= bhr["ns4"] >= bhr["ns1"] >= bhr["lru"]
        ok &= m["fin"][1] >= m["ns4"][1]
        details.append(f"{gen}: BHR fin {bhr['fin']:.3f} ns4 {bhr['ns4']:.3f} ns1 {bhr['ns1']:.3f} "
                       f"lru {bhr['lru']:.3f}, FPR fin {m['fin'][1]:.3f} ns4 {m['ns4'][1]:.3f}")
        for p in pairs.values():
            if p["ns4"][0] > p["ns1"][0]:
                tendency.append(p["ns4"][1] <= p["ns1"][1])
    elapsed = time.perf_counter() - start
    ok &= elapsed < 600
    share = float(np.mean(tendency)) if tendency else float("nan")
    record_criterion(9, ok, "; ".join(details) + f"; {breakdowns} FIN run(s) without agreement "
                            f"scored at disagreement; NS4 trades FPR for BHR on {share:.0%} "
                            f"of seeds; {elapsed:.0f}s")
    assert ok


@pytest.mark.skipif(not TABLE1_FIXTURES.exists(), reason="ISP topology fixtures are not bundled")
def test_criterion_09_isp_growth_ratios():  # pragma: no cover
    from fincache.overhead import fit_growth_ratio
    from fincache.topology import load_edge_list
    for path in sorted(TABLE1_FIXTURES.glob("*.txt")):
        t = load_edge_list(path.read_text())
        fit = fit_growth_ratio(degree_stats(t, shortest_paths(t), 3).z_ring)
        print(f"{path.stem}: fitted growth ratio {fit.ratio:.2f}")


DETERMINISM_CFG = """
[topology]
generator = ba
n = 12
m = 2

[catalog]
objects = 15
perturb = 0.4

[game]
capacity = 3
radius = 2

[solver]
kinds = central, fin
k_stop = 40

[baselines]
algorithms = lru, greedy, ns1, ns4
stream_length = 5000

[overhead]
r_max = 3

[fairness]
trials = 50

[run]
seeds = 0-2
"""


def test_criterion_10_determinism(tmp_path):
    cfg = parse_config(DETERMINISM_CFG).config
    bundles = []
    for name in ("first", "second"):
        run_experiment(cfg, tmp_path / name)
        bundles.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).glob("*.csv"))})
    same = bundles[0] == bundles[1] and "results.csv" in bundles[0]
    record_criterion(10, same, f"{len(bundles[0])} CSV files compared byte for byte")
    assert same
