import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from conftest import line_game, random_game
from fincache.central import solve_central
from fincache.fin import (DualState, StepSchedule, dual_update, load_state, local_subproblem,
                          messages_per_iteration, run_fin, run_fin_growth, save_state,
                          solve_subproblems, step_size)
from fincache.game import duo_game, greedy_placement, make_game
from fincache.demand import DemandMatrix
from fincache.overhead import OverheadParams, system_overhead
from fincache.topology import Topology


def _state(v):
    return DualState(np.array([[v]], dtype=float))


@pytest.mark.parametrize("lam,h,xi,want", [(0.5, -1.0, 1.0, 0.0), (0.0, 0.2, 0.1, 0.02),
                                           (0.7, 0.0, 0.3, 0.7)])
def test_dual_update_examples(lam, h, xi, want):
    out = dual_update(_state(lam), np.array([[h]]), xi)
    assert out.lam[0, 0] == pytest.approx(want)
    assert out.iteration == 1


def test_dual_update_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        dual_update(_state(0.0), np.zeros((1, 1)), 0.0)


@given(lam=st.lists(st.floats(0, 10), min_size=1, max_size=8),
       h=st.floats(-5, 5), xi=st.floats(1e-6, 10))
def test_dual_update_stays_nonnegative(lam, h, xi):
    out = dual_update(DualState(np.array([lam])), np.full((1, len(lam)), h), xi)
    assert np.all(out.lam >= 0)


def test_step_sizes():
    assert step_size(StepSchedule("diminishing", 1.0), 4) == 0.25
    assert step_size(StepSchedule("constant", 0.05), 1) == 0.05
    assert step_size(StepSchedule("constant", 0.05), 917) == 0.05
    k = np.arange(1, 200001)
    steps = np.array([step_size(StepSchedule("diminishing", 1.0), int(i)) for i in k[:1000]])
    assert (steps ** 2).sum() < np.pi ** 2 / 6
    assert (1.0 / k ** 2).sum() == pytest.approx(np.pi ** 2 / 6, abs=1e-5)
    assert (1.0 / k).sum() > 12
    with pytest.raises(ValueError):
        step_size(StepSchedule("diminishing", 1.0), 0)
    with pytest.raises(ValueError):
        StepSchedule("constant", -1.0)
    with pytest.raises(ValueError):
        StepSchedule("newton")


def test_zero_prices_give_greedy_response():
    g = random_game(3, n=4, K=6, capacity=2)
    x, y, _ = solve_subproblems(g, np.zeros((len(g.pairs), g.object_count)))
    part = g.participants
    assert np.allclose(x[part], greedy_placement(g.weights, g.capacities)[part])
    for i in np.flatnonzero(part):
        xi, yi = local_subproblem(g, int(i), np.zeros((len(g.pairs), g.object_count)))
        assert np.allclose(xi, x[i])
        # free retrieval covers whatever is not cached locally
        assert np.allclose(yi.sum(axis=0), 1 - xi)


def test_high_price_stops_retrieval():
    g = duo_game("hop")
    lam = np.zeros((len(g.pairs), g.object_count))
    lam[0, 2] = 1e6
    _, yi = local_subproblem(g, int(g.pairs[0, 0]), lam)
    assert yi[0, 2] == 0.0


def test_negative_prices_rejected():
    g = duo_game()
    with pytest.raises(ValueError):
        local_subproblem(g, 0, -np.ones((len(g.pairs), g.object_count)))


def _lp_response(g, i, lam):
    """Node ``i``'s subproblem at prices ``lam`` restricted to a fixed
    surplus level, solved as a linear program over a grid of levels."""
    K = g.object_count
    lo, hi = g.pair_offsets[i], g.pair_offsets[i + 1]
    m = hi - lo
    income = np.zeros(K)
    for p, (a, b) in enumerate(g.pairs):
        if b == i:
            income += lam[p]
    w = g.weights[i]
    disc = g.pair_discount[lo:hi]
    nv = K + m * K
    # utility row: w.x + sum_j disc_j w.y_j
    util = np.concatenate([w] + [disc[j] * w for j in range(m)])
    cost = np.concatenate([-income] + [lam[lo + j] for j in range(m)])
    A, b = [], []
    A.append(np.concatenate([np.ones(K), np.zeros(m * K)]))
    b.append(g.capacities[i])
    for k in range(K):
        row = np.zeros(nv)
        row[k] = 1
        row[K + k::K] = 1
        A.append(row)
        b.append(1.0)
    best = np.inf
    for level in np.linspace(1e-3, util.sum(), 400):
        res = linprog(cost, A_ub=np.array(A + [-util]), b_ub=np.array(b + [-(g.u0[i] + level)]),
                      bounds=[(0, 1)] * nv, method="highs")
        if res.status == 0:
            best = min(best, -np.log(level) + res.fun)
    return best


def test_local_subproblem_matches_lp_scan():
    g = line_game([[0.9, 0.6, 0.3], [0.5, 0.8, 0.4]], capacity=1, discount="hop")
    rng = np.random.default_rng(1)
    for _ in range(3):
        lam = rng.random((len(g.pairs), g.object_count)) * 0.5
        for i in range(2):
            xi, yi = local_subproblem(g, i, lam)
            lo, hi = g.pair_offsets[i], g.pair_offsets[i + 1]
            income = sum(lam[p] for p in range(len(g.pairs)) if g.pairs[p, 1] == i)
            U = g.weights[i] @ xi + sum(g.pair_discount[lo + j] * g.weights[i] @ yi[j]
                                        for j in range(hi - lo))
            val = -np.log(U - g.u0[i]) + sum(lam[lo + j] @ yi[j] for j in range(hi - lo)) - income @ xi
            assert val <= _lp_response(g, i, lam) + 1e-6


def _dual(g, lam):
    return solve_subproblems(g, lam)[2]


def _subgrad(g, lam):
    x, y, _ = solve_subproblems(g, lam)
    return y - x[g.pairs[:, 1]]


@given(seed=st.integers(0, 10000))
def test_subgradient_inequality(seed):
    g = random_game(seed % 50, n=3, K=3, capacity=1)
    rng = np.random.default_rng(seed)
    active = g.participants[g.pairs[:, 0]][:, None]
    l1 = rng.random((len(g.pairs), g.object_count)) * active
    l2 = rng.random((len(g.pairs), g.object_count)) * active
    h = _subgrad(g, l1) * active
    assert np.all(np.abs(h) <= 1 + 1e-12)
    assert _dual(g, l2) <= _dual(g, l1) + float((h * (l2 - l1)).sum()) + 1e-6


def test_message_count_complete_graph():
    t = Topology(3, np.array([[0, 1], [1, 2], [0, 2]]))
    g = make_game(t, DemandMatrix(np.ones((3, 4))), 1, 1)
    assert messages_per_iteration(g) == 48
    assert system_overhead(OverheadParams(1, 4), g.neighborhoods) == 48


def test_duo_reaches_central_objective():
    g = duo_game("unit")
    ref = solve_central(g).objective
    res = run_fin(g, StepSchedule("diminishing"), 200, tol=-1.0, window=10 ** 9)
    assert abs(res.objective - ref) <= 1e-2
    assert not res.converged
    assert res.gap >= -1e-9


def test_trace_invariants():
    g = random_game(7, n=4, K=4, capacity=1)
    res = run_fin(g, StepSchedule("polyak"), 60, tol=-1.0, window=10 ** 9)
    recs = res.trace.records
    best = res.trace.best_dual_series()
    assert np.all(np.diff(best) >= 0)
    assert res.state.best_dual == best[-1]
    assert all(r.messages == messages_per_iteration(g) for r in recs)
    assert res.trace.total_messages == len(recs) * messages_per_iteration(g)
    assert all(r.max_h <= 1 + 1e-12 for r in recs)
    # weak duality: no dual value exceeds the negated best primal
    assert best[-1] <= -res.objective + 1e-9
    assert res.trace.to_csv().splitlines()[0] == "iter,dual,primal,gap,max_h,messages"


def test_deterministic():
    g = random_game(2, n=4, K=4, capacity=1)
    a = run_fin(g, StepSchedule("polyak"), 30)
    b = run_fin(g, StepSchedule("polyak"), 30)
    assert a.trace.to_csv() == b.trace.to_csv()
    assert np.array_equal(a.strategy.x, b.strategy.x)


def test_checkpoint_resume(tmp_path):
    g = random_game(4, n=4, K=4, capacity=1)
    sched = StepSchedule("diminishing", 0.5)
    first = run_fin(g, sched, 10, tol=-1.0, window=10 ** 9)
    path = tmp_path / "state.npz"
    save_state(first.state, path)
    loaded = load_state(path)
    assert np.array_equal(loaded.lam, first.state.lam)
    assert loaded.iteration == first.state.iteration == 10
    resumed = run_fin(g, sched, 10, tol=-1.0, window=10 ** 9, state=loaded)
    full = run_fin(g, sched, 20, tol=-1.0, window=10 ** 9)
    assert np.allclose(resumed.state.lam, full.state.lam)
    assert resumed.trace.records[0].iter == 11


def test_growth_mode_grows_radii_monotonically():
    t = Topology(4, np.array([[0, 1], [1, 2], [2, 3]]))
    w = np.array([[1.0, 0.9, 0.2, 0.1]] * 4)
    g = make_game(t, DemandMatrix(w), 1, 1, discount="hop")
    stages = run_fin_growth(g, StepSchedule("polyak"), 40, r_max=3)
    assert stages[0].radii.tolist() == [1, 1, 1, 1]
    for a, b in zip(stages, stages[1:]):
        assert np.all(b.radii >= a.radii) and np.all(b.radii - a.radii <= 1)
    assert np.all(stages[-1].radii <= 3)


def test_two_node_converged_prices_make_responses_feasible():
    g = line_game([[1.0, 0.8, 0.3], [0.9, 0.8, 0.35]], capacity=1)
    res = run_fin(g, StepSchedule("polyak"), 3000, tol=-1.0, window=10 ** 9, gap_tol=1e-7)
    assert res.converged
    x, y, _ = solve_subproblems(g, res.state.lam)
    assert np.all(y - x[g.pairs[:, 1]] <= 1e-3)
    assert res.objective == pytest.approx(solve_central(g).objective, abs=1e-6)
