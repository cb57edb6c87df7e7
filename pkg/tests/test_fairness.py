import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import line_game, random_game
from fincache.central import solve_central
from fincache.fairness import (check_ef, check_mf, check_pf, fairness_report, proportional_sum,
                               random_feasible_strategy, scale_invariance_gap, scale_node)
from fincache.game import (CachingStrategy, NegotiationBreakdown, best_retrieval, duo_game,
                           utilities, validate)


def test_ef_examples():
    res = check_ef([3, 3, 3], [1, 1, 1])
    assert res.holds and res.max_spread == 0.0
    res = check_ef([3, 4], [1, 1])
    assert not res.holds and res.max_spread == 1.0
    assert check_ef([5.0], [0.3]).holds
    with pytest.raises(ValueError):
        check_ef([1, 2], [1])


def test_mf_examples():
    u_w = np.zeros(2)
    cands = [("a", np.array([1.0, 2.0])), ("b", np.array([1.5, 1.6])), ("c", np.array([0.9, 5.0]))]
    res = check_mf(cands, u_w, target=1)
    assert res.selected == 1 and res.holds_over_candidates
    assert res.candidate_mins == (1.0, 1.5, 0.9)
    assert res.bottleneck_node == 0
    assert not check_mf(cands, u_w, target=0).holds_over_candidates
    same = [("a", np.array([1.0, 1.0]))] * 3
    assert all(check_mf(same, u_w, target=t).holds_over_candidates for t in range(3))
    with pytest.raises(ValueError):
        check_mf([], u_w)


def test_pf_sum_hand_case():
    assert proportional_sum([1.5, 0.4], [1.0, 1.0], [0.0, 0.0]) == pytest.approx(-0.1)
    assert proportional_sum([1.0, 1.0], [1.0, 1.0], [0.0, 0.0]) == 0.0


def _integer_candidates(g):
    n, K = g.node_count, g.object_count
    rows = [np.array(r, dtype=float) for r in itertools.product((0, 1), repeat=K)
            if sum(r) <= g.capacities[0]]
    for combo in itertools.product(rows, repeat=n):
        x = np.array(combo)
        yield CachingStrategy(x, g.pairs, best_retrieval(g, x))


def test_ef_optimum_attains_max_min_over_enumeration():
    g = duo_game("unit")
    s = solve_central(g).strategy
    part = g.participants
    u = utilities(g, s)
    assert check_ef(u[part], g.u0[part], 1e-6).holds
    cands = [(s, u[part])] + [(c, utilities(g, c)[part]) for c in _integer_candidates(g)]
    res = check_mf(cands, g.u0[part], target=0, tol=1e-6)
    assert res.holds_over_candidates
    assert len(cands) == 1 + 11 ** 2


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_pf_holds_at_optimum(seed):
    g = random_game(seed, n=3, K=3, capacity=1)
    try:
        rep = solve_central(g)
    except NegotiationBreakdown:
        pytest.skip("instance has no individually rational strategy")
    res = check_pf(g, rep.strategy, trials=500, seed=seed)
    assert res.holds and res.worst_perturbation_sum < 0 and res.trials == 500


def test_pf_fails_away_from_optimum():
    g = duo_game("unit")
    x = np.array([[1.0, 0.0, 0.0, 1.0], [1.0, 1.0, 0.0, 0.0]])
    s = CachingStrategy(x, g.pairs, best_retrieval(g, x))
    res = check_pf(g, s, trials=300, seed=0)
    assert not res.holds


def test_pf_rejects_breakdown_point():
    g = duo_game("unit")
    x = np.zeros((2, 4))
    with pytest.raises(NegotiationBreakdown):
        check_pf(g, CachingStrategy(x, g.pairs, best_retrieval(g, x)))


@given(seed=st.integers(0, 10 ** 6))
def test_random_feasible_strategy(seed):
    g = line_game([[1.0, 0.5, 0.0], [0.0, 0.0, 1.0], [0.3, 0.3, 0.3]], capacity=1)
    pinned = CachingStrategy(np.eye(3), g.pairs, best_retrieval(g, np.eye(3)))
    s = random_feasible_strategy(g, np.random.default_rng(seed), pinned)
    assert validate(g, s, 1e-9) == []
    fixed = ~g.participants
    assert np.array_equal(s.x[fixed], pinned.x[fixed])


def test_scale_node_rescales_row_and_disagreement():
    g = random_game(1, n=3, K=3)
    h = scale_node(g, 1, 3.0)
    assert np.allclose(h.weights[1], 3 * g.weights[1])
    assert np.allclose(h.u0[1], 3 * g.u0[1])
    assert np.allclose(h.weights[[0, 2]], g.weights[[0, 2]])
    with pytest.raises(ValueError):
        scale_node(g, 0, 0.0)


@pytest.mark.parametrize("factor", [0.2, 3.0, 17.0])
def test_scale_invariance(factor):
    for seed, g in [(0, duo_game("hop")), (1, random_game(1, n=3, K=3)),
                    (2, random_game(2, n=3, K=4, capacity=2))]:
        try:
            gap = scale_invariance_gap(g, seed % g.node_count, factor)
        except NegotiationBreakdown:
            continue
        assert abs(gap) <= 1e-6


def test_report_dict():
    g = duo_game("unit")
    s = solve_central(g).strategy
    alt = list(_integer_candidates(g))[:5]
    d = fairness_report(g, s, candidates=alt, trials=50, seed=3).as_dict()
    assert d["ef"]["holds"] and d["pf"]["holds"] and d["mf"]["holds_over_candidates"]
