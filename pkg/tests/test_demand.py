import numpy as np
import pytest
from hypothesis import given, strategies as st

from fincache.demand import (Catalog, DemandMatrix, build_demand, demand_from_csv, demand_to_csv,
                             duo_demand, weibull_popularity)
from fincache.topology import gen_er


def test_single_object():
    assert weibull_popularity(1).tolist() == [1.0]


def test_default_shape_sorted_and_normalized():
    w = weibull_popularity(100, 0.513, 40)
    assert np.all(np.diff(w) <= 0)
    assert abs(w.sum() - 1) < 1e-12


def test_smaller_shape_heavier_head():
    assert weibull_popularity(100, 0.513, 40)[0] > weibull_popularity(100, 2.0, 40)[0]


def test_rank_rule_against_cdf():
    shape, scale = 0.7, 3.0
    F = lambda x: 1 - np.exp(-(x / scale) ** shape)
    ref = np.array([F(j) - F(j - 1) for j in range(1, 6)])
    assert np.allclose(weibull_popularity(5, shape, scale), ref / ref.sum())


@pytest.mark.parametrize("shape,scale", [(0, 1), (1, 0), (-1, 2)])
def test_bad_parameters(shape, scale):
    with pytest.raises(ValueError):
        weibull_popularity(10, shape, scale)


def test_no_perturbation_rows_identical():
    t = gen_er(4, 0.5, 0)
    pop = weibull_popularity(6)
    d = build_demand(t, pop, total_rate_per_node=2.0)
    assert np.allclose(d.w, 2.0 * pop[None, :])


def test_duo_preset():
    assert duo_demand().w.tolist() == [[3, 2, 2, 1], [3, 2, 2, 1]]


@given(perturb=st.floats(0, 0.99), seed=st.integers(0, 1000), rate=st.floats(0.1, 10))
def test_row_sum_bounds_and_determinism(perturb, seed, rate):
    t = gen_er(5, 0.5, 1)
    pop = weibull_popularity(20)
    d = build_demand(t, pop, rate, perturb, seed)
    s = d.w.sum(axis=1)
    assert np.all(s >= rate * (1 - perturb) - 1e-9) and np.all(s <= rate * (1 + perturb) + 1e-9)
    assert np.array_equal(d.w, build_demand(t, pop, rate, perturb, seed).w)


@given(n=st.integers(1, 300), shape=st.floats(0.1, 5), scale=st.floats(0.5, 100))
def test_popularity_is_probability_vector(n, shape, scale):
    w = weibull_popularity(n, shape, scale)
    assert w.shape == (n,) and np.all(w >= 0) and abs(w.sum() - 1) < 1e-9


def test_csv_round_trip():
    d = DemandMatrix(np.array([[0.5, 1.25], [3.0, 0.1]]))
    assert np.array_equal(demand_from_csv(demand_to_csv(d)).w, d.w)


def test_invalid_matrices():
    with pytest.raises(ValueError):
        DemandMatrix(np.array([[1.0, -1.0]]))
    with pytest.raises(ValueError):
        DemandMatrix(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Catalog(2, np.array([1.0, 0.0]))
