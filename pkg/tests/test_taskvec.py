import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tta.autodiff import ContractError, LayoutError, ParamLayout, ParamVector
from tta.taskvec import (DEFAULT_GRID, MixingConfig, TaskVector, alpha_search, apply, combine,
                         make_task_vector, negate, scale)

L = ParamLayout.from_shapes([("a", (3, 2)), ("b", (4,))])


def pv(seed):
    return ParamVector(L, np.random.default_rng(seed).standard_normal(L.total_len))


def test_equal_weights_give_zero_vector():
    assert np.array_equal(make_task_vector(pv(0), pv(0)).values, np.zeros(L.total_len))


def test_apply_recovers_theta_star():
    t0, ts = pv(1), pv(2)
    tau = make_task_vector(ts, t0)
    assert np.array_equal(apply(t0, tau).values, t0.values + (ts.values - t0.values))
    assert apply(t0, tau).layout == t0.layout


def test_subtraction_matches_elementwise_loop():
    t0, ts = pv(3), pv(4)
    tau = make_task_vector(ts, t0)
    for i in range(L.total_len):
        assert tau.values[i] == ts.values[i] - t0.values[i]


def test_combine_identity_and_cancellation():
    tau = make_task_vector(pv(5), pv(6))
    assert np.array_equal(combine([tau], [1.0]).values, tau.values)
    assert np.array_equal(combine([tau, negate(tau)], [1.0, 1.0]).values, np.zeros(L.total_len))


@given(st.permutations(range(4)), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_combine_is_permutation_invariant(perm, alphas):
    taus = [make_task_vector(pv(10 + i), pv(20 + i)) for i in range(4)]
    a = combine(taus, alphas).values
    b = combine([taus[i] for i in perm], [alphas[i] for i in perm]).values
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(-5, 5))
def test_combine_scales_linearly(alphas, c):
    taus = [make_task_vector(pv(30 + i), pv(40 + i)) for i in range(3)]
    lhs = combine(taus, [c * a for a in alphas]).values
    np.testing.assert_allclose(lhs, c * combine(taus, alphas).values, atol=1e-12, rtol=1e-12)


def test_negation_identities():
    t0, tau = pv(7), make_task_vector(pv(8), pv(9))
    assert np.array_equal(apply(t0, negate(tau)).values, t0.values - tau.values)
    assert np.array_equal(negate(negate(tau)).values, tau.values)
    back = make_task_vector(apply(t0, tau), t0)
    assert np.max(np.abs(back.values - tau.values)) <= 1e-15 * max(1.0, np.max(np.abs(t0.values))) * 4
    assert np.array_equal(scale(tau, 2.0).values, 2.0 * tau.values)


def test_mixed_tags_and_layouts_rejected():
    a = make_task_vector(pv(1), pv(2), "nonlinear")
    b = make_task_vector(pv(1), pv(2), "linearized")
    with pytest.raises(ContractError):
        combine([a, b], [1, 1])
    other = TaskVector(ParamLayout.from_shapes([("z", (10,))]), np.zeros(10))
    with pytest.raises(LayoutError):
        combine([a, other], [1, 1])
    with pytest.raises(ContractError):
        TaskVector(L, np.zeros(L.total_len), "weird")


def test_alpha_search_tie_breaks_to_smallest():
    scores = {0.0: 0.1, 0.5: 0.9, 1.0: 0.9}
    res = alpha_search(scores.__getitem__, [0.0, 0.5, 1.0], "maximize")
    assert (res.alpha, res.score) == (0.5, 0.9)


def test_constraint_rejecting_all_positive_alphas_falls_back_to_zero():
    res = alpha_search(lambda a: 1 - a, DEFAULT_GRID, "constrained_minimize", lambda a: a == 0)
    assert res.alpha == 0.0 and not res.feasible


@given(st.lists(st.integers(0, 5), min_size=21, max_size=21))
def test_alpha_search_matches_exhaustive_scan(table):
    grid = list(DEFAULT_GRID)
    scores = dict(zip(grid, [float(v) for v in table]))
    best_a = min(grid, key=lambda a: (-scores[a], a))
    res = alpha_search(scores.__getitem__, grid, "maximize")
    assert (res.alpha, res.score) == (best_a, scores[best_a])
    lo_a = min(grid, key=lambda a: (scores[a], a))
    res = alpha_search(scores.__getitem__, grid, "constrained_minimize", lambda a: True)
    assert res.alpha == lo_a


@given(st.lists(st.floats(-10, 10), min_size=21, max_size=21))
def test_alpha_search_invariant_under_monotone_maps(table):
    grid = list(DEFAULT_GRID)
    f = dict(zip(grid, table))
    a = alpha_search(f.__getitem__, grid).alpha
    b = alpha_search(lambda x: np.exp(f[x] / 5) * 3 + 1, grid).alpha
    assert a == b


def test_mixing_config_validation():
    assert MixingConfig().search_grid == DEFAULT_GRID
    with pytest.raises(ContractError):
        MixingConfig(search_grid=(0.5, 0.2))
    with pytest.raises(ContractError):
        MixingConfig(search_grid=())
    assert len(DEFAULT_GRID) == 21 and DEFAULT_GRID[0] == 0.0 and DEFAULT_GRID[-1] == 1.0
