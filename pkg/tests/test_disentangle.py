import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tta import autodiff as ad
from tta.autodiff import ContractError, ParamLayout, ParamVector
from tta.disentangle import (GridSpec, disentanglement_error, draw_samples, grid_scan,
                             linearized_eval, nonlinear_eval)
from tta.taskvec import TaskVector

from conftest import small_model


def test_default_grid_has_400_cells_including_zero():
    v = GridSpec().values()
    assert len(v) == 20 and v[0] == -3.0 and v.max() < 3.0
    assert 0.0 in v
    np.testing.assert_allclose(np.diff(v), 0.3, atol=1e-12)


def _toy():
    m = small_model(0, activation="relu")
    rng = np.random.default_rng(0)
    t1 = TaskVector(m.params.layout, 0.5 * rng.standard_normal(len(m.params)))
    t2 = TaskVector(m.params.layout, 0.5 * rng.standard_normal(len(m.params)))
    X1, X2 = rng.uniform(-1, 0, (40, 2)), rng.uniform(0, 1, (40, 2))
    return m, t1, t2, (X1, X2)


def test_xi_at_origin_is_exactly_zero():
    m, t1, t2, S = _toy()
    assert disentanglement_error(nonlinear_eval(m), m.params, t1, t2, 0.0, 0.0, S) == 0.0


def test_zero_second_vector_leaves_only_one_summand():
    m, t1, _, (X1, X2) = _toy()
    zero = TaskVector.zeros(m.params.layout)
    ev = nonlinear_eval(m)
    for a1 in (-2.0, 0.7, 3.0):
        moved = m.params.with_values(m.params.values + a1 * t1.values)
        # t=1 comparands coincide; t=2 compares θ0 with θ0 + α1 τ1 on task 2's samples
        t2_term = float(np.mean(ev(m.params, X2) != ev(moved, X2)))
        assert disentanglement_error(ev, m.params, t1, zero, a1, 1.3, (X1, X2)) == t2_term


def test_xi_matches_enumeration_on_tiny_model():
    # two-parameter model with two outputs: logits (θ_a x, θ_b x) on scalar inputs
    L = ParamLayout.from_shapes([("w", (2, 1))])
    f = lambda p, x: ad.affine(x, p["w"])  # noqa: E731

    def evaluate(theta, X):
        return np.argmax(ad.forward_eval(f, theta, X), axis=1)

    theta0 = ParamVector(L, [1.0, 0.0])
    t1, t2 = TaskVector(L, [0.0, 2.0]), TaskVector(L, [-1.5, 0.5])
    X1, X2 = np.array([[1.0], [-1.0]]), np.array([[2.0], [0.5], [-0.5]])

    def pred(th, x):  # enumerate both classes by hand
        s = [th[0] * x, th[1] * x]
        return 0 if s[0] >= s[1] else 1

    for a1, a2 in itertools.product((-1.0, 0.0, 0.5, 2.0), repeat=2):
        th1 = np.array([1.0, 0.0]) + a1 * np.array([0.0, 2.0])
        th2 = np.array([1.0, 0.0]) + a2 * np.array([-1.5, 0.5])
        both = np.array([1.0, 0.0]) + a1 * np.array([0.0, 2.0]) + a2 * np.array([-1.5, 0.5])
        want = (np.mean([pred(th1, x) != pred(both, x) for x in X1[:, 0]])
                + np.mean([pred(th2, x) != pred(both, x) for x in X2[:, 0]]))
        got = disentanglement_error(evaluate, theta0, t1, t2, a1, a2, (X1, X2))
        assert got == want


def test_grid_scan_shape_range_and_determinism():
    m, t1, t2, S = _toy()
    spec = GridSpec(-1, 1, 4)
    g = grid_scan(nonlinear_eval(m), m.params, t1, t2, spec, samples=S)
    assert g.xi.shape == (4, 4)
    assert np.all((g.xi >= 0) & (g.xi <= 2))
    i0 = int(np.flatnonzero(spec.values() == 0.0)[0])
    assert g.xi[i0, i0] == 0.0
    again = grid_scan(nonlinear_eval(m), m.params, t1, t2, spec, samples=S)
    assert np.array_equal(g.xi, again.xi)
    for i, j in [(0, 3), (3, 1)]:
        direct = disentanglement_error(nonlinear_eval(m), m.params, t1, t2,
                                       spec.values()[i], spec.values()[j], S)
        assert g.xi[i, j] == direct


def test_grid_csv_layout():
    m, t1, t2, S = _toy()
    g = grid_scan(linearized_eval(m), m.params, t1, t2, GridSpec(-1, 1, 3), samples=S)
    lines = g.to_csv().split("\n")
    assert lines[0] == "alpha1,alpha2,xi" and lines[-1] == "" and len(lines) == 1 + 9 + 1
    a1, a2, _ = lines[2].split(",")
    assert float(a1) == g.alpha1_values[0] and float(a2) == g.alpha2_values[1]


@given(st.floats(0.1, 10))
def test_linearized_xi_invariant_to_logit_rescaling(c):
    m, t1, t2, S = _toy()
    lin = linearized_eval(m, outputs="logits")

    def scaled(theta, X):
        return np.argmax(c * lin(theta, X), axis=1)

    for a1, a2 in [(1.0, -0.5), (2.5, 2.5)]:
        assert (disentanglement_error(scaled, m.params, t1, t2, a1, a2, S)
                == disentanglement_error(linearized_eval(m), m.params, t1, t2, a1, a2, S))


def test_squared_distance_option_and_samples():
    m, t1, t2, S = _toy()
    soft = disentanglement_error(nonlinear_eval(m, "logits"), m.params, t1, t2, 1.0, 1.0, S, "squared")
    assert soft > 0
    with pytest.raises(ContractError):
        disentanglement_error(nonlinear_eval(m), m.params, t1, t2, 1.0, 1.0, (S[0][:0], S[1]))


def test_samples_come_from_each_task_support(seed_run):
    specs = seed_run.suite.specs[:2]
    X1, X2 = draw_samples(specs, 64, 0)
    assert np.all(specs[0].contains(X1)) and np.all(specs[1].contains(X2))
    Y1, _ = draw_samples(specs, 64, 0)
    assert np.array_equal(X1, Y1)


def test_xi_concentrates_near_theta0(seed_run):
    base = seed_run.base
    tau = seed_run.taus("nonlinear")
    g = grid_scan(nonlinear_eval(base), base.params, tau[0], tau[1], GridSpec(),
                  samples_per_task=128, task_pair=seed_run.suite.specs[:2])
    near = np.abs(g.alpha1_values) <= 1.0
    inner = g.xi[np.ix_(near, np.abs(g.alpha2_values) <= 1.0)]
    assert inner.mean() <= g.xi.mean()
