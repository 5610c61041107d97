import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tta import autodiff as ad
from tta.autodiff import ParamLayout, ParamVector
from tta.linearize import (LinearizedModel, gram_blocks, kernel_fit, linearize, ntk_kernel,
                           per_class_jacobian, posthoc_linearize)
from tta.models import FrozenHead, Model, ModelSpec
from tta.taskvec import TaskVector
from tta.training import TrainConfig, finetune_linearized
from tta.tasks import Dataset

from conftest import small_model

X = np.random.default_rng(11).uniform(-1, 1, (25, 2))


def tv(layout, seed, scale=1.0, tag="linearized"):
    return TaskVector(layout, scale * np.random.default_rng([seed, 7]).standard_normal(layout.total_len), tag)


def test_zero_tau_is_base_model():
    m = small_model(0)
    assert np.array_equal(linearize(m).logits(X), m.logits(X))
    assert np.array_equal(posthoc_linearize(m, TaskVector.zeros(m.params.layout)).logits(X), m.logits(X))


@given(st.integers(0, 500), st.floats(-4, 4), st.floats(-4, 4))
def test_displacement_is_affine_in_tau(seed, a, b):
    m = small_model(seed % 4, activation="relu")
    t1, t2 = tv(m.params.layout, seed), tv(m.params.layout, seed + 1)
    f0 = m.logits(X)
    disp = lambda t: LinearizedModel(m, t).logits(X) - f0  # noqa: E731
    comb = TaskVector(m.params.layout, a * t1.values + b * t2.values, "linearized")
    err = np.max(np.abs(disp(comb) - (a * disp(t1) + b * disp(t2))))
    assert err <= 1e-10 * max(1.0, np.max(np.abs(disp(comb))))


def test_taylor_remainder_is_quadratic():
    m = small_model(1, activation="tanh")
    base_dir = tv(m.params.layout, 1)
    gaps = []
    for s in (1e-2, 1e-3, 1e-4):
        t = TaskVector(m.params.layout, s * base_dir.values, "nonlinear")
        exact = m.with_params(m.params.with_values(m.params.values + t.values)).logits(X)
        gaps.append(np.max(np.abs(posthoc_linearize(m, t).logits(X) - exact)))
    c = [g / s ** 2 for g, s in zip(gaps, (1e-2, 1e-3, 1e-4))]
    # C fitted from the coarsest scale bounds the others
    assert max(c[1:]) <= 2 * c[0]


def test_posthoc_equals_nonlinear_for_linear_model():
    spec = ModelSpec(hidden=(1,), activation="relu", embed_dim=1, num_classes=1)
    # a one-unit relu net stays exactly linear where the unit is active
    arrays = {"w0": np.array([[1.0, 1.0]]), "b0": np.array([5.0]),
              "w_out": np.array([[2.0]]), "b_out": np.array([0.0])}
    m = Model(spec, FrozenHead(np.eye(1)), ad.flatten(spec.layout(), arrays))
    tau = TaskVector(m.params.layout, [0.1, -0.2, 0.3, 0.0, 0.0], "nonlinear")
    Xs = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    moved = m.with_params(m.params.with_values(m.params.values + tau.values)).logits(Xs)
    # (w0+dw)x + (b0+db) times (w_out): second-order term is dw*x*dw_out = 0 since dw_out=0
    np.testing.assert_allclose(posthoc_linearize(m, tau).logits(Xs), moved, atol=1e-12)


def test_ntk_symmetric_and_nonnegative_on_diagonal():
    m = small_model(2)
    x, y = np.array([0.3, -0.1]), np.array([-0.7, 0.5])
    assert np.all(ntk_kernel(m, x, x) >= 0)
    np.testing.assert_allclose(ntk_kernel(m, x, y), ntk_kernel(m, y, x), atol=1e-10)


def test_ntk_matches_explicit_reverse_gradients():
    m = small_model(3, activation="relu")
    x, y = np.array([0.2, 0.4]), np.array([-0.5, 0.9])
    net = m.network
    for j in range(m.spec.num_classes):
        g = [ad.reverse_grad(lambda p, pt: ad.mean(ad.mul(net(p, ad.Var(pt[None])),
                                                          ad.constant(np.eye(4)[j] * 4))), m.params, pt).values
             for pt in (x, y)]
        assert abs(ntk_kernel(m, x, y)[j] - g[0] @ g[1]) <= 1e-8 * max(1.0, abs(g[0] @ g[1]))


def test_gram_blocks_are_psd():
    m = small_model(4)
    K = gram_blocks(m, X, X)
    for k in K:
        np.testing.assert_allclose(k, k.T, atol=1e-12)
        assert np.linalg.eigvalsh(k).min() >= -1e-8 * np.trace(k)


def test_kernel_fit_zero_residual_gives_zero_betas():
    m = small_model(5)
    kp = kernel_fit(m, X[:6], m.logits(X[:6]))
    assert np.array_equal(kp.betas, np.zeros_like(kp.betas))


def test_kernel_fit_single_point_interpolates():
    m = small_model(6, num_classes=2, embed_dim=4)
    x, target = X[:1], np.array([[1.5, -0.5]])
    kp = kernel_fit(m, x, target)
    # the ridge shrinks the fit by a factor of about lambda / k(x,x) = 1e-8
    np.testing.assert_allclose(kp.logits(x), target, atol=1e-6)


def test_linearized_training_converges_to_kernel_predictor():
    spec = ModelSpec(input_dim=2, hidden=(32,), embed_dim=4, num_classes=1)
    base = Model(spec, FrozenHead.random(1, 4, 3), small_model(3, hidden=(32,), num_classes=1, embed_dim=4).params)
    rng = np.random.default_rng(7)
    Xr = rng.uniform(-1, 1, (12, 2))
    y = (np.sin(3 * Xr[:, 0]) * np.cos(2 * Xr[:, 1]))[:, None]
    K = gram_blocks(base, Xr, Xr)[0]
    lr = 0.9 * len(Xr) / np.linalg.eigvalsh(K).max()
    cfg = TrainConfig(iterations=40000, batch_size=12, lr=lr, warmup_steps=0, schedule="constant",
                      weight_decay=0.0, loss="mse", optimizer="sgd")
    run = finetune_linearized(base, Dataset(Xr, np.zeros(12, int), "train", 0, "reg", y), cfg)
    kp = kernel_fit(base, Xr, y)
    Q = rng.uniform(-1, 1, (200, 2))
    lm = LinearizedModel(base, run.tau)
    assert np.max(np.abs(lm.logits(Q) - kp.logits(Q))) <= 1e-3


def test_jacobian_rows_match_vjp():
    m = small_model(8)
    J = per_class_jacobian(m, X[:4], 2)
    cot = np.zeros((1, 4))
    cot[0, 2] = 1.0
    np.testing.assert_allclose(J[1], ad.vjp(m.network, m.params, X[1:2], cot).values, atol=1e-13)


def test_layout_mismatch_rejected():
    m = small_model(0)
    with pytest.raises(ad.LayoutError):
        LinearizedModel(m, TaskVector(ParamLayout.from_shapes([("x", (3,))]), np.zeros(3)))
