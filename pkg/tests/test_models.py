import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tta import autodiff as ad
from tta.autodiff import ContractError
from tta.models import FrozenHead, Model, ModelSpec, init_params, make_model, predict

from conftest import mlp_oracle, small_model


def test_init_is_deterministic():
    spec = ModelSpec()
    assert np.array_equal(init_params(spec, 5).values, init_params(spec, 5).values)
    assert not np.array_equal(init_params(spec, 5).values, init_params(spec, 6).values)


def test_fan_in_scaling_matches_empirical_std():
    spec = ModelSpec(input_dim=32, hidden=(64,), embed_dim=8)
    draws = np.concatenate([init_params(spec, s).arrays()["w0"].ravel() for s in range(3)])
    assert draws.size >= 6000
    assert abs(draws.std() - 1 / np.sqrt(32)) <= 0.1 / np.sqrt(32)


def test_bias_init_bounded_by_inverse_sqrt_fan_in():
    a = init_params(ModelSpec(), 0).arrays()
    assert np.max(np.abs(a["b0"])) <= 1 / np.sqrt(2)
    assert np.max(np.abs(a["b1"])) <= 1 / np.sqrt(64)


def test_normalized_embeddings_have_unit_norm():
    m = small_model(0, normalize_output=True)
    X = np.random.default_rng(0).uniform(-1, 1, (40, 2))
    np.testing.assert_allclose(np.linalg.norm(m.encode(X), axis=1), 1.0, atol=1e-12)


def test_zero_weights_give_zero_embedding():
    m = small_model(0)
    zero = m.with_params(m.params.with_values(np.zeros(len(m.params))))
    assert np.array_equal(zero.encode(np.ones((3, 2))), np.zeros((3, 8)))


def test_one_hidden_layer_by_hand():
    spec = ModelSpec(hidden=(3,), embed_dim=2, num_classes=2, activation="relu")
    layout = spec.layout()
    arrays = {"w0": np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]]), "b0": np.array([0.0, -1.0, 0.5]),
              "w_out": np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 1.0]]), "b_out": np.array([0.1, 0.0])}
    head = FrozenHead(np.eye(2))
    m = Model(spec, head, ad.flatten(layout, arrays))
    x = np.array([2.0, 3.0])
    # hidden: relu([2, 2, -0.5]) = [2, 2, 0]; embedding: [4.1, 4]
    np.testing.assert_allclose(m.logits(x), [4.1, 4.0], atol=1e-12)


def test_logits_match_dense_oracle_default_spec():
    m = make_model(ModelSpec(), 2)
    X = np.random.default_rng(2).uniform(-1, 1, (50, 2))
    np.testing.assert_allclose(m.logits(X), mlp_oracle(m, X), atol=1e-12)


def test_head_row_embedding_predicts_its_class():
    m = small_model(1)
    H = m.head.class_embeddings
    for k in range(H.shape[0]):
        assert int(np.argmax(H @ H[k])) == k


def test_ties_resolve_to_class_zero():
    class Flat:
        def logits(self, x):
            return np.zeros((len(x), 5))
    assert np.array_equal(predict(Flat(), np.zeros((3, 2))), [0, 0, 0])


def test_predict_matches_brute_force_over_classes():
    m = make_model(ModelSpec(), 3)
    X = np.random.default_rng(3).uniform(-1, 1, (64, 2))
    e = m.encode(X)
    H = m.head.class_embeddings
    brute = []
    for row in e:
        scores = [float(row @ H[k]) for k in range(H.shape[0])]
        brute.append(max(range(len(scores)), key=lambda k: (scores[k], -k)))
    assert np.array_equal(m.predict(X), brute)


@given(st.floats(-50, 50))
def test_predict_invariant_to_logit_shift(c):
    m = small_model(4)
    X = np.random.default_rng(4).uniform(-1, 1, (20, 2))

    class Shifted:
        def logits(self, x):
            return m.logits(x) + c
    assert np.array_equal(predict(Shifted(), X), m.predict(X))


def test_head_is_orthonormal_and_read_only():
    h = FrozenHead.random(8, 16, 0)
    np.testing.assert_allclose(h.class_embeddings @ h.class_embeddings.T, np.eye(8), atol=1e-12)
    with pytest.raises(ValueError):
        h.class_embeddings[0, 0] = 1.0
    with pytest.raises(ContractError):
        FrozenHead(np.ones((2, 3)))


def test_spec_validation():
    with pytest.raises(ContractError):
        ModelSpec(activation="sigmoid")
    with pytest.raises(ContractError):
        ModelSpec(num_classes=20, embed_dim=16)
    with pytest.raises(ContractError):
        ModelSpec(hidden=())
