import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tta import autodiff as ad
from tta.bench import ExperimentSetup, prepare_seed
from tta.models import ModelSpec, make_model

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def mlp_oracle(model, X):
    """Dense numpy forward pass of a plain MLP model, written independently."""
    a = model.params.arrays()
    acts = {"relu": lambda z: np.maximum(z, 0.0), "tanh": np.tanh}
    h = np.atleast_2d(X)
    for i in range(len(model.spec.hidden)):
        h = acts[model.spec.activation](h @ a[f"w{i}"].T + a[f"b{i}"])
    e = h @ a["w_out"].T + a["b_out"]
    return e @ model.head.class_embeddings.T


def small_model(seed=0, hidden=(16, 16), activation="tanh", num_classes=4, embed_dim=8,
                input_dim=2, **kw):
    spec = ModelSpec(input_dim=input_dim, hidden=hidden, activation=activation,
                     num_classes=num_classes, embed_dim=embed_dim, **kw)
    return make_model(spec, seed)


def random_direction(layout, seed, scale=1.0):
    rng = np.random.default_rng([seed, 99])
    return ad.ParamVector(layout, scale * rng.standard_normal(layout.total_len))


@pytest.fixture(scope="session")
def seed_run():
    """One fully prepared default-suite seed, shared by the slower tests."""
    return prepare_seed(0, ExperimentSetup())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
