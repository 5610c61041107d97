"""Disentanglement error ξ(α1, α2) between two task vectors, and its grid scan."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError, ParamVector, check_same_layout
from .linearize import LinearizedModel
from .models import Model
from .taskvec import TaskVector

ModelEval = Callable[[ParamVector, np.ndarray], np.ndarray]


def prediction_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-point disagreement of two prediction arrays (0 or 1)."""
    return (np.asarray(a) != np.asarray(b)).astype(np.float64)


def squared_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance between output rows; for soft analyses only."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return (d * d).reshape(d.shape[0], -1).sum(axis=1)


DISTANCES = {"prediction": prediction_error, "squared": squared_distance}


# Evaluators map full parameter vectors to predictions. Both carry θ0 so that
# ξ can treat non-linear, post-hoc and linearized models identically.

def nonlinear_eval(base: Model, outputs: str = "predictions") -> ModelEval:
    def run(theta: ParamVector, X):
        m = base.with_params(theta)
        return m.predict(X) if outputs == "predictions" else m.logits(X)
    run.theta0 = base.params
    return run


def linearized_eval(base: Model, outputs: str = "predictions") -> ModelEval:
    theta0 = base.params

    def run(theta: ParamVector, X):
        tau = TaskVector(theta.layout, theta.values - theta0.values, "linearized")
        lm = LinearizedModel(base, tau)
        return lm.predict(X) if outputs == "predictions" else lm.logits(X)
    run.theta0 = theta0
    return run


def _shift(theta0: ParamVector, pairs) -> ParamVector:
    values = theta0.values.copy()
    for a, tau in pairs:
        if a:
            values += a * tau.values
    return theta0.with_values(values)


def disentanglement_error(model_eval: ModelEval, theta0: ParamVector, tau1: TaskVector,
                          tau2: TaskVector, alpha1: float, alpha2: float, samples,
                          distance: str = "prediction") -> float:
    """Monte-Carlo ξ over the sample sets ``samples = (X1, X2)`` from μ1 and μ2.

    Sum over both tasks of the mean distance between the single-vector model
    ``θ0 + α_t τ_t`` and the combined model ``θ0 + α1 τ1 + α2 τ2`` on task t.
    """
    check_same_layout(tau1, tau2)
    check_same_layout(theta0, tau1)
    X1, X2 = samples
    if len(X1) < 1 or len(X2) < 1:
        raise ContractError("need at least one sample per task")
    dist = DISTANCES[distance]
    both = model_eval(_shift(theta0, [(alpha1, tau1), (alpha2, tau2)]), np.concatenate([X1, X2]))
    n1 = len(X1)
    xi = 0.0
    for X, a, tau, combined in ((X1, alpha1, tau1, both[:n1]), (X2, alpha2, tau2, both[n1:])):
        single = model_eval(_shift(theta0, [(a, tau)]), X)
        xi += float(np.mean(dist(single, combined)))
    return xi


@dataclass(frozen=True)
class GridSpec:
    """``num`` equispaced values ``lo + k (hi - lo) / num``, k = 0..num-1."""

    lo: float = -3.0
    hi: float = 3.0
    num: int = 20

    def __post_init__(self):
        if self.num < 1:
            raise ContractError("grid axes must be non-empty")
        if not self.hi > self.lo:
            raise ContractError("grid needs hi > lo")

    def values(self) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * np.arange(self.num) / self.num


@dataclass(frozen=True, eq=False)
class DisentanglementGrid:
    alpha1_values: np.ndarray
    alpha2_values: np.ndarray
    xi: np.ndarray            # (len(alpha1), len(alpha2))
    sample_size: int
    task_pair: tuple
    method: str

    def __post_init__(self):
        if self.xi.shape != (len(self.alpha1_values), len(self.alpha2_values)):
            raise ContractError("xi shape does not match the grid axes")

    def area_below(self, threshold: float = 0.05) -> float:
        """Fraction of cells with ξ below ``threshold``."""
        return float(np.mean(self.xi < threshold))

    def rows(self):
        for i, a1 in enumerate(self.alpha1_values):
            for j, a2 in enumerate(self.alpha2_values):
                yield float(a1), float(a2), float(self.xi[i, j])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha1", "alpha2", "xi"])
        for row in self.rows():
            w.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()


def draw_samples(task_pair, samples_per_task: int, seed: int):
    """Seeded i.i.d. samples from each task's input distribution."""
    if samples_per_task < 1:
        raise ContractError("samples_per_task must be >= 1")
    out = []
    for spec in task_pair:
        rng = np.random.default_rng([seed, spec.index, 0xD15E])
        out.append(spec.sample(samples_per_task, rng))
    return tuple(out)


def grid_scan(model_eval: ModelEval, theta0: ParamVector, tau1: TaskVector, tau2: TaskVector,
              grid_spec: GridSpec | tuple = GridSpec(), samples_per_task: int = 512, seed: int = 0,
              task_pair=None, samples=None, method: str = "", distance: str = "prediction"
              ) -> DisentanglementGrid:
    """ξ on every cell of the grid, reusing one sample set for all cells.

    Samples come from ``samples`` if given, else are drawn from the two
    :class:`TaskSpec` objects in ``task_pair``. ``grid_spec`` may be one
    GridSpec for both axes or a pair.
    """
    g1, g2 = grid_spec if isinstance(grid_spec, tuple) else (grid_spec, grid_spec)
    a1s, a2s = g1.values(), g2.values()
    if samples is None:
        if task_pair is None:
            raise ContractError("grid_scan needs samples or a task pair")
        samples = draw_samples(task_pair, samples_per_task, seed)
    X1, X2 = samples
    check_same_layout(tau1, tau2)
    dist = DISTANCES[distance]
    # single-vector predictions depend on one coordinate only
    single1 = {a: model_eval(_shift(theta0, [(a, tau1)]), X1) for a in a1s}
    single2 = {a: model_eval(_shift(theta0, [(a, tau2)]), X2) for a in a2s}
    both = np.concatenate([X1, X2])
    n1 = len(X1)
    xi = np.zeros((len(a1s), len(a2s)))
    for i, a1 in enumerate(a1s):
        for j, a2 in enumerate(a2s):
            comb = model_eval(_shift(theta0, [(a1, tau1), (a2, tau2)]), both)
            xi[i, j] = (float(np.mean(dist(single1[a1], comb[:n1])))
                        + float(np.mean(dist(single2[a2], comb[n1:]))))
    pair = tuple(getattr(s, "index", s) for s in task_pair) if task_pair is not None else ()
    return DisentanglementGrid(a1s, a2s, xi, len(X1), pair, method)
