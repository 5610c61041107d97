"""Tangent-space models: first-order Taylor expansion around fixed weights,
the empirical NTK, and the equivalent kernel ridge predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, LayoutError, NumericError, ParamVector
from .models import Model, predict
from .taskvec import TaskVector


@dataclass(frozen=True, eq=False)
class LinearizedModel:
    """``f_lin(x; θ0 + τ) = f(x; θ0) + τᵀ∇f(x; θ0)`` with ``θ0 = base.params``."""

    base: Model
    tau: TaskVector

    def __post_init__(self):
        if self.tau.layout != self.base.params.layout:
            raise LayoutError("task vector layout does not match the base model")

    @property
    def spec(self):
        return self.base.spec

    @property
    def theta0(self) -> ParamVector:
        return self.base.params

    def with_tau(self, tau: TaskVector) -> "LinearizedModel":
        return LinearizedModel(self.base, tau)

    def primal_and_displacement(self, x):
        return ad.forward_jvp(self.base.network, self.base.params, self.tau, x)

    def logits(self, x) -> np.ndarray:
        out, disp = self.primal_and_displacement(x)
        return out + disp

    def predict(self, x):
        return predict(self, x)


def linearized_forward(lm: LinearizedModel, x) -> np.ndarray:
    return lm.logits(x)


def linearize(base: Model, tau: TaskVector | None = None, origin_tag: str = "linearized"):
    if tau is None:
        tau = TaskVector.zeros(base.params.layout, origin_tag)
    return LinearizedModel(base, tau)


def posthoc_linearize(base: Model, tau_nonlinear: TaskVector) -> LinearizedModel:
    """Wrap a non-linearly obtained task vector in the tangent model at ``base``."""
    return LinearizedModel(base, tau_nonlinear)


def per_class_jacobian(base: Model, x, class_index: int) -> np.ndarray:
    """``(n, P)`` matrix of ∇_θ f_j(x_i; θ0)."""
    return ad.jacobian(base.network, base.params, x, class_index)


def ntk_kernel(base: Model, x, x_prime) -> np.ndarray:
    """Per-class NTK values ``<∇f_j(x), ∇f_j(x')>``, one entry per logit."""
    pts = np.stack([np.asarray(x, dtype=np.float64), np.asarray(x_prime, dtype=np.float64)])
    out = np.empty(base.spec.num_classes)
    for j in range(base.spec.num_classes):
        jac = per_class_jacobian(base, pts, j)
        out[j] = jac[0] @ jac[1]
    return out


def gram_blocks(base: Model, rows, cols) -> np.ndarray:
    """``(c, n_rows, n_cols)`` per-class NTK Gram matrices."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    cols = np.atleast_2d(np.asarray(cols, dtype=np.float64))
    c = base.spec.num_classes
    out = np.empty((c, rows.shape[0], cols.shape[0]))
    same = rows.shape == cols.shape and np.array_equal(rows, cols)
    for j in range(c):
        jr = per_class_jacobian(base, rows, j)
        jc = jr if same else per_class_jacobian(base, cols, j)
        out[j] = jr @ jc.T
    return out


@dataclass(frozen=True, eq=False)
class KernelPredictor:
    """``f(x; θ0) + Σ_ν β_ν,j k_j(x_ν, x)`` per class ``j``.

    ``weights[j] = Σ_ν β_ν,j ∇f_j(x_ν)`` lets predictions run as one JVP per
    class instead of materialising query Jacobians.
    """

    base: Model
    support_points: np.ndarray
    betas: np.ndarray          # (n_support, c)
    weights: np.ndarray        # (c, P)
    ridge: np.ndarray          # (c,)

    @property
    def spec(self):
        return self.base.spec

    def logits(self, x) -> np.ndarray:
        return kernel_predict(self, x)

    def predict(self, x):
        return predict(self, x)


def default_ridge(gram: np.ndarray) -> float:
    return 1e-8 * float(np.mean(np.diag(gram)))


def kernel_fit(base: Model, inputs, targets, ridge: float | None = None) -> KernelPredictor:
    """Solve ``(K_j + λ I) β_j = y_j - f_j(X; θ0)`` for every class ``j``.

    ``ridge=None`` uses ``1e-8`` times the mean Gram diagonal per class.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    Y = np.asarray(targets, dtype=np.float64)
    c = base.spec.num_classes
    if X.shape[0] == 0:
        raise ContractError("kernel_fit needs a non-empty training set")
    if Y.shape != (X.shape[0], c):
        raise LayoutError(f"targets shape {Y.shape}, expected {(X.shape[0], c)}")
    residual = Y - base.logits(X)
    betas = np.zeros((X.shape[0], c))
    weights = np.zeros((c, base.params.layout.total_len))
    ridges = np.zeros(c)
    for j in range(c):
        jac = per_class_jacobian(base, X, j)
        gram = jac @ jac.T
        lam = default_ridge(gram) if ridge is None else float(ridge)
        ridges[j] = lam
        system = gram + lam * np.eye(gram.shape[0])
        try:
            chol = np.linalg.cholesky(system)
        except np.linalg.LinAlgError:
            raise NumericError(f"kernel system for class {j} is singular (ridge={lam:g})") from None
        if np.min(np.abs(np.diag(chol))) <= 1e-10 * np.max(np.abs(np.diag(chol))):
            raise NumericError(f"kernel system for class {j} is numerically singular (ridge={lam:g})")
        z = np.linalg.solve(chol, residual[:, j])
        betas[:, j] = np.linalg.solve(chol.T, z)
        weights[j] = jac.T @ betas[:, j]
    return KernelPredictor(base, X, betas, weights, ridges)


def kernel_predict(kp: KernelPredictor, x) -> np.ndarray:
    xb = np.asarray(x, dtype=np.float64)
    single = xb.ndim == 1
    xb = np.atleast_2d(xb)
    base = kp.base
    out = base.logits(xb).copy()
    layout = base.params.layout
    for j in range(base.spec.num_classes):
        if not np.any(kp.weights[j]):
            continue
        _, disp = ad.forward_jvp(base.network, base.params, ParamVector(layout, kp.weights[j]), xb)
        out[:, j] += disp[:, j]
    return out[0] if single else out
