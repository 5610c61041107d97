"""Pre-training surrogate and fine-tuning loops (non-linear and tangent-space).

Both fine-tuning modes share one loop: seeded per-epoch shuffling, a linear
warm-up followed by cosine decay, and AdamW with decoupled weight decay. The
head is frozen by construction since it is not part of the parameter vector.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, ParamVector
from .models import Model, ModelSpec, init_params, make_model
from .taskvec import TaskVector, make_task_vector
from .tasks import Dataset, SuiteConfig, accuracy, build_suite, one_hot, pretrain_corpus


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 50
    schedule: str = "cosine"
    weight_decay: float = 0.01
    loss: str = "cross_entropy"
    seed: int = 0
    optimizer: str = "adamw"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 0 or self.warmup_steps < 0:
            raise ContractError("iterations and warmup_steps must be >= 0")
        if self.iterations and self.iterations <= self.warmup_steps:
            raise ContractError("iterations must exceed warmup_steps")
        if self.lr < 0:
            raise ContractError("lr must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ContractError(f"unknown schedule {self.schedule!r}")
        if self.loss not in ("cross_entropy", "mse"):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")


# desk-scale pre-training defaults; fine-tuning uses TrainConfig()
PRETRAIN_CONFIG = TrainConfig(iterations=6000, batch_size=128, lr=3e-3, warmup_steps=100,
                              weight_decay=0.01)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp ``0 -> lr`` over the warm-up, then cosine decay towards 0."""
    if not 0 <= step < cfg.iterations:
        raise ContractError(f"step {step} outside [0, {cfg.iterations})")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    x = (step - cfg.warmup_steps) / (cfg.iterations - cfg.warmup_steps)
    return cfg.lr * (1.0 + math.cos(math.pi * x)) / 2.0


@dataclass
class OptimizerState:
    first_moment: ParamVector
    second_moment: ParamVector
    step: int = 0

    @classmethod
    def init(cls, layout) -> "OptimizerState":
        return cls(ParamVector.zeros(layout), ParamVector.zeros(layout), 0)


def optimizer_step(values: np.ndarray, grad: np.ndarray, state: OptimizerState, lr: float,
                   cfg: TrainConfig) -> np.ndarray:
    """One AdamW (or momentum SGD) update; weight decay acts on the parameters."""
    t = state.step + 1
    values = values * (1.0 - lr * cfg.weight_decay) if cfg.weight_decay else values
    if cfg.optimizer == "sgd":
        m = cfg.momentum * state.first_moment.values + grad
        state.first_moment = state.first_moment.with_values(m)
        state.step = t
        return values - lr * m
    m = cfg.beta1 * state.first_moment.values + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.second_moment.values + (1.0 - cfg.beta2) * grad * grad
    state.first_moment = state.first_moment.with_values(m)
    state.second_moment = state.second_moment.with_values(v)
    state.step = t
    mhat = m / (1.0 - cfg.beta1 ** t)
    vhat = v / (1.0 - cfg.beta2 ** t)
    return values - lr * mhat / (np.sqrt(vhat) + cfg.eps)


def _stream(cfg: TrainConfig, key: str) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, zlib.crc32(key.encode())])


def _batches(n: int, cfg: TrainConfig, key: str):
    """Yield index arrays: seeded reshuffle each epoch, full batch if it fits."""
    if cfg.batch_size >= n:
        idx = np.arange(n)
        while True:
            yield idx
    rng = _stream(cfg, key)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            yield perm[start:start + cfg.batch_size]


def _targets(data: Dataset, num_classes: int) -> np.ndarray:
    if data.targets is not None:
        return data.targets
    return one_hot(data.labels, num_classes)


def _loss_builder(cfg: TrainConfig, data: Dataset, idx, num_classes: int):
    if cfg.loss == "cross_entropy":
        labels = data.labels[idx]
        return lambda out: ad.cross_entropy(out, labels)
    targets = _targets(data, num_classes)[idx]
    return lambda out: ad.mse(out, targets)


def _optimize(init_values: np.ndarray, layout, value_and_grad, n: int, cfg: TrainConfig, key: str):
    values = np.array(init_values, dtype=np.float64)
    state = OptimizerState.init(layout)
    losses = []
    batches = _batches(n, cfg, key)
    for step in range(cfg.iterations):
        idx = next(batches)
        loss, grad = value_and_grad(values, idx)
        if not np.isfinite(loss):
            raise NumericError(f"loss diverged at step {step}")
        losses.append(loss)
        values = optimizer_step(values, grad.values, state, lr_schedule(step, cfg), cfg)
        if not np.all(np.isfinite(values)):
            raise NumericError(f"parameters diverged at step {step}")
    return values, losses


@dataclass(eq=False)
class FineTuneRun:
    theta_star: ParamVector
    tau: TaskVector
    losses: list = field(default_factory=list, repr=False)
    test_accuracy: float | None = None

    def __iter__(self):
        return iter((self.theta_star, self.tau))


def train_nonlinear(model: Model, data: Dataset, cfg: TrainConfig, key: str = ""):
    """Minimise the configured loss over all encoder weights; returns (params, losses)."""
    net, c = model.network, model.spec.num_classes

    def value_and_grad(values, idx):
        loss_of = _loss_builder(cfg, data, idx, c)
        X = data.inputs[idx]
        return ad.value_and_grad(lambda p, _: loss_of(net(p, ad.Var(X))),
                                 model.params.with_values(values), None)

    values, losses = _optimize(model.params.values, model.params.layout, value_and_grad,
                               len(data), cfg, key or data.task_id)
    return model.params.with_values(values), losses


def pretrain_run(spec: ModelSpec, corpus: Dataset, cfg: TrainConfig = PRETRAIN_CONFIG,
                 head_seed: int | None = None):
    """Train a fresh random init on the coarse-label corpus; returns (θ0, losses)."""
    model = make_model(spec, cfg.seed if head_seed is None else head_seed,
                       init_params(spec, cfg.seed))
    return train_nonlinear(model, corpus, cfg, key="pretrain")


def pretrain(spec: ModelSpec, corpus: Dataset, cfg: TrainConfig = PRETRAIN_CONFIG,
             head_seed: int | None = None) -> ParamVector:
    """θ0 for the suite."""
    return pretrain_run(spec, corpus, cfg, head_seed)[0]


def pretrained_surrogate(spec: ModelSpec, seed: int) -> ParamVector:
    suite_cfg = SuiteConfig(input_dim=spec.input_dim, num_classes=spec.num_classes, seed=seed)
    specs = build_suite(suite_cfg).specs
    corpus = pretrain_corpus(specs, seed, suite_cfg.corpus_size, suite_cfg.coarse_lead)
    return pretrain(spec, corpus, replace(PRETRAIN_CONFIG, seed=seed), head_seed=seed)


def finetune_nonlinear(base: Model, data: Dataset, cfg: TrainConfig = TrainConfig(),
                       test: Dataset | None = None) -> FineTuneRun:
    """Fine-tune every encoder weight from ``base.params``; the head stays frozen."""
    theta_star, losses = train_nonlinear(base, data, cfg)
    tau = make_task_vector(theta_star, base.params, "nonlinear")
    acc = None if test is None else accuracy(base.with_params(theta_star), test)
    return FineTuneRun(theta_star, tau, losses, acc)


def finetune_linearized(base: Model, data: Dataset, cfg: TrainConfig = TrainConfig(),
                        test: Dataset | None = None) -> FineTuneRun:
    """Train ``τ`` inside the tangent model at ``base.params``.

    Every forward and backward pass is taken at ``θ0``; only τ changes.
    """
    from .linearize import LinearizedModel

    net, c, theta0 = base.network, base.spec.num_classes, base.params

    def value_and_grad(values, idx):
        loss_of = _loss_builder(cfg, data, idx, c)
        return ad.tangent_value_and_grad(net, theta0, theta0.with_values(values),
                                         data.inputs[idx], loss_of)

    values, losses = _optimize(np.zeros(len(theta0)), theta0.layout, value_and_grad,
                               len(data), cfg, data.task_id)
    tau = TaskVector(theta0.layout, values, "linearized")
    acc = None if test is None else accuracy(LinearizedModel(base, tau), test)
    return FineTuneRun(ParamVector(theta0.layout, theta0.values + values), tau, losses, acc)
