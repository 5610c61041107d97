"""Task addition, task negation and the random-initialisation control."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .linearize import LinearizedModel
from .models import Model, ModelSpec, init_params, make_model
from .taskvec import DEFAULT_GRID, TaskVector, alpha_search, apply, combine, negate, scale
from .tasks import Suite, SuiteConfig, accuracy, build_suite, pretrain_corpus
from .training import (PRETRAIN_CONFIG, TrainConfig, finetune_linearized, finetune_nonlinear,
                       pretrain_run)

METHODS = ("nonlinear", "posthoc", "linearized")
RETENTION = 0.95


def normalized_addition_accuracy(multi_acc: Sequence[float], single_acc: Sequence[float]) -> float:
    """Mean over tasks of multi-task accuracy divided by single-task accuracy."""
    if len(multi_acc) != len(single_acc):
        raise ContractError("accuracy lists differ in length")
    if not len(single_acc):
        raise ContractError("need at least one task")
    if any(s <= 0 for s in single_acc):
        raise ContractError("single-task accuracies must be positive")
    return float(sum(m / s for m, s in zip(multi_acc, single_acc)) / len(single_acc))


def negation_threshold(pretrained_control_acc: float) -> float:
    return RETENTION * pretrained_control_acc


def _method_for(taus, method):
    tags = {t.origin_tag for t in taus}
    if len(tags) != 1:
        raise ContractError(f"task vectors with mixed tags {sorted(tags)}")
    tag = tags.pop()
    if method is None:
        method = "linearized" if tag == "linearized" else "nonlinear"
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    if (method == "linearized") != (tag == "linearized"):
        raise ContractError(f"method {method!r} cannot use {tag!r} task vectors")
    return method


def edited_model(base: Model, tau: TaskVector, method: str):
    """``f(·; θ0 + τ)`` for non-linear vectors, ``f_lin(·; θ0 + τ)`` otherwise."""
    if method == "nonlinear":
        return base.with_params(apply(base.params, tau))
    return LinearizedModel(base, tau)


@dataclass(frozen=True)
class AdditionResult:
    method: str
    alpha: float
    accuracies: tuple[float, ...]          # test accuracy of the multi-task model per task
    single_accuracies: tuple[float, ...]   # test accuracy of θ0 + τ_t per task
    normalized_accuracy: float
    heldout_objective: float

    @property
    def absolute_accuracy(self) -> float:
        return float(np.mean(self.accuracies))


@dataclass(frozen=True)
class NegationResult:
    method: str
    target_task: int
    control_task: int
    alpha: float
    target_accuracy: float
    control_accuracy: float
    pretrained_target_accuracy: float
    pretrained_control_accuracy: float
    heldout_control_accuracy: float
    heldout_threshold: float
    feasible: bool


def task_addition(base: Model, taus: Sequence[TaskVector], suite: Suite,
                  grid: Sequence[float] = DEFAULT_GRID, method: str | None = None,
                  tasks: Sequence[int] | None = None) -> AdditionResult:
    """Add ``α Σ_t τ_t`` to ``θ0``, with α maximising held-out normalised accuracy."""
    tasks = list(range(len(taus))) if tasks is None else list(tasks)
    if len(tasks) != len(taus):
        raise ContractError("one task index per task vector")
    method = _method_for(taus, method)
    total = combine(list(taus), [1.0] * len(taus))

    def accs(tau, split):
        m = edited_model(base, tau, method)
        return [accuracy(m, suite.split(t, split)) for t in tasks]

    single_held = [accuracy(edited_model(base, tau, method), suite.split(t, "heldout"))
                   for tau, t in zip(taus, tasks)]
    single_test = [accuracy(edited_model(base, tau, method), suite.split(t, "test"))
                   for tau, t in zip(taus, tasks)]

    def objective(alpha):
        return normalized_addition_accuracy(accs(scale(total, alpha), "heldout"), single_held)

    best = alpha_search(objective, grid, "maximize")
    multi_test = accs(scale(total, best.alpha), "test")
    return AdditionResult(method, best.alpha, tuple(multi_test), tuple(single_test),
                          normalized_addition_accuracy(multi_test, single_test), best.score)


def task_negation(base: Model, tau_target: TaskVector, suite: Suite, target: int,
                  control: int | None = None, grid: Sequence[float] = DEFAULT_GRID,
                  method: str | None = None) -> NegationResult:
    """Subtract ``α τ_target``; α minimises held-out target accuracy while the
    control task keeps 95% of its pre-trained held-out accuracy."""
    control = suite.control if control is None else control
    if control == target:
        raise ContractError("control task must differ from the target task")
    method = _method_for([tau_target], method)
    pre_ctrl_held = accuracy(base, suite.split(control, "heldout"))
    threshold = negation_threshold(pre_ctrl_held)
    neg = negate(tau_target)

    def control_ok(alpha):
        return accuracy(edited_model(base, scale(neg, alpha), method),
                        suite.split(control, "heldout")) >= threshold

    def target_acc(alpha):
        return accuracy(edited_model(base, scale(neg, alpha), method), suite.split(target, "heldout"))

    best = alpha_search(target_acc, grid, "constrained_minimize", control_ok)
    edited = edited_model(base, scale(neg, best.alpha), method)
    return NegationResult(
        method, target, control, best.alpha,
        accuracy(edited, suite.split(target, "test")),
        accuracy(edited, suite.split(control, "test")),
        accuracy(base, suite.split(target, "test")),
        accuracy(base, suite.split(control, "test")),
        accuracy(edited, suite.split(control, "heldout")),
        threshold, best.feasible,
    )


# ---------------------------------------------------------------------------
# full pipeline for one seed


@dataclass(frozen=True)
class ExperimentSetup:
    model: ModelSpec = ModelSpec()
    suite: SuiteConfig = SuiteConfig()
    pretrain: TrainConfig = PRETRAIN_CONFIG
    finetune: TrainConfig = TrainConfig()
    grid: tuple[float, ...] = DEFAULT_GRID


@dataclass(eq=False)
class SeedRun:
    """Pre-trained model, suite and per-task fine-tuning runs for one seed."""

    seed: int
    setup: ExperimentSetup
    suite: Suite
    base: Model
    nonlinear: list = field(default_factory=list)
    linearized: list = field(default_factory=list)

    def taus(self, kind: str) -> list[TaskVector]:
        runs = self.linearized if kind == "linearized" else self.nonlinear
        return [r.tau for r in runs]


def pretrained_theta0(setup: ExperimentSetup, suite: Suite, seed: int):
    """Pre-train on the suite's coarse corpus; returns (θ0, losses)."""
    corpus = pretrain_corpus(suite.specs, seed, setup.suite.corpus_size, setup.suite.coarse_lead)
    return pretrain_run(setup.model, corpus, replace(setup.pretrain, seed=seed), head_seed=seed)


def prepare_seed(seed: int, setup: ExperimentSetup = ExperimentSetup(),
                 random_init: bool = False, modes=("nonlinear", "linearized"),
                 threads: int = 1) -> SeedRun:
    """Build the suite, obtain θ0 (pre-trained or random) and fine-tune every task.

    Fine-tuning runs are independent and each owns its RNG stream, so with
    ``threads > 1`` they run concurrently and give identical results.
    """
    suite = build_suite(replace(setup.suite, seed=seed))
    theta0 = init_params(setup.model, seed) if random_init else pretrained_theta0(setup, suite, seed)[0]
    base = make_model(setup.model, seed, theta0)
    run = SeedRun(seed, setup, suite, base)
    ft = replace(setup.finetune, seed=seed)
    jobs = [(mode, t) for mode in ("nonlinear", "linearized") if mode in modes
            for t in range(len(suite.specs))]

    def job(item):
        mode, t = item
        fn = finetune_nonlinear if mode == "nonlinear" else finetune_linearized
        return fn(base, suite.split(t, "train"), ft, suite.split(t, "test"))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]
    for (mode, _), res in zip(jobs, results):
        getattr(run, mode).append(res)
    return run


def addition_results(run: SeedRun) -> dict[str, AdditionResult]:
    out = {}
    grid = run.setup.grid
    if run.nonlinear:
        taus = run.taus("nonlinear")
        out["nonlinear"] = task_addition(run.base, taus, run.suite, grid, "nonlinear")
        out["posthoc"] = task_addition(run.base, taus, run.suite, grid, "posthoc")
    if run.linearized:
        out["linearized"] = task_addition(run.base, run.taus("linearized"), run.suite, grid,
                                          "linearized")
    return out


def negation_results(run: SeedRun) -> dict[str, list[NegationResult]]:
    out = {}
    control = run.suite.control
    targets = [t for t in range(len(run.suite.specs)) if t != control]
    grid = run.setup.grid
    for method in METHODS:
        kind = "linearized" if method == "linearized" else "nonlinear"
        taus = run.taus(kind)
        if not taus:
            continue
        out[method] = [task_negation(run.base, taus[t], run.suite, t, control, grid, method)
                       for t in targets]
    return out


def random_init_control(spec: ModelSpec, suite_cfg: SuiteConfig, cfg: TrainConfig, seed: int = 0,
                        grid: Sequence[float] = DEFAULT_GRID) -> tuple[AdditionResult, AdditionResult]:
    """Task addition from a random θ0: returns (non-linear, linearized) results."""
    setup = ExperimentSetup(model=spec, suite=suite_cfg, finetune=cfg, grid=tuple(grid))
    run = prepare_seed(seed, setup, random_init=True)
    res = addition_results(run)
    return res["nonlinear"], res["linearized"]
