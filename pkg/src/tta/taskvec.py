"""Task vectors and the scalar mixing-coefficient search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError, LayoutError, ParamVector, check_same_layout

ORIGIN_TAGS = ("nonlinear", "linearized", "random")
DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass(frozen=True, eq=False)
class TaskVector(ParamVector):
    """``theta_star - theta0`` with a provenance tag."""

    origin_tag: str = "nonlinear"

    def __post_init__(self):
        super().__post_init__()
        if self.origin_tag not in ORIGIN_TAGS:
            raise ContractError(f"unknown origin tag {self.origin_tag!r}")

    @classmethod
    def zeros(cls, layout, origin_tag: str = "nonlinear") -> "TaskVector":
        return cls(layout, np.zeros(layout.total_len), origin_tag)

    def with_values(self, values) -> "TaskVector":
        return TaskVector(self.layout, values, self.origin_tag)

    def __repr__(self) -> str:
        return f"TaskVector(len={len(self)}, tag={self.origin_tag}, norm={np.linalg.norm(self.values):.4g})"


@dataclass(frozen=True)
class MixingConfig:
    alphas: tuple[float, ...] = ()
    search_grid: tuple[float, ...] = DEFAULT_GRID

    def __post_init__(self):
        grid = tuple(float(a) for a in self.search_grid)
        if not grid:
            raise ContractError("search grid must be non-empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ContractError("search grid must be strictly increasing")
        object.__setattr__(self, "search_grid", grid)
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))


def make_task_vector(theta_star: ParamVector, theta0: ParamVector,
                     origin_tag: str = "nonlinear") -> TaskVector:
    check_same_layout(theta_star, theta0)
    return TaskVector(theta0.layout, theta_star.values - theta0.values, origin_tag)


def combine(taus: Sequence[TaskVector], alphas: Sequence[float]) -> TaskVector:
    """``sum_t alpha_t * tau_t``. All vectors must share a layout and a tag."""
    if len(taus) != len(alphas):
        raise ContractError(f"{len(taus)} task vectors but {len(alphas)} coefficients")
    if not taus:
        raise ContractError("combine needs at least one task vector")
    tags = {getattr(t, "origin_tag", None) for t in taus}
    if len(tags) > 1:
        raise ContractError(f"cannot mix task vectors with tags {sorted(map(str, tags))}")
    for t in taus[1:]:
        check_same_layout(taus[0], t)
    # fixed left-to-right accumulation so equal inputs give equal bits
    total = np.zeros(len(taus[0]))
    for tau, a in zip(taus, alphas):
        total = total + float(a) * tau.values
    tag = getattr(taus[0], "origin_tag", "nonlinear")
    return TaskVector(taus[0].layout, total, tag)


def negate(tau: TaskVector) -> TaskVector:
    return tau.with_values(-tau.values)


def scale(tau: TaskVector, alpha: float) -> TaskVector:
    return tau.with_values(float(alpha) * tau.values)


def apply(theta0: ParamVector, tau: ParamVector) -> ParamVector:
    """``theta0 + tau`` on ``theta0``'s layout."""
    if theta0.layout != tau.layout:
        raise LayoutError("task vector layout does not match the base parameters")
    return ParamVector(theta0.layout, theta0.values + tau.values)


@dataclass(frozen=True)
class SearchResult:
    alpha: float
    score: float
    feasible: bool
    scores: dict

    def __iter__(self):
        # allows ``alpha, score = alpha_search(...)``
        return iter((self.alpha, self.score))


class AlphaEvaluationError(RuntimeError):
    def __init__(self, alpha, cause):
        super().__init__(f"evaluation failed at alpha={alpha}: {cause}")
        self.alpha = alpha


def alpha_search(evaluate: Callable[[float], float], grid: Sequence[float] = DEFAULT_GRID,
                 mode: str = "maximize",
                 constraint: Callable[[float], bool] | None = None) -> SearchResult:
    """Best grid value of ``evaluate``; ties resolve to the smallest alpha.

    ``mode="maximize"`` picks the highest score among feasible alphas;
    ``"constrained_minimize"`` the lowest. ``alpha=0`` is the do-nothing
    fallback: when a constraint is given and no non-zero alpha passes it, the
    result is ``alpha=0`` with ``feasible=False``.
    """
    if mode not in ("maximize", "constrained_minimize"):
        raise ContractError(f"unknown search mode {mode!r}")
    grid = sorted(float(a) for a in grid)
    if not grid:
        raise ContractError("grid must be non-empty")

    def _eval(a):
        try:
            return float(evaluate(a))
        except Exception as exc:
            raise AlphaEvaluationError(a, exc) from exc

    def _ok(a):
        try:
            return True if constraint is None else bool(constraint(a))
        except Exception as exc:
            raise AlphaEvaluationError(a, exc) from exc

    scores, best = {}, None
    for a in grid:
        if not _ok(a):
            continue
        s = _eval(a)
        scores[a] = s
        if (best is None or (mode == "maximize" and s > best[1])
                or (mode == "constrained_minimize" and s < best[1])):
            best = (a, s)
    nontrivial = any(a != 0.0 for a in scores)
    if best is None or (constraint is not None and not nontrivial):
        s0 = scores.get(0.0)
        if s0 is None:
            s0 = _eval(0.0)
        return SearchResult(0.0, s0, False, scores)
    return SearchResult(best[0], best[1], True, scores)
