"""Empirical NTK spectra, eigenfunction local energy, and numeric checks of
when a kernel model can do task arithmetic.

Two halves:

* Gram/SVD analysis of a trained network: the rectangular Gram between the
  points of one task and the union with a control task, its right singular
  vectors as sampled eigenfunctions, and their local energy.
* Sampled function bases on a discretised domain (bumps on an interval, a
  Fourier basis on a ring) used to check the localisation condition exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, LayoutError, NumericError
from .linearize import gram_blocks
from .models import Model

MAX_GRAM_COLUMNS = 1024
PSD_TOLERANCE = 1e-8
RESIDUAL_TOLERANCE = 1e-10


# ---------------------------------------------------------------------------
# NTK Gram and eigenbasis


def gram_matrix(base: Model, rows, cols, max_cols: int = MAX_GRAM_COLUMNS) -> np.ndarray:
    """Per-class NTK between ``rows`` and ``cols``: shape ``(c, n_rows, n_cols)``."""
    cols = np.atleast_2d(np.asarray(cols, dtype=np.float64))
    if cols.shape[0] > max_cols:
        raise ContractError(f"refusing a Gram with {cols.shape[0]} columns (limit {max_cols})")
    return gram_blocks(base, rows, cols)


def psd_violation(square: np.ndarray) -> float:
    """``-min eig / trace`` of a symmetric block (<= 0 means PSD)."""
    square = np.asarray(square, dtype=np.float64)
    if square.ndim != 2 or square.shape[0] != square.shape[1]:
        raise LayoutError("PSD check needs a square matrix")
    sym = 0.5 * (square + square.T)
    tr = float(np.trace(sym))
    lo = float(np.linalg.eigvalsh(sym)[0])
    return -lo / tr if tr > 0 else (-lo if lo < 0 else 0.0)


def is_psd(square: np.ndarray, tol: float = PSD_TOLERANCE) -> bool:
    return psd_violation(square) <= tol


@dataclass(frozen=True, eq=False)
class EigenBasis:
    points: np.ndarray | None
    phi: np.ndarray          # (n_cols, k) right singular vectors as columns
    lambdas: np.ndarray      # (k,) descending
    left: np.ndarray         # (n_rows, k)
    class_index: int = 0

    @property
    def size(self) -> int:
        return self.phi.shape[1]


def eigenbasis(gram: np.ndarray, points=None, class_index: int = 0) -> EigenBasis:
    """Thin SVD of one class's rectangular Gram, with deterministic signs.

    Each right singular vector is flipped so its largest-magnitude entry is
    positive (the first such entry on ties); the left vector flips with it.
    """
    gram = np.asarray(gram, dtype=np.float64)
    if gram.ndim != 2:
        raise LayoutError("eigenbasis expects one 2-D Gram matrix")
    if not np.all(np.isfinite(gram)):
        raise NumericError("Gram matrix has non-finite entries")
    try:
        u, s, vt = np.linalg.svd(gram, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed: {exc}") from None
    pivot = np.argmax(np.abs(vt), axis=1)
    signs = np.where(vt[np.arange(vt.shape[0]), pivot] < 0, -1.0, 1.0)
    return EigenBasis(points, (vt * signs[:, None]).T, s, u * signs[None, :], class_index)


@dataclass(frozen=True, eq=False)
class SpectralReport:
    local_energy: np.ndarray     # (n_points, n_classes)
    partition: np.ndarray        # (n_points,) "train" | "control"
    classes: tuple = (0,)
    ratio: float = field(init=False)
    ratio_is_infinite: bool = field(init=False)

    def __post_init__(self):
        e = np.asarray(self.local_energy, dtype=np.float64)
        if e.ndim == 1:
            e = e[:, None]
        if e.shape[0] != len(self.partition):
            raise LayoutError("one partition label per point")
        if np.any(e < 0):
            raise ContractError("local energy must be non-negative")
        object.__setattr__(self, "local_energy", e)
        per_point = e.mean(axis=1)
        train = per_point[self.partition == "train"]
        control = per_point[self.partition == "control"]
        num = float(train.mean()) if train.size else 0.0
        den = float(control.mean()) if control.size else 0.0
        # a vanishing control energy is reported as an explicit infinity
        inf = den <= 1e-15 * max(num, 1.0)
        object.__setattr__(self, "ratio", float("inf") if inf else num / den)
        object.__setattr__(self, "ratio_is_infinite", bool(inf))

    @property
    def mean_train(self) -> float:
        return float(self.local_energy[self.partition == "train"].mean())

    @property
    def mean_control(self) -> float:
        return float(self.local_energy[self.partition == "control"].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["point_index", "partition", "class", "local_energy"])
        for i, part in enumerate(self.partition):
            for k, cls in enumerate(self.classes):
                w.writerow([i, part, cls, f"{self.local_energy[i, k]:.17g}"])
        return buf.getvalue()


def _energies(basis: EigenBasis, n_components=None, weighted: bool = False) -> np.ndarray:
    phi = basis.phi if n_components is None else basis.phi[:, :n_components]
    if not weighted:
        return (phi * phi).sum(axis=1)
    lam = basis.lambdas[:phi.shape[1]]
    return (phi * phi) @ (lam / lam.sum() if lam.sum() > 0 else lam)


def local_energy(basis: EigenBasis, partition, n_components: int | None = None,
                 weighted: bool = False) -> SpectralReport:
    """``E_loc(x_j) = Σ_ρ φ_ρ(x_j)²`` over every retained component.

    ``n_components`` keeps only the leading components and ``weighted``
    weights them by normalised singular value; both are exploratory options.
    """
    return SpectralReport(_energies(basis, n_components, weighted), np.asarray(partition),
                          (basis.class_index,))


def spectral_report(base: Model, train_points, control_points, classes=None,
                    n_components: int | None = None, weighted: bool = False) -> SpectralReport:
    """Local energy of every class's eigenbasis on ``train ∪ control``.

    Rows of the Gram are the train points, columns the union.
    """
    train_points = np.atleast_2d(train_points)
    control_points = np.atleast_2d(control_points)
    cols = np.concatenate([train_points, control_points])
    grams = gram_matrix(base, train_points, cols)
    classes = tuple(range(grams.shape[0])) if classes is None else tuple(classes)
    energy = np.stack([_energies(eigenbasis(grams[j], cols, j), n_components, weighted)
                       for j in classes], axis=1)
    partition = np.array(["train"] * len(train_points) + ["control"] * len(control_points))
    return SpectralReport(energy, partition, classes)


# ---------------------------------------------------------------------------
# sampled bases on discretised domains


@dataclass(frozen=True, eq=False)
class SampledBasis:
    """Atoms sampled on a grid: ``values[i, ρ] = φ_ρ(x_i)``.

    ``masks[t]`` marks the grid points of domain ``t`` and ``weights`` are the
    quadrature weights. ``owner[ρ]`` is the domain an atom is confined to, or
    -1 for global atoms.
    """

    points: np.ndarray
    weights: np.ndarray
    masks: np.ndarray
    values: np.ndarray
    owner: np.ndarray

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ContractError("quadrature weights must be positive")
        if np.any(self.masks.sum(axis=0) > 1):
            raise ContractError("domain masks overlap")

    def gram(self, mask=None) -> np.ndarray:
        """Weighted inner products of the atoms, optionally restricted to a mask."""
        w = self.weights if mask is None else self.weights * mask
        return self.values.T @ (w[:, None] * self.values)


@dataclass(frozen=True, eq=False)
class TaskCoefficients:
    coeffs: np.ndarray   # (T, n_atoms)

    def __post_init__(self):
        if np.asarray(self.coeffs).ndim != 2:
            raise LayoutError("coefficients must be (tasks, atoms)")


def _weighted_orthonormalize(values, weights):
    sw = np.sqrt(weights)[:, None]
    q, r = np.linalg.qr(sw * values)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q / sw


def interval_domains(n_points: int = 400,
                     domains=((0.05, 0.30), (0.40, 0.65), (0.75, 0.95))):
    """Uniform midpoint grid on [0, 1) with one mask per closed sub-interval."""
    x = (np.arange(n_points) + 0.5) / n_points
    masks = np.array([(x >= a) & (x <= b) for a, b in domains])
    return x, np.full(n_points, 1.0 / n_points), masks


def make_bump_basis(domains=((0.05, 0.30), (0.40, 0.65), (0.75, 0.95)), per_domain: int = 4,
                    n_points: int = 400) -> SampledBasis:
    """Sine bumps vanishing outside each domain, orthonormal on the grid."""
    if per_domain < 1:
        raise ContractError("per_domain must be >= 1")
    x, w, masks = interval_domains(n_points, domains)
    cols, owner = [], []
    for t, (a, b) in enumerate(domains):
        inside = masks[t] & (x > a) & (x < b)
        if inside.sum() < per_domain:
            raise ContractError(f"domain {t} has too few grid points")
        block = np.zeros((len(x), per_domain))
        for k in range(per_domain):
            block[inside, k] = np.sin((k + 1) * np.pi * (x[inside] - a) / (b - a))
        block[inside] = _weighted_orthonormalize(block[inside], w[inside])
        cols.append(block)
        owner += [t] * per_domain
    return SampledBasis(x, w, masks, np.concatenate(cols, axis=1), np.array(owner))


def ring_arcs(n_points: int, arcs=((0.0, 0.8 * np.pi), (np.pi, 1.8 * np.pi))):
    theta = 2.0 * np.pi * np.arange(n_points) / n_points
    masks = np.array([(theta >= a) & (theta < b) for a, b in arcs])
    return theta, np.full(n_points, 2.0 * np.pi / n_points), masks


def make_fourier_ring_basis(n_points: int = 256, n_freqs: int = 3,
                            arcs=((0.0, 0.8 * np.pi), (np.pi, 1.8 * np.pi))) -> SampledBasis:
    """Constant plus ``cos kθ, sin kθ`` for k ≤ n_freqs, orthonormal on the ring grid."""
    if n_freqs < 1:
        raise ContractError("n_freqs must be >= 1")
    if 2 * n_freqs >= n_points:
        raise ContractError("n_freqs must stay below the Nyquist limit of the grid")
    theta, w, masks = ring_arcs(n_points, arcs)
    cols = [np.full(n_points, 1.0 / np.sqrt(2.0 * np.pi))]
    for k in range(1, n_freqs + 1):
        cols += [np.cos(k * theta) / np.sqrt(np.pi), np.sin(k * theta) / np.sqrt(np.pi)]
    values = np.stack(cols, axis=1)
    return SampledBasis(theta, w, masks, values, np.full(values.shape[1], -1))


def random_coefficients(basis: SampledBasis, seed: int = 0) -> TaskCoefficients:
    """Seeded non-trivial coefficients; confined atoms only serve their own task."""
    rng = np.random.default_rng([seed, 0xC0EF])
    T, R = basis.masks.shape[0], basis.values.shape[1]
    c = rng.standard_normal((T, R))
    confined = basis.owner >= 0
    for t in range(T):
        c[t, confined & (basis.owner != t)] = 0.0
    return TaskCoefficients(c)


def task_functions(basis: SampledBasis, coeffs: TaskCoefficients) -> np.ndarray:
    """``f_t(x_i) = Σ_ρ c_{t,ρ} φ_ρ(x_i)`` as a ``(T, n_points)`` array."""
    c = np.asarray(coeffs.coeffs, dtype=np.float64)
    if c.shape[1] != basis.values.shape[1]:
        raise LayoutError("coefficient length does not match the basis size")
    return c @ basis.values.T


def proposition1_residual(basis: SampledBasis, coeffs: TaskCoefficients) -> np.ndarray:
    """Quadrature of ``(Σ_{t≠t'} f_t)²`` over each domain ``t'``."""
    f = task_functions(basis, coeffs)
    if f.shape[0] != basis.masks.shape[0]:
        raise LayoutError("one coefficient row per domain")
    total = f.sum(axis=0)
    out = np.empty(f.shape[0])
    for t in range(f.shape[0]):
        others = total - f[t]
        out[t] = float(np.sum(basis.weights * basis.masks[t] * others ** 2))
    return out


def task_norms(basis: SampledBasis, coeffs: TaskCoefficients) -> np.ndarray:
    """Quadrature of ``f_t²`` over domain ``t``."""
    f = task_functions(basis, coeffs)
    return np.array([np.sum(basis.weights * basis.masks[t] * f[t] ** 2) for t in range(len(f))])


def arithmetic_violation(basis: SampledBasis, coeffs: TaskCoefficients, alphas) -> float:
    """Largest pointwise gap of the task arithmetic equality for a kernel model.

    With ``f(·; θ0) = 0`` the combined function ``Σ_t α_t f_t`` must equal
    ``α_t f_t`` on domain ``t`` and vanish off every domain.
    """
    f = task_functions(basis, coeffs)
    alphas = np.asarray(alphas, dtype=np.float64)
    combined = alphas @ f
    expected = np.zeros_like(combined)
    for t in range(len(f)):
        expected[basis.masks[t]] = alphas[t] * f[t, basis.masks[t]]
    return float(np.max(np.abs(combined - expected)))


def restricted_min_singular_value(basis: SampledBasis, mask) -> float:
    """Smallest singular value of the atoms' Gram restricted to ``mask``.

    Positive means the atoms that do not vanish there are linearly independent on it.
    """
    active = np.any(np.abs(basis.values[mask]) > 0, axis=0)
    g = basis.gram(mask)[np.ix_(active, active)]
    return float(np.linalg.svd(g, compute_uv=False)[-1])


@dataclass(frozen=True)
class SpectralCheck:
    basis: str
    residuals: tuple
    relative_residual: float
    violation: float
    min_restricted_sv: float
    arithmetic_holds: bool
    expected: bool

    @property
    def ok(self) -> bool:
        return self.arithmetic_holds == self.expected

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantity", "value"])
        for i, r in enumerate(self.residuals):
            w.writerow([f"residual_{i}", f"{r:.17g}"])
        w.writerow(["relative_residual", f"{self.relative_residual:.17g}"])
        w.writerow(["pointwise_violation", f"{self.violation:.17g}"])
        w.writerow(["min_restricted_singular_value", f"{self.min_restricted_sv:.17g}"])
        w.writerow(["arithmetic_holds", int(self.arithmetic_holds)])
        w.writerow(["expected", int(self.expected)])
        return buf.getvalue()


def verify_basis(kind: str, seed: int = 0) -> SpectralCheck:
    """Run the residual and pointwise checks for ``bump`` or ``fourier``.

    Bumps are localised and must pass; Fourier atoms are global yet locally
    independent on each arc and must fail.
    """
    if kind == "bump":
        basis, expected = make_bump_basis(), True
    elif kind == "fourier":
        basis, expected = make_fourier_ring_basis(), False
    else:
        raise ContractError(f"unknown basis {kind!r}")
    coeffs = random_coefficients(basis, seed)
    res = proposition1_residual(basis, coeffs)
    rel = float(np.max(res / task_norms(basis, coeffs)))
    alphas = np.random.default_rng([seed, 0xA1FA]).uniform(-3.0, 3.0, basis.masks.shape[0])
    viol = arithmetic_violation(basis, coeffs, alphas)
    min_sv = min(restricted_min_singular_value(basis, m) for m in basis.masks)
    holds = bool(np.max(res) <= RESIDUAL_TOLERANCE and viol <= RESIDUAL_TOLERANCE)
    return SpectralCheck(kind, tuple(float(r) for r in res), rel, viol, min_sv, holds, expected)
