"""Synthetic multi-task suites on pairwise-disjoint boxes.

Each task lives in its own axis-aligned box inside ``[-1, 1]^d``. Inputs are
drawn from a mixture of Gaussian clusters truncated to the box, and the label
of a point is the class of its nearest cluster centre.
"""

from __future__ import annotations

import itertools
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, LayoutError
from .models import predict


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.all((X >= np.asarray(self.lo)) & (X <= np.asarray(self.hi)), axis=1)

    def intersects(self, other: "Box") -> bool:
        # closed boxes intersect iff every axis interval overlaps
        return all(a_lo <= b_hi and b_lo <= a_hi
                   for a_lo, a_hi, b_lo, b_hi in zip(self.lo, self.hi, other.lo, other.hi))

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=np.float64)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))


@dataclass(frozen=True)
class SuiteConfig:
    num_tasks: int = 4
    points_per_task: int = 512
    test_points: int = 512
    input_dim: int = 2
    num_classes: int = 8
    classes_per_task: int = 2
    clusters_per_class: int = 1
    cluster_std: float = 0.12
    box_side: float = 0.8
    heldout_fraction: float = 0.1
    corpus_size: int = 4096
    coarse_lead: float = 0.9
    control_task_id: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_tasks < 2:
            raise ConfigError("num_tasks must be >= 2")
        if self.points_per_task < 64:
            raise ConfigError("points_per_task must be >= 64")
        if self.classes_per_task < 2:
            raise ConfigError("classes_per_task must be >= 2")
        if self.classes_per_task > self.num_classes:
            raise ConfigError("classes_per_task exceeds num_classes")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must lie in (0, 1)")
        if not 0.0 < self.box_side <= 2.0:
            raise ConfigError("box_side must lie in (0, 2]")
        if not 0.0 < self.coarse_lead <= 1.0:
            raise ConfigError("coarse_lead must lie in (0, 1]")
        if self.control_task_id is not None and not 0 <= self.control_task_id < self.num_tasks:
            raise ConfigError("control_task_id out of range")

    @property
    def control(self) -> int:
        return self.num_tasks - 1 if self.control_task_id is None else self.control_task_id


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """Support box, truncated cluster sampler and nearest-centre labelling rule."""

    id: str
    index: int
    domain: Box
    centers: np.ndarray          # (k, d)
    center_classes: np.ndarray   # (k,) class index of each centre
    class_subset: tuple[int, ...]
    std: float

    def contains(self, X) -> np.ndarray:
        return self.domain.contains(X)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = self.centers.shape[1]
        out = np.empty((0, d))
        while out.shape[0] < n:
            m = 2 * (n - out.shape[0]) + 16
            which = rng.integers(0, len(self.centers), size=m)
            pts = self.centers[which] + self.std * rng.standard_normal((m, d))
            out = np.concatenate([out, pts[self.domain.contains(pts)]])
        return out[:n]

    def target(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if not np.all(self.contains(X)):
            raise ContractError(f"{self.id}: target is defined on the task support only")
        d2 = ((X[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return self.center_classes[np.argmin(d2, axis=1)]


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str
    seed: int
    task_id: str = ""
    targets: np.ndarray | None = None

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise LayoutError("inputs and labels differ in length")
        if self.split not in ("train", "heldout", "test", "pretrain"):
            raise ContractError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split, self.seed,
                       self.task_id, None if self.targets is None else self.targets[idx])


@dataclass(frozen=True, eq=False)
class Suite:
    cfg: SuiteConfig
    specs: list
    data: dict = field(repr=False)   # task index -> {"train", "heldout", "test"}

    @property
    def control(self) -> int:
        return self.cfg.control

    def split(self, t: int, name: str) -> Dataset:
        return self.data[t][name]


def _task_stream(seed: int, task: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, task, purpose])


def gen_disjoint_suite(cfg: SuiteConfig) -> list[TaskSpec]:
    """Place ``T`` boxes on a lattice of cells tiling ``[-1, 1]^d``.

    Boxes of side ``box_side`` sit centred in cells of side ``2/g`` with
    ``g = floor(2 / box_side)`` cells per axis, so neighbouring boxes are
    separated by a gap of ``2/g - box_side`` (positive unless ``2/box_side``
    is an integer).
    """
    d = cfg.input_dim
    g = int(np.floor(2.0 / cfg.box_side + 1e-12))
    if g ** d < cfg.num_tasks:
        raise ConfigError(
            f"cannot pack {cfg.num_tasks} boxes of side {cfg.box_side} into [-1, 1]^{d}")
    cell = 2.0 / g
    if cell - cfg.box_side <= 1e-12:
        raise ConfigError("box_side leaves no gap between neighbouring boxes")
    k = cfg.classes_per_task
    specs = []
    for t, idx in zip(range(cfg.num_tasks), itertools.product(range(g), repeat=d)):
        centre = -1.0 + cell * (np.asarray(idx[::-1], dtype=np.float64) + 0.5)
        lo, hi = centre - cfg.box_side / 2, centre + cfg.box_side / 2
        rng = _task_stream(cfg.seed, t, 0)
        margin = 0.2 * cfg.box_side
        m = k * cfg.clusters_per_class
        centers = rng.uniform(lo + margin, hi - margin, size=(m, d))
        subset = tuple(int((t * k + i) % cfg.num_classes) for i in range(k))
        center_classes = np.array([subset[i % k] for i in range(m)], dtype=np.int64)
        specs.append(TaskSpec(f"task{t}", t, Box(tuple(lo), tuple(hi)), centers,
                              center_classes, subset, cfg.cluster_std))
    for a, b in itertools.combinations(specs, 2):
        if a.domain.intersects(b.domain):
            raise ConfigError(f"{a.id} and {b.id} overlap")
    return specs


def make_splits(spec: TaskSpec, cfg: SuiteConfig) -> dict[str, Dataset]:
    """Train/held-out/test datasets for one task; held-out is carved from train."""
    rng_train = _task_stream(cfg.seed, spec.index, 1)
    rng_test = _task_stream(cfg.seed, spec.index, 2)
    rng_split = _task_stream(cfg.seed, spec.index, 3)
    X = spec.sample(cfg.points_per_task, rng_train)
    Xt = spec.sample(cfg.test_points, rng_test)
    full = Dataset(X, spec.target(X), "train", cfg.seed, spec.id)
    perm = rng_split.permutation(len(full))
    n_held = max(1, int(round(cfg.heldout_fraction * len(full))))
    return {
        "train": full.subset(np.sort(perm[n_held:]), "train"),
        "heldout": full.subset(np.sort(perm[:n_held]), "heldout"),
        "test": Dataset(Xt, spec.target(Xt), "test", cfg.seed, spec.id),
    }


def build_suite(cfg: SuiteConfig) -> Suite:
    specs = gen_disjoint_suite(cfg)
    return Suite(cfg, specs, {s.index: make_splits(s, cfg) for s in specs})


def pretrain_corpus(specs, seed: int, size: int = 4096, lead: float = 0.9) -> Dataset:
    """Uniform mixture over the task supports with coarse (task-level) labels.

    A point from task ``t`` is labelled with the first class of ``t``'s subset
    with probability ``lead`` and otherwise with a uniformly drawn other class
    of the subset. The corpus thus tells regions apart and leaves a moderate
    margin inside each region. The stream is keyed away from every
    fine-tuning split.
    """
    rng = np.random.default_rng([seed, 0xC0A25E])
    which = rng.integers(0, len(specs), size=size)
    d = specs[0].centers.shape[1]
    X = np.empty((size, d))
    for t, spec in enumerate(specs):
        idx = np.flatnonzero(which == t)
        X[idx] = spec.sample(len(idx), rng)
    k = len(specs[0].class_subset)
    pick = np.where(rng.random(size) < lead, 0, rng.integers(1, k, size=size))
    labels = np.array([specs[t].class_subset[i] for t, i in zip(which, pick)], dtype=np.int64)
    return Dataset(X, labels, "pretrain", seed, "corpus")


def accuracy(model_like, dataset: Dataset) -> float:
    """Fraction of points whose predicted class equals the label."""
    if len(dataset) == 0:
        raise ContractError("accuracy of an empty dataset")
    return float(np.mean(predict(model_like, dataset.inputs) == dataset.labels))


def one_hot(labels, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# optional external image data

IMAGE_MAGIC = b"IMG0"
LABEL_MAGIC = b"LBL0"


def write_image_files(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(IMAGE_MAGIC + struct.pack("<III", n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(
        LABEL_MAGIC + struct.pack("<I", n) + np.asarray(labels, dtype=np.uint8).tobytes())


def load_image_dataset(images_path, labels_path, split: str = "train", seed: int = 0) -> Dataset:
    """Read raw 8-bit images (``IMG0`` header) and labels (``LBL0`` header).

    Images are flattened row-major and scaled to ``[0, 1]``.
    """
    raw = Path(images_path).read_bytes()
    if len(raw) < 16 or raw[:4] != IMAGE_MAGIC:
        raise ContractError(f"{images_path}: not an IMG0 file")
    n, h, w = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + n * h * w:
        raise ContractError(f"{images_path}: expected {n * h * w} pixel bytes, got {len(raw) - 16}")
    lab = Path(labels_path).read_bytes()
    if len(lab) < 8 or lab[:4] != LABEL_MAGIC:
        raise ContractError(f"{labels_path}: not an LBL0 file")
    (m,) = struct.unpack("<I", lab[4:8])
    if m != n or len(lab) != 8 + m:
        raise ContractError(f"{labels_path}: label count does not match {n} images")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h * w)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, split, seed,
                   f"images-{zlib.crc32(raw) & 0xFFFFFFFF:08x}")
