import itertools

import numpy as np
import pytest

from tta.autodiff import ContractError
from tta.models import ModelSpec, make_model
from tta.tasks import (ConfigError, Box, Dataset, SuiteConfig, accuracy, build_suite,
                       gen_disjoint_suite, load_image_dataset, pretrain_corpus, write_image_files)


def test_two_boxes_are_disjoint():
    a, b = gen_disjoint_suite(SuiteConfig(num_tasks=2))
    assert not a.domain.intersects(b.domain)
    gaps = [max(bl - ah, al - bh) for al, ah, bl, bh in zip(a.domain.lo, a.domain.hi, b.domain.lo, b.domain.hi)]
    assert max(gaps) > 0


def test_every_split_point_lies_in_its_box():
    suite = build_suite(SuiteConfig())
    for spec in suite.specs:
        for name in ("train", "heldout", "test"):
            assert np.all(spec.contains(suite.split(spec.index, name).inputs))


def test_min_box_distance_by_corner_enumeration():
    specs = gen_disjoint_suite(SuiteConfig())
    for a, b in itertools.combinations(specs, 2):
        # distance between axis-aligned boxes: per-axis gap, checked against corner pairs
        gap = np.sqrt(sum(max(0.0, bl - ah, al - bh) ** 2
                          for al, ah, bl, bh in zip(a.domain.lo, a.domain.hi, b.domain.lo, b.domain.hi)))
        corner = min(np.linalg.norm(p - q) for p in a.domain.corners() for q in b.domain.corners())
        assert gap > 0 and corner >= gap - 1e-12


def test_corpus_partitions_supports():
    specs = build_suite(SuiteConfig()).specs
    corpus = pretrain_corpus(specs, 0, 10_000)
    membership = np.stack([s.contains(corpus.inputs) for s in specs])
    assert np.all(membership.sum(axis=0) == 1)


def test_corpus_regions_are_balanced_and_lead_class_dominates():
    specs = build_suite(SuiteConfig()).specs
    corpus = pretrain_corpus(specs, 0, 10_000, lead=0.9)
    region = np.argmax(np.stack([s.contains(corpus.inputs) for s in specs]), axis=0)
    counts = np.bincount(region, minlength=len(specs))
    assert np.all(np.abs(counts - 2500) <= 0.2 * 2500)
    for s in specs:
        labels = corpus.labels[region == s.index]
        assert set(labels) <= set(s.class_subset)
        assert abs(np.mean(labels == s.class_subset[0]) - 0.9) < 0.03


def test_seed_changes_samples_not_support():
    a, b = build_suite(SuiteConfig(seed=0)), build_suite(SuiteConfig(seed=1))
    assert not np.array_equal(a.split(0, "train").inputs, b.split(0, "train").inputs)
    assert a.specs[0].domain == b.specs[0].domain


def test_identical_config_is_bit_identical():
    a, b = build_suite(SuiteConfig(seed=3)), build_suite(SuiteConfig(seed=3))
    for t in range(4):
        for name in ("train", "heldout", "test"):
            assert np.array_equal(a.split(t, name).inputs, b.split(t, name).inputs)
            assert np.array_equal(a.split(t, name).labels, b.split(t, name).labels)


def test_heldout_is_ten_percent_of_train():
    suite = build_suite(SuiteConfig())
    n_train, n_held = len(suite.split(0, "train")), len(suite.split(0, "heldout"))
    assert n_held == round(0.1 * 512) and n_train + n_held == 512


def test_accuracy_of_own_predictions_and_complement():
    m = make_model(ModelSpec(), 0)
    X = np.random.default_rng(0).uniform(-1, 1, (100, 2))
    pred = m.predict(X)
    assert accuracy(m, Dataset(X, pred, "test", 0)) == 1.0
    assert accuracy(m, Dataset(X, (pred + 1) % 8, "test", 0)) == 0.0


def test_random_model_accuracy_near_chance():
    rng = np.random.default_rng(0)
    accs = []
    for s in range(20):
        m = make_model(ModelSpec(), 100 + s)
        X = rng.uniform(-1, 1, (400, 2))
        accs.append(accuracy(m, Dataset(X, rng.integers(0, 8, 400), "test", s)))
    sigma = np.sqrt((1 / 8) * (7 / 8) / (400 * 20))
    assert abs(np.mean(accs) - 1 / 8) <= 3 * sigma


def test_config_validation():
    with pytest.raises(ConfigError):
        SuiteConfig(num_tasks=1)
    with pytest.raises(ConfigError):
        gen_disjoint_suite(SuiteConfig(num_tasks=5, box_side=0.8))
    with pytest.raises(ConfigError):
        SuiteConfig(coarse_lead=0.0)
    spec = build_suite(SuiteConfig()).specs[0]
    with pytest.raises(ContractError):
        spec.target(np.array([[5.0, 5.0]]))


def test_box_corners_and_volume():
    b = Box((0.0, 0.0), (1.0, 2.0))
    assert b.volume == 2.0 and len(b.corners()) == 4


def test_image_loader_roundtrip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (5, 28, 28)).astype(np.uint8)
    labels = np.arange(5)
    write_image_files(imgs, labels, tmp_path / "i.bin", tmp_path / "l.bin")
    ds = load_image_dataset(tmp_path / "i.bin", tmp_path / "l.bin")
    assert ds.inputs.shape == (5, 784) and np.array_equal(ds.labels, labels)
    np.testing.assert_allclose(ds.inputs[0], imgs[0].ravel() / 255.0)
    (tmp_path / "l.bin").write_bytes(b"LBL0" + (4).to_bytes(4, "little") + bytes(4))
    with pytest.raises(ContractError):
        load_image_dataset(tmp_path / "i.bin", tmp_path / "l.bin")
