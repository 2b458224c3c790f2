import numpy as np
import pytest
from scipy import ndimage

from dollkit.datagen import (CorpusConfig, generate_corpus, read_corpus, read_pgm, render_sample,
                             sample_rng, write_corpus)
from dollkit.errors import ConfigError, PlacementError

EIGHT = np.ones((3, 3), int)


@pytest.fixture(scope="module")
def small_cfg():
    return CorpusConfig(image_size=32, n_train=60, n_val=20, n_test=20, seed=7)


@pytest.fixture(scope="module")
def corpus(small_cfg):
    return generate_corpus(small_cfg)


def test_same_config_same_digest(small_cfg, corpus):
    again = generate_corpus(small_cfg)
    assert again.digest() == corpus.digest()
    assert again.gt_digest() == corpus.gt_digest()


def test_worker_count_does_not_change_corpus(small_cfg, corpus):
    assert generate_corpus(small_cfg, jobs=2).digest() == corpus.digest()


def test_different_seed_changes_digest(small_cfg, corpus):
    other = CorpusConfig(**{**small_cfg.to_dict(), "seed": 8})
    assert generate_corpus(other).digest() != corpus.digest()


def test_schema(corpus):
    for s in corpus.samples:
        assert s.labels.shape == (4,)
        assert s.gt_masks.shape == (4, 32, 32)
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_labels_match_masks_for_every_sample(corpus):
    for s in corpus.samples:
        np.testing.assert_array_equal(s.labels, s.gt_masks.reshape(4, -1).any(axis=1))


def test_splits_disjoint_and_sized(corpus):
    ids = {split: {s.id for s in corpus.split(split)} for split in ("train", "val", "test")}
    assert [len(v) for v in ids.values()] == [60, 20, 20]
    assert not (ids["train"] & ids["val"]) and not (ids["train"] & ids["test"]) and not (ids["val"] & ids["test"])


def test_label_marginals_in_range():
    cfg = CorpusConfig(image_size=16, n_train=300, n_val=1, n_test=1, seed=3)
    labels = np.stack([s.labels for s in generate_corpus(cfg).samples])
    assert np.all((labels.mean(0) >= 0.2) & (labels.mean(0) <= 0.8))


def test_all_negative_is_pure_background(small_cfg):
    s = render_sample("x", small_cfg, sample_rng(7, "x"), labels=[0, 0, 0, 0])
    assert not s.gt_masks.any()
    # background is smooth: no shape edges after the blur, only noise-level variation
    assert s.image.std() < 0.1


@pytest.mark.parametrize("c", range(4))
def test_one_positive_gives_one_connected_region(small_cfg, c):
    labels = np.eye(4, dtype=int)[c]
    for k in range(5):
        s = render_sample(f"s{k}", small_cfg, sample_rng(7, f"s{k}"), labels=labels)
        _, n = ndimage.label(s.gt_masks[c], structure=EIGHT)
        assert n == 1
        assert s.gt_masks.sum() == s.gt_masks[c].sum()


def test_noise_level_changes_image_not_masks(small_cfg):
    quiet = CorpusConfig(**{**small_cfg.to_dict(), "noise_level": 0.0})
    loud = CorpusConfig(**{**small_cfg.to_dict(), "noise_level": 0.3})
    a = render_sample("n1", quiet, sample_rng(7, "n1"))
    b = render_sample("n1", loud, sample_rng(7, "n1"))
    np.testing.assert_array_equal(a.gt_masks, b.gt_masks)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.image, b.image)


@pytest.mark.parametrize("field, value", [
    ("n_observations", 1), ("n_train", 0), ("image_size", 8), ("noise_level", 1.5),
    ("shape_palette", ("ellipse", "cube", "bar", "blob")), ("channels", 2), ("shape_scale", 5.0),
])
def test_invalid_config_names_field(field, value):
    cfg = CorpusConfig(**{field: value})
    with pytest.raises(ConfigError) as err:
        generate_corpus(cfg)
    assert field in err.value.field


def test_placement_impossible_raises():
    tiny = CorpusConfig(image_size=6)
    with pytest.raises(PlacementError):
        render_sample("t", tiny, sample_rng(0, "t"), labels=[1, 1, 1, 1])


def test_disk_round_trip(tmp_path, corpus):
    root = write_corpus(corpus, tmp_path / "c")
    assert (root / "train" / "train-00000.pgm").exists()
    assert (root / "gt" / "train-00000_3.pgm").exists()
    lines = (root / "manifest.jsonl").read_text().splitlines()
    assert lines[0].startswith('{"id":"train-00000","labels":[')
    blind = read_corpus(root)
    assert blind.samples[0].gt_masks is None
    assert blind.digest() == corpus.digest()
    full = read_corpus(root, with_gt=True)
    assert full.gt_digest() == corpus.gt_digest()


def test_pgm_header(tmp_path, corpus):
    write_corpus(corpus, tmp_path / "c")
    data = (tmp_path / "c" / "val" / "val-00000.pgm").read_bytes()
    assert data.startswith(b"P5\n32 32\n255\n")
    assert read_pgm(tmp_path / "c" / "val" / "val-00000.pgm").shape == (32, 32)


def test_three_channel_mode_replicates_plane(corpus):
    x1, _, _ = corpus.arrays("val", channels=1)
    x3, _, _ = corpus.arrays("val", channels=3)
    assert x3.shape[1] == 3
    for k in range(3):
        np.testing.assert_array_equal(x3[:, k], x1[:, 0])


def test_shape_scale_grows_areas():
    sizes = {}
    for scale in (1.0, 1.5):
        cfg = CorpusConfig(n_train=40, n_val=1, n_test=1, seed=3, shape_scale=scale)
        s = render_sample("train-00001", cfg, sample_rng(3, "train-00001"), labels=[1, 1, 1, 1])
        sizes[scale] = s.gt_masks.reshape(4, -1).sum(1)
    ratio = sizes[1.5] / sizes[1.0]
    assert np.all(ratio > 1.6) and np.all(ratio < 3.0)      # about 1.5 ** 2
