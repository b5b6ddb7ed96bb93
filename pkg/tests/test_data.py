import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from advmix.config import DatasetSpec
from advmix.data import (
    CIFAR_PIXELS,
    LabeledImage,
    MixBatch,
    batch_iterator,
    load_cifar_binary,
    make_synthetic,
    sample_mix_ratios,
    save_cifar_binary,
    stack,
)

# ------------------------------------------------------------------- CIFAR


def test_cifar_single_white_record(tmp_path):
    path = tmp_path / "one.bin"
    path.write_bytes(bytes([5]) + bytes([255]) * CIFAR_PIXELS)
    images = load_cifar_binary(path, num_classes=10)
    assert len(images) == 1
    assert images[0].label == 5
    assert images[0].pixels.shape == (3, 32, 32)
    assert np.all(images[0].pixels == 1.0)


def test_cifar_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert load_cifar_binary(path, num_classes=10) == []


@pytest.mark.parametrize("coarse", [False, True])
def test_cifar_round_trip_is_byte_identical(tmp_path, coarse):
    rng = np.random.default_rng(7)
    head = 2 if coarse else 1
    raw = rng.integers(0, 256, size=(3, head + CIFAR_PIXELS), dtype=np.uint8)
    raw[:, head - 1] = [0, 4, 9]
    src = tmp_path / "src.bin"
    src.write_bytes(raw.tobytes())
    images = load_cifar_binary(src, num_classes=10, coarse=coarse)
    assert [im.label for im in images] == [0, 4, 9]
    out = tmp_path / "out.bin"
    save_cifar_binary(out, images, coarse_labels=raw[:, 0] if coarse else None)
    assert out.read_bytes() == src.read_bytes()


def test_cifar_truncated_reports_offset(tmp_path):
    path = tmp_path / "trunc.bin"
    path.write_bytes(bytes(2 * (1 + CIFAR_PIXELS) + 10))
    with pytest.raises(ValueError, match=f"byte offset {2 * (1 + CIFAR_PIXELS)}"):
        load_cifar_binary(path, num_classes=10)


def test_cifar_label_out_of_range_reports_offset(tmp_path):
    record = 1 + CIFAR_PIXELS
    blob = bytearray(2 * record)
    blob[record] = 12
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match=f"byte offset {record}"):
        load_cifar_binary(path, num_classes=10)


def test_stack_empty_and_nonempty():
    x, y = stack([])
    assert x.shape[0] == 0 and y.shape == (0,)
    x, y = stack([LabeledImage(np.zeros((3, 2, 2)), 1), LabeledImage(np.ones((3, 2, 2)), 0)])
    assert x.shape == (2, 3, 2, 2) and list(y) == [1, 0]


# --------------------------------------------------------------- synthetic


def test_synthetic_is_deterministic():
    spec = DatasetSpec(num_classes=3, n_train=300, n_test=300, seed=11)
    (a, ya), (b, yb) = make_synthetic(spec)
    (c, yc), (d, yd) = make_synthetic(spec)
    assert np.array_equal(a, c) and np.array_equal(b, d)
    assert np.array_equal(ya, yc) and np.array_equal(yb, yd)
    assert a.shape == (300, 3, 16, 16) and b.shape == (300, 3, 16, 16)
    assert a.min() >= 0 and a.max() <= 1


def test_synthetic_noise_free_images_match_within_class():
    (x, y), _ = make_synthetic(DatasetSpec(noise=0.0, n_train=30, n_test=3))
    for k in range(3):
        members = x[y == k]
        assert len(members) == 10
        assert np.all(members == members[0])


def test_synthetic_classes_are_separable():
    (x, y), (xt, yt) = make_synthetic(DatasetSpec())
    centroids = np.stack([x[y == k].mean(axis=0) for k in range(3)])
    dist = ((xt[:, None] - centroids[None]) ** 2).sum(axis=(2, 3, 4))
    assert np.mean(dist.argmin(axis=1) == yt) > 0.9


def test_synthetic_needs_two_classes():
    with pytest.raises(ValueError):
        make_synthetic(DatasetSpec(num_classes=1))


# -------------------------------------------------------------- mix ratios


def test_single_image_ratio():
    assert sample_mix_ratios(1, 1.0, np.random.default_rng(0)).tolist() == [1.0]


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.floats(0.05, 20.0), st.integers(0, 2**32 - 1))
def test_ratios_on_simplex(n, conc, seed):
    lam = sample_mix_ratios(n, conc, np.random.default_rng(seed))
    assert lam.shape == (n,)
    assert np.all(lam >= 0)
    assert abs(lam.sum() - 1.0) < 1e-9


def test_ratios_reject_nonpositive_concentration():
    with pytest.raises(ValueError):
        sample_mix_ratios(3, 0.0, np.random.default_rng(0))


def test_two_way_marginal_is_uniform():
    rng = np.random.default_rng(2024)
    first = np.array([sample_mix_ratios(2, 1.0, rng)[0] for _ in range(10_000)])
    assert stats.kstest(first, "uniform").pvalue > 0.01


def test_mix_batch_validates_simplex():
    with pytest.raises(ValueError):
        MixBatch(np.zeros((2, 1, 2, 2)), np.eye(2), np.array([0.7, 0.7]))


# --------------------------------------------------------------- iterator


def _data(n, size=4):
    rng = np.random.default_rng(0)
    return rng.uniform(size=(n, 1, size, size)), rng.integers(0, 3, size=n)


def test_set_count_is_floor_division():
    x, y = _data(6)
    (batch,) = list(batch_iterator(x, y, 6, 3, 1.0))
    assert batch.n_sets == 2
    assert batch.groups.shape == (2, 3)
    assert batch.ratios.shape == (2, 3)


def test_iterator_rejects_batch_smaller_than_set():
    x, y = _data(6)
    with pytest.raises(ValueError):
        list(batch_iterator(x, y, 2, 3, 1.0))


@pytest.mark.parametrize("augment", [False, True])
def test_iterator_is_deterministic(augment):
    x, y = _data(40)
    a = list(batch_iterator(x, y, 8, 2, 1.0, seed=3, epoch=1, flip=augment, crop=augment))
    b = list(batch_iterator(x, y, 8, 2, 1.0, seed=3, epoch=1, flip=augment, crop=augment))
    for u, v in zip(a, b):
        assert np.array_equal(u.images, v.images)
        assert np.array_equal(u.index, v.index)
        assert np.array_equal(u.ratios, v.ratios)


def test_epochs_reshuffle():
    x, y = _data(40)
    a = next(batch_iterator(x, y, 40, 2, 1.0, seed=3, epoch=0))
    b = next(batch_iterator(x, y, 40, 2, 1.0, seed=3, epoch=1))
    assert not np.array_equal(a.index, b.index)


def test_epoch_covers_each_image_once():
    x, y = _data(1000)
    batches = list(batch_iterator(x, y, 100, 2, 1.0, seed=5))
    assert len(batches) == 10
    assert all(b.n_sets == 50 for b in batches)
    seen = np.concatenate([b.index for b in batches])
    assert np.array_equal(np.sort(seen), np.arange(1000))
    for b in batches:
        assert np.array_equal(b.images, x[b.index])
        assert np.array_equal(b.labels, y[b.index])
        assert np.array_equal(np.sort(b.groups.ravel()), np.arange(100))


def test_short_trailing_batch_is_kept():
    x, y = _data(25)
    batches = list(batch_iterator(x, y, 10, 3, 1.0))
    assert [len(b.index) for b in batches] == [10, 10, 5]
    assert [b.n_sets for b in batches] == [3, 3, 1]


def test_crop_and_flip_preserve_shape_and_range():
    x, y = _data(16, size=8)
    for b in batch_iterator(x, y, 8, 2, 1.0, flip=True, crop=True, padding=2):
        assert b.images.shape == (8, 1, 8, 8)
        assert b.images.min() >= 0 and b.images.max() <= 1


def test_mix_batches_one_hot():
    x, y = _data(6)
    (batch,) = list(batch_iterator(x, y, 6, 3, 1.0))
    sets = batch.mix_batches(3)
    assert len(sets) == 2
    for s, g in zip(sets, batch.groups):
        assert np.array_equal(s.labels.argmax(axis=1), batch.labels[g])
