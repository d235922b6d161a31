import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pydmobilenet.data import (CIFAR_FILES, BatchIterator, DatasetError, LabeledImage, Normalizer,
                               augment, augment_batch, encode_record, flip_pad_crop, load_cifar,
                               parse_record, parse_records, synthetic_quadrants, write_cifar_split)
from pydmobilenet.tensor import make_rng


def _images(n, seed=0):
    rng = make_rng(seed)
    return rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, n)


def test_single_record_label():
    px = np.zeros((3, 32, 32), np.uint8)
    img = parse_record(encode_record(LabeledImage(px, 7)))
    assert img.label == 7 and img.pixels.shape == (3, 32, 32)


@given(st.integers(0, 99), st.integers(0, 19), st.integers(0, 2 ** 16))
def test_cifar100_record_round_trip(fine, coarse, seed):
    px = make_rng(seed).integers(0, 256, (3, 32, 32), dtype=np.uint8)
    raw = encode_record(LabeledImage(px, fine), "cifar100", coarse)
    assert len(raw) == 3074 and raw[0] == coarse
    back = parse_record(raw, "cifar100")
    assert back.label == fine and np.array_equal(back.pixels, px)


def test_truncated_and_bad_records():
    with pytest.raises(DatasetError):
        parse_records(bytes(3072))
    with pytest.raises(DatasetError):
        parse_records(b"")
    with pytest.raises(DatasetError):
        parse_records(bytes([10]) + bytes(3072))  # label 10 in a 10-class set


def test_split_round_trip_and_count_check(tmp_path):
    px, y = _images(20)
    write_cifar_split(tmp_path, px, y, split="test")
    got_px, got_y = load_cifar(tmp_path, split="test", expect_count=False)
    assert np.array_equal(got_px, px) and np.array_equal(got_y, y)
    with pytest.raises(DatasetError, match="expected 10000"):
        load_cifar(tmp_path, split="test")
    with pytest.raises(DatasetError, match="missing"):
        load_cifar(tmp_path, split="train", expect_count=False)


def test_loader_accepts_archive_subdirectory(tmp_path):
    px, y = _images(8)
    write_cifar_split(tmp_path / "cifar-10-batches-bin", px, y, split="train")
    assert len(load_cifar(tmp_path, split="train", expect_count=False)[1]) == 8
    assert len(CIFAR_FILES[("cifar10", "train")]) == 5


def test_augment_shape_and_center_crop():
    px, _ = _images(5)
    assert np.array_equal(flip_pad_crop(px[0], False, 4, 4), px[0])
    assert np.array_equal(flip_pad_crop(px[0], True, 4, 4), px[0][..., ::-1])
    out = augment_batch(px, make_rng(0))
    assert out.shape == px.shape and out.dtype == np.uint8


@given(st.integers(0, 2 ** 16))
def test_batch_augment_matches_single_image_rule(seed):
    px, _ = _images(3, seed)
    out = augment_batch(px, make_rng(seed))
    rng = make_rng(seed)
    flips = rng.random(3) < 0.5
    offs = rng.integers(0, 9, size=(3, 2))
    for i in range(3):
        assert np.array_equal(out[i], flip_pad_crop(px[i], flips[i], *offs[i]))


def test_flip_frequency():
    cols = np.tile(np.arange(1, 33, dtype=np.uint8), (3, 32, 1))
    out = augment_batch(np.repeat(cols[None], 10_000, axis=0), make_rng(42))
    row = out[:, 0, 16, :].astype(int)
    flipped = [np.all(np.diff(r[r > 0]) < 0) for r in row]
    assert 0.47 <= np.mean(flipped) <= 0.53


def test_normalizer(tmp_path):
    px, _ = _images(50)
    norm = Normalizer.fit(px)
    zero = norm(np.zeros((1, 3, 1, 1), np.uint8), np.float64)
    assert np.allclose(zero.ravel(), -norm.mean / norm.std)
    x = norm(px, np.float64)
    assert np.abs(norm.denormalize(x) - px).max() < 1e-6
    norm.save(tmp_path / "n.txt")
    again = Normalizer.load(tmp_path / "n.txt")
    assert np.array_equal(again.mean, norm.mean) and np.array_equal(again.std, norm.std)
    with pytest.raises(ValueError):
        Normalizer([0, 0, 0], [1, 0, 1])
    single = augment(LabeledImage(px[0], 1), make_rng(0), norm)
    assert single.shape == (3, 32, 32) and single.dtype == np.float32


def test_synthetic_quadrants():
    px, y = synthetic_quadrants(4000, make_rng(5))
    assert np.all(np.abs(np.bincount(y, minlength=4) / 4000 - 0.25) <= 0.05)
    px2, y2 = synthetic_quadrants(4000, make_rng(5))
    assert np.array_equal(px, px2) and np.array_equal(y, y2)
    small, labels = synthetic_quadrants(8, make_rng(1))
    for img, lab in zip(small, labels):
        quads = img.reshape(3, 2, 16, 2, 16).transpose(1, 3, 0, 2, 4).reshape(4, -1)
        assert quads[lab].max() >= 192
        assert np.delete(quads, lab, axis=0).max() < 64
    assert px.max() >= 192 and np.median(px) < 64


def test_batch_iterator_contracts():
    px, y = _images(10)
    norm = Normalizer.fit(px)
    train = BatchIterator(px, y, norm, 4, train=True, seed=3)
    assert len(train) == 2 and [len(b[1]) for b in train] == [4, 4]
    seen = np.concatenate([b[1] for b in BatchIterator(px, np.arange(10), norm, 5, train=True)])
    assert sorted(seen) == list(range(10))
    ev = BatchIterator(px, y, norm, 4, train=False)
    batches = list(ev)
    assert len(batches) == 3 and len(batches[-1][1]) == 2
    assert np.array_equal(np.concatenate([b[0] for b in batches]), norm(px))  # no augmentation
    a = [b[0] for b in train]
    b = [b[0] for b in BatchIterator(px, y, norm, 4, train=True, seed=3)]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    train.set_epoch(1)
    assert not np.array_equal(next(iter(train))[0], a[0])
    with pytest.raises(ValueError):
        BatchIterator(px, y[:3], norm)
