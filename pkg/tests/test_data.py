import numpy as np
import pytest

from onedpiece.data import (
    Augmentation,
    center_fit,
    load_dataset,
    random_crop,
    synth_image,
    synthesize_corpus,
    write_image,
)
from onedpiece.errors import IngestionError


def _pngs(d, n, size, rng):
    d.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        write_image(d / f"{i:03d}.png", rng.uniform(size=(size, size, 3)))


def test_directory_of_ten(tmp_path, rng):
    _pngs(tmp_path / "imgs", 10, 32, rng)
    ds = load_dataset(tmp_path / "imgs", 32)
    assert len(ds) == 10
    assert ds.labels is None
    arr = ds.array()
    assert arr.shape == (10, 32, 32, 3) and arr.min() >= 0 and arr.max() <= 1


def test_unreadable_files_are_skipped(tmp_path, rng, caplog):
    _pngs(tmp_path, 3, 32, rng)
    (tmp_path / "broken.png").write_bytes(b"nope")
    ds = load_dataset(tmp_path, 32)
    assert len(ds) == 3
    assert "broken.png" in caplog.text


def test_all_unreadable_or_empty(tmp_path):
    (tmp_path / "a").mkdir()
    with pytest.raises(IngestionError):
        load_dataset(tmp_path / "a", 32)
    (tmp_path / "a" / "x.png").write_bytes(b"nope")
    with pytest.raises(IngestionError):
        load_dataset(tmp_path / "a", 32)
    with pytest.raises(IngestionError):
        load_dataset(tmp_path / "missing", 32)


def test_same_seed_same_first_batch(tmp_path, rng):
    _pngs(tmp_path, 20, 32, rng)
    a = next(load_dataset(tmp_path, 32).batches(8, seed=3))
    b = next(load_dataset(tmp_path, 32).batches(8, seed=3))
    assert a.shape == (8, 3, 32, 32)
    assert (a == b).all()
    c = next(load_dataset(tmp_path, 32).batches(8, seed=4))
    assert not (a == c).all()


def test_random_crop_stays_in_bounds(rng):
    src = np.arange(64 * 64, dtype=np.float32).reshape(64, 64, 1).repeat(3, axis=2)
    for _ in range(200):
        crop = random_crop(src, 32, rng)
        assert crop.shape == (32, 32, 3)
        top, left = divmod(int(crop[0, 0, 0]), 64)
        assert 0 <= top <= 32 and 0 <= left <= 32
        np.testing.assert_array_equal(crop, src[top : top + 32, left : left + 32])


def test_random_crop_is_a_reflect_padded_shift(rng):
    src = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    padded = np.pad(src, ((4, 4), (4, 4), (0, 0)), mode="reflect")
    offsets = set()
    for _ in range(300):
        crop = random_crop(src, 32, rng)
        assert crop.shape == (32, 32, 3)
        hits = [(t, l) for t in range(9) for l in range(9) if np.array_equal(crop, padded[t : t + 32, l : l + 32])]
        assert hits
        offsets.add(hits[0])
    assert len(offsets) > 60  # all 81 shifts are reachable


def test_crop_augmentation_from_64px_sources(tmp_path, rng):
    _pngs(tmp_path, 4, 64, rng)
    ds = load_dataset(tmp_path, 32, Augmentation(random_crop=True, random_flip=True))
    batch = next(ds.batches(16, seed=0))
    assert batch.shape == (16, 3, 32, 32)


def test_center_fit_resizes_non_square(rng):
    out = center_fit(rng.uniform(size=(40, 60, 3)).astype(np.float32), 32)
    assert out.shape == (32, 32, 3)


def test_synthetic_corpus_is_labeled_and_deterministic(tmp_path):
    synthesize_corpus(tmp_path / "a", 30, seed=1)
    synthesize_corpus(tmp_path / "b", 30, seed=1)
    a, b = load_dataset(tmp_path / "a", 32), load_dataset(tmp_path / "b", 32)
    assert len(a) == 30 and len(a.class_names) == 10
    assert np.bincount(a.labels).tolist() == [3] * 10
    np.testing.assert_array_equal(a.array(), b.array())


def test_synth_image_range(rng):
    for label in range(10):
        im = synth_image(label, 32, rng)
        assert im.shape == (32, 32, 3) and im.min() >= 0 and im.max() <= 1
