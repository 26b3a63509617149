import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from onedpiece.data import write_image
from onedpiece.errors import InvalidInputError
from onedpiece.metrics import (
    compare_external,
    frechet_feature_distance,
    frechet_distance_from_stats,
    l1_error,
    l2_error,
    psnr,
    ssim,
)


def brute_ssim(a, b, win=8):
    x, y = a.mean(-1), b.mean(-1)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - win + 1):
        for j in range(x.shape[1] - win + 1):
            p = x[i : i + win, j : j + win].ravel()
            q = y[i : i + win, j : j + win].ravel()
            mp, mq = p.mean(), q.mean()
            vp = ((p - mp) ** 2).mean()
            vq = ((q - mq) ** 2).mean()
            cv = ((p - mp) * (q - mq)).mean()
            vals.append(((2 * mp * mq + c1) * (2 * cv + c2)) / ((mp**2 + mq**2 + c1) * (vp + vq + c2)))
    return float(np.mean(vals))


@pytest.fixture
def img(rng):
    return rng.uniform(0.0, 0.4, size=(16, 16, 3))


def test_psnr_cases(img):
    assert psnr(img, img) == math.inf
    assert psnr(img, img + 0.1) == pytest.approx(20.0, abs=1e-6)
    assert psnr(img, img + 0.5) == pytest.approx(6.0206, abs=1e-4)


def test_l1_l2(img):
    assert l1_error(img, img) == 0.0 and l2_error(img, img) == 0.0
    assert l1_error(img, img + 0.1) == pytest.approx(0.1)
    assert l2_error(img, img + 0.1) == pytest.approx(0.01)


def test_shape_mismatch(img):
    for f in (psnr, l1_error, l2_error, ssim):
        with pytest.raises(InvalidInputError):
            f(img, img[:8])


def test_ssim_identity_and_symmetry(img, rng):
    other = rng.uniform(size=img.shape)
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    assert ssim(img, other) == ssim(other, img)
    assert -1.0 <= ssim(img, other) <= 1.0


def test_ssim_binary_inverse_is_negative(rng):
    a = (rng.uniform(size=(8, 8, 1)) > 0.5).astype(float)
    value = ssim(a, 1 - a)
    assert value < 0
    assert value == pytest.approx(brute_ssim(a, 1 - a), abs=1e-12)


def test_ssim_matches_brute_force(rng):
    a = rng.uniform(size=(12, 14, 3))
    b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(brute_ssim(a, b), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((7, 9, 3)), np.zeros((7, 9, 3)))


def test_frechet_identical_and_shift(rng):
    f = rng.normal(size=(200, 5))
    assert frechet_feature_distance(f, f) == pytest.approx(0.0, abs=1e-6)
    d = np.array([1.0, -2.0, 0.5])
    eye = np.eye(3)
    assert frechet_distance_from_stats(np.zeros(3), eye, d, eye) == pytest.approx(float(d @ d), abs=1e-6)


def test_frechet_order_invariant_symmetric(rng):
    a, b = rng.normal(size=(100, 4)), rng.normal(1.0, 2.0, size=(80, 4))
    v = frechet_feature_distance(a, b)
    assert v == pytest.approx(frechet_feature_distance(a[::-1], b[rng.permutation(80)]), abs=1e-9)
    assert v == pytest.approx(frechet_feature_distance(b, a), abs=1e-9)
    assert v >= 0


def test_frechet_matches_scipy_sqrtm(rng):
    from scipy import linalg

    a, b = rng.normal(size=(300, 6)), rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
    ma, mb = a.mean(0), b.mean(0)
    sa, sb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ref = float((ma - mb) @ (ma - mb) + np.trace(sa + sb - 2 * linalg.sqrtm(sa @ sb).real))
    assert frechet_feature_distance(a, b) == pytest.approx(ref, rel=1e-6)


def test_frechet_errors(rng):
    with pytest.raises(InvalidInputError):
        frechet_feature_distance(rng.normal(size=(5, 3)), rng.normal(size=(5, 4)))
    with pytest.raises(InvalidInputError):
        frechet_feature_distance(rng.normal(size=(1, 3)), rng.normal(size=(5, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 0.5))
def test_psnr_consistent_with_l2(seed, noise):
    r = np.random.default_rng(seed)
    a = r.uniform(size=(8, 8, 3))
    b = np.clip(a + r.normal(0, noise, size=a.shape), 0, 1)
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / l2_error(a, b)))


def _write_dir(d, images):
    d.mkdir()
    for name, im in images.items():
        write_image(d / f"{name}.png", im)


def test_compare_external(tmp_path, rng):
    orig = {f"im{i}": rng.uniform(size=(16, 16, 3)) for i in range(3)}
    _write_dir(tmp_path / "orig", orig)
    _write_dir(tmp_path / "same", orig)
    _write_dir(tmp_path / "same2", orig)
    _write_dir(tmp_path / "other", {"zzz": orig["im0"]})
    rows = compare_external(
        {"same": tmp_path / "same", "same2": tmp_path / "same2", "other": tmp_path / "other"},
        tmp_path / "orig",
    )
    by = {r["method"]: r for r in rows}
    assert by["same"]["psnr"] == math.inf and by["same"]["n_images"] == 3
    assert {k: v for k, v in by["same"].items() if k != "method"} == {
        k: v for k, v in by["same2"].items() if k != "method"
    }
    assert "other" not in by  # disjoint names: no rows
