"""Reconstruction metrics and the rate-distortion sweep.

All images are float arrays in [0, 1] with identical shapes. Dataset-level
means use ``math.fsum`` so the result does not depend on reduction order.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from onedpiece.codec import payload_size
from onedpiece.data import IMAGE_SUFFIXES, ImageDataset, read_image
from onedpiece.errors import IngestionError, InvalidInputError

log = logging.getLogger(__name__)

SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1_error(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l2_error(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for peak value 1; ``inf`` when identical."""
    return psnr_from_mse(l2_error(a, b))


def _gray(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=-1) if x.ndim == 3 else x


def ssim(a, b, window: int = 8) -> float:
    """Mean SSIM over all ``window x window`` positions (uniform weights, stride 1).

    Color images are reduced to gray by the channel mean. Uses population
    (biased) local statistics and ``C1 = (0.01)^2``, ``C2 = (0.03)^2``.
    """
    a, b = _pair(a, b)
    x, y = _gray(a), _gray(b)
    if x.ndim != 2 or min(x.shape) < window:
        raise InvalidInputError(f"image {x.shape} smaller than the {window}x{window} window")
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx = wx.mean(axis=(-1, -2))
    my = wy.mean(axis=(-1, -2))
    vx = wx.var(axis=(-1, -2))
    vy = wy.var(axis=(-1, -2))
    cov = ((wx - mx[..., None, None]) * (wy - my[..., None, None])).mean(axis=(-1, -2))
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(s.mean())


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the square root is taken as ``tr(sqrt(A^1/2 S_b A^1/2))``
    with ``A^1/2`` the PSD root of ``S_a``, which has the same eigenvalues as
    ``S_a S_b`` but is symmetric; negative eigenvalues are clamped to 0.
    """
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise InvalidInputError("feature dimensionality differs between the two sets")
    root_a = _sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    try:
        eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition failed: {exc}") from exc
    tr_sqrt = float(np.sqrt(np.clip(eig, 0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(value, 0.0)


def frechet_feature_distance(features_a, features_b) -> float:
    """Fréchet distance between Gaussian fits of two feature sets ``(n, d)``."""
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise InvalidInputError(f"feature sets must be (n, d) with equal d: {fa.shape} vs {fb.shape}")
    if len(fa) < 2 or len(fb) < 2:
        raise InvalidInputError("need at least 2 samples per feature set")
    return frechet_distance_from_stats(
        fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False)
    )


# rate-distortion sweep ---------------------------------------------------------


@dataclass
class RDPoint:
    n_tokens: int
    payload_bytes: int
    l1: float
    l2: float
    psnr: float
    ssim: float
    ffd: float | None = None


RD_FIELDS = tuple(f.name for f in fields(RDPoint))

FeatureFn = Callable[[torch.Tensor], np.ndarray]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)  # inf -> "inf"
    return str(v)


def write_csv(rows: Sequence[dict], path: str | Path, header: Sequence[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in header])
    return path


@torch.no_grad()
def reconstruct_prefixes(model, x: torch.Tensor, lengths: Sequence[int], batch_size: int = 64):
    """Tokenize once and decode each requested prefix: ``{n: (B, C, H, W)}``."""
    outs: dict[int, list[torch.Tensor]] = {n: [] for n in lengths}
    for lo in range(0, len(x), batch_size):
        ids = model.tokenize_batch(x[lo : lo + batch_size])
        for n in lengths:
            outs[n].append(model.decode_batch(ids[:, :n]))
    return {n: torch.cat(v) for n, v in outs.items()}


def rd_sweep(
    model,
    dataset: ImageDataset,
    lengths: Sequence[int],
    features: FeatureFn | None = None,
    batch_size: int = 64,
) -> list[RDPoint]:
    """Mean quality of prefix reconstructions for every length in ``lengths``."""
    n_max = model.cfg.n_latent_tokens
    lengths = [int(n) for n in lengths]
    if not lengths:
        raise InvalidInputError("no lengths requested")
    bad = [n for n in lengths if not 1 <= n <= n_max]
    if bad:
        raise InvalidInputError(f"lengths {bad} outside [1, {n_max}]")
    if len(dataset) == 0:
        raise IngestionError("empty evaluation set")
    model.eval()
    x = dataset.tensor()
    recons = reconstruct_prefixes(model, x, lengths, batch_size)
    orig = x.permute(0, 2, 3, 1).numpy()
    feats_orig = features(x) if features is not None else None
    bits = model.cfg.bits_per_token
    points = []
    for n in lengths:
        rec = recons[n].permute(0, 2, 3, 1).numpy()
        l1s = [l1_error(o, r) for o, r in zip(orig, rec)]
        l2s = [l2_error(o, r) for o, r in zip(orig, rec)]
        ssims = [ssim(o, r) for o, r in zip(orig, rec)]
        l2 = math.fsum(l2s) / len(l2s)
        ffd = None
        if features is not None:
            ffd = frechet_feature_distance(feats_orig, features(recons[n]))
        points.append(
            RDPoint(
                n_tokens=n,
                payload_bytes=payload_size(n, bits),
                l1=math.fsum(l1s) / len(l1s),
                l2=l2,
                psnr=psnr_from_mse(l2),
                ssim=math.fsum(ssims) / len(ssims),
                ffd=ffd,
            )
        )
    return points


def write_rd_csv(points: Sequence[RDPoint], path: str | Path) -> Path:
    return write_csv([asdict(p) for p in points], path, RD_FIELDS)


def read_rd_csv(path: str | Path) -> list[RDPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(
            RDPoint(
                n_tokens=int(r["n_tokens"]),
                payload_bytes=int(r["payload_bytes"]),
                l1=float(r["l1"]),
                l2=float(r["l2"]),
                psnr=float(r["psnr"]),
                ssim=float(r["ssim"]),
                ffd=float(r["ffd"]) if r.get("ffd") else None,
            )
        )
    return out


def plot_rd(points: Sequence[RDPoint], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = [p.n_tokens for p in points]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for ax, key, label in zip(axes, ("l1", "l2", "ssim"), ("L1 error", "L2 error", "SSIM")):
        ax.plot(n, [getattr(p, key) for p in points], marker="o")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("tokens")
        ax.set_title(label)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


# external codecs ---------------------------------------------------------------

COMPARE_FIELDS = ("method", "n_images", "mean_bytes", "l1", "l2", "psnr", "ssim")


def _by_stem(directory: Path) -> dict[str, Path]:
    return {
        p.stem: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def compare_external(recon_dirs: dict[str, str | Path], originals_dir: str | Path) -> list[dict]:
    """Mean metrics for reconstructions produced by external codecs.

    ``recon_dirs`` maps a method name to a directory of decoded images;
    files are paired with originals by filename stem. ``mean_bytes`` is the
    mean size of the reconstruction files themselves. Unpaired or
    mismatched-size files are skipped with a warning.
    """
    originals = _by_stem(Path(originals_dir))
    rows = []
    for method, rdir in recon_dirs.items():
        recons = _by_stem(Path(rdir))
        common = sorted(set(originals) & set(recons))
        for stem in sorted(set(originals) ^ set(recons)):
            log.warning("%s: no pair for %s, skipped", method, stem)
        vals: dict[str, list[float]] = {"l1": [], "l2": [], "ssim": [], "bytes": []}
        for stem in common:
            o, r = read_image(originals[stem]), read_image(recons[stem])
            if o.shape != r.shape:
                log.warning("%s: %s has shape %s, original %s; skipped", method, stem, r.shape, o.shape)
                continue
            vals["l1"].append(l1_error(o, r))
            vals["l2"].append(l2_error(o, r))
            vals["ssim"].append(ssim(o, r))
            vals["bytes"].append(float(recons[stem].stat().st_size))
        if not vals["l2"]:
            log.warning("%s: no comparable image pairs", method)
            continue
        k = len(vals["l2"])
        l2 = math.fsum(vals["l2"]) / k
        rows.append(
            {
                "method": method,
                "n_images": k,
                "mean_bytes": math.fsum(vals["bytes"]) / k,
                "l1": math.fsum(vals["l1"]) / k,
                "l2": l2,
                "psnr": psnr_from_mse(l2),
                "ssim": math.fsum(vals["ssim"]) / k,
            }
        )
    return rows
