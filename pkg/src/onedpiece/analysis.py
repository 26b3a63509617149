"""Token-level analysis of a trained tokenizer.

* token contribution: replace one position at a time by a random other id
  and record the pixel-wise L1 change of the reconstruction;
* first-token clustering and swapping;
* linear probing of frozen encoder features.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from onedpiece.errors import InvalidInputError, InvalidTokenError
from onedpiece.model import OneDPiece, image_to_tensor, tensor_to_image

log = logging.getLogger(__name__)


def _images(data) -> torch.Tensor:
    """Accept an ImageDataset, a ``(B, C, H, W)`` tensor or an ``(B, H, W, C)`` array."""
    if hasattr(data, "tensor"):
        return data.tensor()
    if isinstance(data, torch.Tensor):
        return data
    arr = np.asarray(data, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def random_other_ids(rng: np.random.Generator, original: np.ndarray, vocab: int) -> np.ndarray:
    """Uniform ids in ``[0, vocab)`` that differ elementwise from ``original``."""
    r = rng.integers(0, vocab - 1, size=original.shape)
    return r + (r >= original)


# token contribution -------------------------------------------------------------


@dataclass
class ContributionReport:
    per_token_l1: np.ndarray  # (N,)
    per_token_map: np.ndarray  # (N, H, W)
    trials: int
    seed: int
    n_images: int

    def head_tail_ratio(self) -> float:
        return head_tail_ratio(self.per_token_l1)


def head_tail_ratio(per_token_l1) -> float:
    """Mean contribution of the first ``ceil(N/8)`` positions over the last ``ceil(N/8)``."""
    v = np.asarray(per_token_l1, dtype=np.float64)
    k = math.ceil(len(v) / 8)
    tail = v[-k:].mean()
    return math.inf if tail == 0 else float(v[:k].mean() / tail)


@torch.no_grad()
def token_contribution(
    model: OneDPiece,
    data,
    trials_per_token: int = 16,
    seed: int = 0,
    trial_offset: int = 0,
) -> ContributionReport:
    """Average pixel-wise L1 change caused by randomizing each token position.

    Trial ``t`` of image ``j`` draws its replacement ids from the stream
    ``default_rng([seed, j, trial_offset + t])``, so a multi-trial report
    is the mean of single-trial reports with consecutive ``trial_offset``.
    """
    if trials_per_token < 1:
        raise InvalidInputError("trials_per_token must be >= 1")
    model.eval()
    x = _images(data)
    n, k = model.cfg.n_latent_tokens, model.cfg.codebook_size
    h = w = model.cfg.image_size
    acc = np.zeros((n, h, w), dtype=np.float64)
    for j in range(len(x)):
        ids = model.tokenize_batch(x[j : j + 1])  # (1, N)
        base = model.decode_batch(ids)
        q = ids[0].numpy()
        for t in range(trials_per_token):
            rng = np.random.default_rng([seed, j, trial_offset + t])
            repl = random_other_ids(rng, q, k)
            batch = ids.repeat(n, 1)
            batch[torch.arange(n), torch.arange(n)] = torch.from_numpy(repl)
            diff = (model.decode_batch(batch) - base).abs().mean(1)  # (N, H, W)
            acc += diff.double().numpy()
    acc /= len(x) * trials_per_token
    return ContributionReport(
        per_token_l1=acc.mean(axis=(1, 2)),
        per_token_map=acc,
        trials=trials_per_token,
        seed=seed,
        n_images=len(x),
    )


def _colorize(values: np.ndarray) -> np.ndarray:
    import matplotlib

    cmap = matplotlib.colormaps["viridis"]
    return (cmap(values)[..., :3] * 255).astype(np.uint8)


def save_contribution_heatmaps(report: ContributionReport, path: str | Path, cols: int = 8, scale: int = 4) -> Path:
    """Tile the per-position L1 maps into one PNG, log-normalized over the grid."""
    maps = np.log1p(report.per_token_map / max(report.per_token_map.max(), 1e-12) * 1e3)
    maps /= max(maps.max(), 1e-12)
    n, h, w = maps.shape
    rows = math.ceil(n / cols)
    sheet = np.zeros((rows * (h + 1), cols * (w + 1)), dtype=np.float64)
    for i in range(n):
        r, c = divmod(i, cols)
        sheet[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = maps[i]
    img = Image.fromarray(_colorize(sheet)).resize((sheet.shape[1] * scale, sheet.shape[0] * scale), Image.NEAREST)
    img.save(path, format="PNG")
    return Path(path)


# first token ------------------------------------------------------------------


@torch.no_grad()
def tokenize_all(model: OneDPiece, data, batch_size: int = 128) -> torch.Tensor:
    model.eval()
    x = _images(data)
    return torch.cat([model.tokenize_batch(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def first_token_cluster(model: OneDPiece, data) -> dict[int, list[int]]:
    """Group image indices by their first token id (clusters sorted by size)."""
    ids = tokenize_all(model, data)[:, 0].tolist()
    groups: dict[int, list[int]] = defaultdict(list)
    for i, tok in enumerate(ids):
        groups[int(tok)].append(i)
    return dict(sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0])))


def save_contact_sheet(images: np.ndarray, path: str | Path, cols: int = 8) -> Path:
    """Write ``(n, H, W, C)`` images in [0, 1] as one PNG grid."""
    n, h, w, c = images.shape
    rows = math.ceil(n / cols)
    cols = min(cols, n)
    sheet = np.ones((rows * (h + 1), cols * (w + 1), c), dtype=np.float64)
    for i in range(n):
        r, k = divmod(i, cols)
        sheet[r * (h + 1) : r * (h + 1) + h, k * (w + 1) : k * (w + 1) + w] = images[i]
    Image.fromarray(np.rint(np.clip(sheet, 0, 1) * 255).astype(np.uint8)).save(path, format="PNG")
    return Path(path)


@torch.no_grad()
def first_token_swap(
    model: OneDPiece, image, replacement_id: int, n_tokens: int
) -> tuple[np.ndarray, np.ndarray]:
    """Reconstructions of ``[q1..qn]`` and ``[r, q2..qn]`` for one image."""
    cfg = model.cfg
    if not 0 <= replacement_id < cfg.codebook_size:
        raise InvalidTokenError(f"replacement id {replacement_id} outside [0, {cfg.codebook_size})")
    if not 1 <= n_tokens <= cfg.n_latent_tokens:
        raise InvalidInputError(f"n_tokens {n_tokens} outside [1, {cfg.n_latent_tokens}]")
    model.eval()
    ids = model.tokenize_batch(image_to_tensor(image))[:, :n_tokens]
    swapped = ids.clone()
    swapped[0, 0] = replacement_id
    out = model.decode_batch(torch.cat([ids, swapped]))
    return tensor_to_image(out[:1]), tensor_to_image(out[1:])


@torch.no_grad()
def first_token_swap_gap(
    model: OneDPiece, data, lengths=(4, 32), seed: int = 0
) -> dict[int, float]:
    """Mean L1 change from swapping the first token, per prefix length.

    Each image gets one random replacement id (never its own first token),
    shared across all lengths.
    """
    ids = tokenize_all(model, data)
    rng = np.random.default_rng(seed)
    repl = torch.from_numpy(random_other_ids(rng, ids[:, 0].numpy(), model.cfg.codebook_size))
    swapped = ids.clone()
    swapped[:, 0] = repl
    gaps = {}
    for n in lengths:
        a = model.decode_batch(ids[:, :n])
        b = model.decode_batch(swapped[:, :n])
        gaps[int(n)] = float((a - b).abs().mean())
    return gaps


# linear probing ---------------------------------------------------------------


@dataclass
class ProbeConfig:
    epochs: int = 50
    lr: float = 1e-2
    batch_size: int = 64
    weight_decay: float = 0.0
    test_fraction: float = 0.25
    seed: int = 0
    shuffle_labels: bool = False


@dataclass
class ProbeResult:
    accuracy: float
    n_train: int
    n_test: int
    n_classes: int

    @property
    def chance(self) -> float:
        return 1.0 / self.n_classes

    @property
    def chance_sigma(self) -> float:
        """Binomial std of the test accuracy of a chance-level classifier."""
        p = self.chance
        return math.sqrt(p * (1 - p) / self.n_test)


@torch.no_grad()
def encoder_features(model: OneDPiece, x: torch.Tensor, batch_size: int = 128) -> np.ndarray:
    """Mean-pooled encoder outputs over the latent-token positions, ``(B, width)``."""
    model.eval()
    parts = [model.encoder.features(x[i : i + batch_size]).mean(1) for i in range(0, len(x), batch_size)]
    return torch.cat(parts).numpy()


def pixel_features(x: torch.Tensor) -> np.ndarray:
    return x.reshape(len(x), -1).numpy()


def train_linear_probe(features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Fit a single linear layer on standardized features; report held-out top-1."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise InvalidInputError("linear probing needs at least 2 classes")
    n = len(labels)
    rng = np.random.default_rng(cfg.seed)
    if cfg.shuffle_labels:
        labels = rng.permutation(labels)
    order = rng.permutation(n)
    n_test = max(1, int(round(n * cfg.test_fraction)))
    test, train = order[:n_test], order[n_test:]
    if len(train) == 0:
        raise InvalidInputError("no training samples left for the probe")

    f = np.asarray(features, dtype=np.float64)
    mu, sd = f[train].mean(0), f[train].std(0) + 1e-6
    f = torch.from_numpy(((f - mu) / sd).astype(np.float32))
    y = torch.from_numpy(labels)
    n_classes = int(labels.max()) + 1

    gen = torch.Generator().manual_seed(cfg.seed)
    layer = torch.nn.Linear(f.shape[1], n_classes)
    with torch.no_grad():
        layer.weight.normal_(0, 0.01, generator=gen)
        layer.bias.zero_()
    opt = torch.optim.Adam(layer.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    tr = torch.from_numpy(train)
    for _ in range(cfg.epochs):
        perm = tr[torch.randperm(len(tr), generator=gen)]
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            loss = F.cross_entropy(layer(f[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = layer(f[torch.from_numpy(test)]).argmax(1)
    acc = float((pred == y[torch.from_numpy(test)]).float().mean())
    return ProbeResult(accuracy=acc, n_train=len(train), n_test=len(test), n_classes=n_classes)


def linear_probe(model: OneDPiece, dataset, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Probe accuracy of frozen encoder features on a labeled dataset."""
    if getattr(dataset, "labels", None) is None:
        raise InvalidInputError("linear probing needs a labeled dataset (class subdirectories)")
    return train_linear_probe(encoder_features(model, dataset.tensor()), dataset.labels, cfg)
