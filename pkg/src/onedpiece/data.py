"""Image folder ingestion, augmentation, and a procedural labeled corpus.

``load_dataset`` reads every PNG/JPEG under a directory. Images in class
subdirectories (``root/<class>/*.png``) are labeled by directory name in
sorted order; flat directories are unlabeled.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from onedpiece.errors import IngestionError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


@dataclass(frozen=True)
class Augmentation:
    random_crop: bool = False
    random_flip: bool = False


def read_image(path: str | Path) -> np.ndarray:
    """Decode an image file to an ``H x W x 3`` float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    u8 = np.rint(arr * 255.0).astype(np.uint8)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[..., 0]
    Image.fromarray(u8).save(path, format="PNG")


def center_fit(image: np.ndarray, size: int) -> np.ndarray:
    """Center-crop to a square, then resize (bicubic) to ``size x size``."""
    h, w = image.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    sq = image[top : top + side, left : left + side]
    if side == size:
        return np.ascontiguousarray(sq, dtype=np.float32)
    u8 = Image.fromarray(np.rint(np.clip(sq, 0, 1) * 255).astype(np.uint8))
    out = np.asarray(u8.resize((size, size), Image.BICUBIC), dtype=np.float32) / 255.0
    return out


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Random ``size x size`` window.

    Sources larger than ``size`` are cropped in bounds. Smaller or equal ones
    are fitted to ``size``, reflect-padded by ``size // 8`` and cropped back,
    i.e. randomly shifted by up to ``size // 8`` pixels.
    """
    h, w = image.shape[:2]
    if min(h, w) <= size:
        image = center_fit(image, size)
        pad = max(1, size // 8)
        image = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        h, w = image.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top : top + size, left : left + size]


class ImageDataset:
    """In-memory image set with deterministic, seeded batch streaming."""

    def __init__(
        self,
        images: list[np.ndarray],
        image_size: int,
        labels: np.ndarray | None = None,
        class_names: list[str] | None = None,
        paths: list[Path] | None = None,
        augmentation: Augmentation = Augmentation(),
    ):
        if not images:
            raise IngestionError("dataset is empty")
        self.images = images
        self.image_size = image_size
        self.labels = labels
        self.class_names = class_names or []
        self.paths = paths or [Path(f"{i:06d}.png") for i in range(len(images))]
        self.augmentation = augmentation
        self._fitted: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.array()[i]

    def array(self) -> np.ndarray:
        """All images center-fitted to ``image_size``: ``(n, H, W, C)``."""
        if self._fitted is None:
            self._fitted = np.stack([center_fit(im, self.image_size) for im in self.images])
        return self._fitted

    def tensor(self, indices=None) -> torch.Tensor:
        arr = self.array() if indices is None else self.array()[indices]
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))

    def subset(self, indices) -> "ImageDataset":
        idx = [int(i) for i in indices]
        return ImageDataset(
            [self.images[i] for i in idx],
            self.image_size,
            None if self.labels is None else self.labels[idx],
            self.class_names,
            [self.paths[i] for i in idx],
            self.augmentation,
        )

    def augment(self, i: int, rng: np.random.Generator) -> np.ndarray:
        if self.augmentation.random_crop:
            im = random_crop(self.images[i], self.image_size, rng)
        else:
            im = self.array()[i]
        if self.augmentation.random_flip and rng.random() < 0.5:
            im = im[:, ::-1]
        return im

    def batches(self, batch_size: int, seed: int) -> Iterator[torch.Tensor]:
        """Endless stream of ``(B, C, H, W)`` batches, reshuffled each epoch.

        The order and augmentation depend only on ``seed``.
        """
        rng = np.random.default_rng(seed)
        n = len(self)
        order = rng.permutation(n)
        pos = 0
        while True:
            idx = []
            while len(idx) < batch_size:
                if pos == n:
                    order = rng.permutation(n)
                    pos = 0
                take = min(batch_size - len(idx), n - pos)
                idx.extend(order[pos : pos + take])
                pos += take
            batch = np.stack([self.augment(int(i), rng) for i in idx])
            yield torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))


def _find_images(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(
    path: str | Path,
    image_size: int,
    augmentation: Augmentation | None = None,
    limit: int | None = None,
) -> ImageDataset:
    """Read all images under ``path`` in sorted filename order.

    Unreadable files are skipped with a warning; if nothing is readable an
    ``IngestionError`` is raised.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"dataset directory not found: {root}")
    files = _find_images(root)
    if limit is not None:
        files = files[:limit]
    if not files:
        raise IngestionError(f"no image files under {root}")

    images, kept = [], []
    for f in files:
        try:
            images.append(read_image(f))
            kept.append(f)
        except Exception as exc:  # PIL raises a zoo of exception types
            log.warning("skipping unreadable image %s: %s", f, exc)
    if not images:
        raise IngestionError(f"none of the {len(files)} files under {root} could be read")

    parents = {f.parent for f in kept}
    labels = class_names = None
    if root not in parents:
        class_names = sorted({f.parent.relative_to(root).parts[0] for f in kept})
        index = {c: i for i, c in enumerate(class_names)}
        labels = np.array([index[f.relative_to(root).parts[0]] for f in kept], dtype=np.int64)
    return ImageDataset(images, image_size, labels, class_names, kept, augmentation or Augmentation())


# procedural corpus ------------------------------------------------------------

SHAPES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "cross",
    "hstripes",
    "vstripes",
    "checker",
    "diagonal",
    "dots",
)


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    r = rng.uniform(0.22, 0.38) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        t = r * 0.3
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "diagonal":
        sign = rng.choice([-1.0, 1.0])
        return np.abs(dy - sign * dx) <= r * 0.35
    if kind == "dots":
        m = np.zeros((size, size), dtype=bool)
        for _ in range(3):
            py, px = rng.uniform(0.1 * size, 0.9 * size, size=2)
            m |= (yy - py) ** 2 + (xx - px) ** 2 <= (size * 0.09) ** 2
        return m
    raise ValueError(kind)


TEXTURES = ("hstripes", "vstripes", "checker")


def _coverage(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Foreground coverage in [0, 1] at ``size x size``.

    Shapes are rendered at 4x and box-filtered (anti-aliasing); texture
    classes are smooth sinusoidal gratings with a 6-10 px period at 32x32.
    """
    if kind in TEXTURES:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        k = 2 * np.pi / (rng.uniform(6, 10) * size / 32)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        if kind == "hstripes":
            wave = np.sin(k * yy + py)
        elif kind == "vstripes":
            wave = np.sin(k * xx + px)
        else:
            wave = np.sin(k * yy + py) * np.sin(k * xx + px)
        return 0.5 + 0.5 * wave
    hard = _shape_mask(kind, size * 4, rng).astype(np.float64)
    return hard.reshape(size, 4, size, 4).mean(axis=(1, 3))


def noise_field(size: int, rng: np.random.Generator, slope: float = 2.0) -> np.ndarray:
    """Zero-mean, unit-variance random field with a ``1/f**slope`` amplitude spectrum."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    radius = np.maximum(np.sqrt(fy**2 + fx**2) * size, 1.0)
    amp = radius**-slope
    amp[0, 0] = 0.0
    spec = amp * (rng.normal(size=amp.shape) + 1j * rng.normal(size=amp.shape))
    field = np.fft.irfft2(spec, s=(size, size))
    return field / (field.std() + 1e-12)


def synth_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``size x size x 3`` image of shape class ``label``.

    The background is colored noise with a natural-image-like power-law
    spectrum; the foreground (an anti-aliased shape or a smooth grating)
    carries faint shading of its own. Content therefore spans all scales, so longer token prefixes keep
    having detail to add.
    """
    base = rng.uniform(0.2, 0.8, size=3)
    mix = rng.normal(size=(3, 3)) * 0.15
    fields = np.stack([noise_field(size, rng) for _ in range(3)], axis=-1)
    bg = base + fields @ mix.T
    fg = rng.uniform(0, 1, size=3)
    # keep the foreground visible against the background
    if np.abs(fg - base).max() < 0.35:
        fg = 1.0 - fg
    shaded = fg + 0.08 * noise_field(size, rng)[..., None]
    cover = _coverage(SHAPES[label], size, rng)[..., None]
    return np.clip(bg * (1 - cover) + shaded * cover, 0.0, 1.0).astype(np.float32)


def synthesize_corpus(
    out_dir: str | Path,
    n_images: int,
    seed: int = 0,
    size: int = 32,
    n_classes: int = len(SHAPES),
) -> Path:
    """Write ``n_images`` labeled PNGs as ``out_dir/<class>/<index>.png``.

    Classes are balanced round-robin; output is a pure function of the
    arguments.
    """
    if not 2 <= n_classes <= len(SHAPES):
        raise ValueError(f"n_classes must be in [2, {len(SHAPES)}]")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for i in range(n_images):
        label = i % n_classes
        d = out / f"{label:02d}_{SHAPES[label]}"
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / f"{i:06d}.png", synth_image(label, size, rng))
    return out
