"""Encoder -> quantizer -> decoder pipeline producing 1D token sequences.

The encoder is a small ViT: image patches plus ``N`` learnable latent tokens
go through a transformer and the outputs at the latent positions, projected
to ``token_dim``, are the continuous latents. The quantizer snaps each latent
to its nearest codebook row. The decoder sees the (possibly truncated)
quantized tokens next to one mask token per output patch; the mask-token
outputs are upscaled to pixels by a CNN.

A truncated sequence of length ``L`` occupies latent positions ``0..L-1`` and
the remaining latent positions are absent from the decoder input.

Images at the public boundary are ``H x W x C`` arrays in ``[0, 1]``; batched
tensors inside the model are ``(B, C, H, W)``.
"""

from __future__ import annotations

import hashlib
import io
import math
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from onedpiece.config import Config, ModelConfig
from onedpiece.errors import (
    ConfigurationError,
    InvalidInputError,
    InvalidTokenError,
    NumericError,
)

CHECKPOINT_FORMAT = "onedpiece-checkpoint"
CHECKPOINT_VERSION = 1
EMBED_STD = 0.3


def _trunc_normal(tensor: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, s, w = x.shape
        qkv = self.qkv(self.norm1(x)).reshape(b, s, 3, self.heads, w // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        h = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        x = x + self.proj(h.transpose(1, 2).reshape(b, s, w))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.encoder_width
        self.patch_embed = nn.Conv2d(cfg.channels, w, cfg.patch_size, stride=cfg.patch_size)
        self.patch_pos = nn.Parameter(torch.zeros(1, cfg.n_patches, w))
        self.latent_tokens = nn.Parameter(torch.zeros(1, cfg.n_latent_tokens, w))
        self.latent_pos = nn.Parameter(torch.zeros(1, cfg.n_latent_tokens, w))
        self.blocks = nn.ModuleList(Block(w, cfg.encoder_heads) for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(w)
        self.to_latent = nn.Linear(w, cfg.token_dim)
        self.n_latent = cfg.n_latent_tokens

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Normalized transformer outputs at the latent positions, ``(B, N, width)``."""
        patches = self.patch_embed(x).flatten(2).transpose(1, 2) + self.patch_pos
        latents = (self.latent_tokens + self.latent_pos).expand(x.shape[0], -1, -1)
        h = torch.cat([patches, latents], dim=1)
        for block in self.blocks:
            h = block(h)
        return self.norm(h[:, -self.n_latent :])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_latent(self.features(x))


class VectorQuantizer(nn.Module):
    """Nearest-neighbour codebook lookup (Euclidean, lowest index wins ties)."""

    def __init__(self, codebook_size: int, token_dim: int):
        super().__init__()
        self.codebook = nn.Embedding(codebook_size, token_dim)
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.int64))

    @property
    def weight(self) -> torch.Tensor:
        return self.codebook.weight

    def forward(self, z: torch.Tensor):
        """Quantize ``(B, N, D)`` latents.

        Returns ``(z_st, ids, commitment, codebook_loss)`` where ``z_st`` carries
        codebook values forward and identity gradients back to ``z``.
        """
        flat = z.reshape(-1, z.shape[-1])
        ids = nearest_codes(flat.detach(), self.weight.detach())
        z_q = self.codebook(ids).view_as(z)
        commitment = F.mse_loss(z, z_q.detach())
        codebook_loss = F.mse_loss(z_q, z.detach())
        if self.training:
            self.usage_counts += torch.bincount(ids, minlength=self.usage_counts.numel())
        z_st = z + (z_q - z).detach()
        return z_st, ids.view(z.shape[:-1]), commitment, codebook_loss


def nearest_codes(latents: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row for every row of ``latents``.

    Distances come from the expanded form ``|z|^2 - 2 z.e + |e|^2``; rows
    whose minimum is ambiguous within rounding are re-resolved with exact
    squared differences so the lowest-index tie rule holds.
    """
    if codebook.shape[0] == 0:
        raise ConfigurationError("empty codebook")
    if latents.shape[-1] != codebook.shape[-1]:
        raise InvalidInputError(
            f"latent dim {latents.shape[-1]} != codebook dim {codebook.shape[-1]}"
        )
    z2 = (latents * latents).sum(1, keepdim=True)
    e2 = (codebook * codebook).sum(1)
    d = z2 - 2 * latents @ codebook.T + e2
    dmin, ids = d.min(1, keepdim=True)
    tol = 16 * torch.finfo(d.dtype).eps * (z2 + e2.max() + 1e-30)
    cand = d <= dmin + tol
    ambiguous = cand.sum(1) > 1
    ids = ids.squeeze(1)
    if ambiguous.any():
        rows = ambiguous.nonzero().squeeze(1)
        exact = ((latents[rows, None, :] - codebook[None]) ** 2).sum(-1)
        exact = exact.masked_fill(~cand[rows], math.inf)
        ids[rows] = exact.argmin(1)
    return ids


class Upscaler(nn.Module):
    """CNN mapping the mask-token grid ``(B, c, g, g)`` to pixels."""

    def __init__(self, channels: int, out_channels: int, factor: int):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(channels, channels, 3, padding=1), nn.GELU()]
        c = channels
        if factor & (factor - 1) == 0:
            scales = [2] * int(math.log2(factor))
        else:
            scales = [factor]
        for s in scales:
            nxt = max(c // 2, 8)
            layers += [nn.Upsample(scale_factor=s, mode="nearest"), nn.Conv2d(c, nxt, 3, padding=1), nn.GELU()]
            c = nxt
        layers.append(nn.Conv2d(c, out_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.decoder_width
        self.cfg = cfg
        self.token_proj = nn.Linear(cfg.token_dim, w)
        self.token_norm = nn.LayerNorm(w)
        self.latent_pos = nn.Parameter(torch.zeros(1, cfg.n_latent_tokens, w))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, w))
        self.mask_pos = nn.Parameter(torch.zeros(1, cfg.n_patches, w))
        self.blocks = nn.ModuleList(Block(w, cfg.decoder_heads) for _ in range(cfg.decoder_depth))
        self.norm = nn.LayerNorm(w)
        self.to_grid = nn.Linear(w, cfg.upscaler_channels)
        self.upscaler = Upscaler(cfg.upscaler_channels, cfg.channels, cfg.patch_size)

    def forward(self, z_q: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        """Decode quantized embeddings ``(B, L, D)`` to unclamped pixels.

        ``keep`` gives per-sample lengths ``<= L``; positions past a sample's
        length are masked out of attention.
        """
        b, length, _ = z_q.shape
        tokens = self.token_norm(self.token_proj(z_q)) + self.latent_pos[:, :length]
        masks = (self.mask_token + self.mask_pos).expand(b, -1, -1)
        h = torch.cat([masks, tokens], dim=1)
        attn_mask = None
        if keep is not None and bool((keep < length).any()):
            valid = torch.arange(length, device=z_q.device)[None, :] < keep[:, None]
            key_ok = torch.cat([valid.new_ones(b, masks.shape[1]), valid], dim=1)
            attn_mask = key_ok[:, None, None, :]
        for block in self.blocks:
            h = block(h, attn_mask)
        h = self.to_grid(self.norm(h[:, : masks.shape[1]]))
        g = self.cfg.grid_size
        grid = h.transpose(1, 2).reshape(b, -1, g, g)
        return self.upscaler(grid)


class OneDPiece(nn.Module):
    """Variable-length 1D tokenizer: ``tokenize`` to N ids, decode any prefix."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = Encoder(self.cfg)
        self.quantizer = VectorQuantizer(self.cfg.codebook_size, self.cfg.token_dim)
        self.decoder = Decoder(self.cfg)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                # std 0.02 only suits ~768-wide layers; scale with fan-in instead
                _trunc_normal(m.weight, m.in_features**-0.5)
                nn.init.zeros_(m.bias)
        # ...except the latent projection, whose outputs must start inside the
        # codebook's range; otherwise the VQ losses collapse them first.
        _trunc_normal(self.encoder.to_latent.weight)
        for p in (
            self.encoder.patch_pos,
            self.encoder.latent_tokens,
            self.encoder.latent_pos,
            self.decoder.latent_pos,
            self.decoder.mask_token,
            self.decoder.mask_pos,
        ):
            # Attention is permutation-invariant: positions must be visible
            # next to unit-scale content or every slot looks alike.
            _trunc_normal(p, EMBED_STD)
        d = self.cfg.token_dim
        nn.init.uniform_(self.quantizer.weight, -0.5 / math.sqrt(d), 0.5 / math.sqrt(d))

    @property
    def codebook(self) -> torch.Tensor:
        return self.quantizer.weight

    # batched tensor API -------------------------------------------------

    def check_images(self, x: torch.Tensor) -> None:
        c, s = self.cfg.channels, self.cfg.image_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, s, s):
            raise InvalidInputError(f"expected images (B, {c}, {s}, {s}), got {tuple(x.shape)}")

    def encode_batch(self, x: torch.Tensor) -> torch.Tensor:
        self.check_images(x)
        z = self.encoder(x)
        if not torch.isfinite(z).all():
            raise NumericError("non-finite encoder activations")
        return z

    def tokenize_batch(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encode_batch(x)
        return nearest_codes(z.reshape(-1, z.shape[-1]), self.codebook).view(z.shape[:-1])

    def check_tokens(self, ids: torch.Tensor) -> None:
        if ids.ndim != 2:
            raise InvalidInputError(f"expected token ids (B, L), got shape {tuple(ids.shape)}")
        length = ids.shape[1]
        if not 1 <= length <= self.cfg.n_latent_tokens:
            raise InvalidInputError(
                f"token length {length} outside [1, {self.cfg.n_latent_tokens}]"
            )
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.codebook_size):
            raise InvalidTokenError(f"token ids must lie in [0, {self.cfg.codebook_size})")

    def decode_batch(self, ids: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        self.check_tokens(ids)
        out = self.decoder(self.quantizer.codebook(ids))
        return out.clamp(0.0, 1.0) if clamp else out

    def forward(self, x: torch.Tensor, keep: torch.Tensor | None = None) -> dict[str, Any]:
        """Training forward pass; ``keep`` holds per-sample keep-lengths.

        The drop is applied to the quantized sequence, after the quantizer.
        """
        z = self.encode_batch(x)
        z_st, ids, commitment, codebook_loss = self.quantizer(z)
        if keep is not None:
            keep = keep.to(torch.int64)
            z_st = z_st[:, : int(keep.max())]
        recon = self.decoder(z_st, keep)
        return {
            "recon": recon,
            "latents": z,
            "ids": ids,
            "commitment": commitment,
            "codebook_loss": codebook_loss,
        }


# single-image API ----------------------------------------------------------


def image_to_tensor(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """``H x W x C`` array in [0, 1] -> ``(1, C, H, W)`` float32 tensor."""
    t = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if t.ndim == 2:
        t = t[..., None]
    if t.ndim != 3:
        raise InvalidInputError(f"expected H x W x C image, got shape {tuple(t.shape)}")
    return t.permute(2, 0, 1).unsqueeze(0).contiguous()


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().squeeze(0).permute(1, 2, 0).cpu().numpy()


def _as_ids(tokens) -> torch.Tensor:
    ids = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
    if ids.ndim != 1:
        raise InvalidInputError("expected a 1-D token sequence")
    return ids[None]


@torch.no_grad()
def encode(image, model: OneDPiece) -> np.ndarray:
    """Continuous latents ``(N, token_dim)`` for one image."""
    return model.encode_batch(image_to_tensor(image))[0].numpy()


def quantize(latents, codebook) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-codebook token ids and the matching codebook rows.

    Computed in the dtype of ``latents``; the quantized rows are exact copies
    of codebook rows.
    """
    z = torch.as_tensor(np.asarray(latents))
    if z.ndim == 1:
        z = z[:, None]
    cb = torch.as_tensor(np.asarray(codebook)).to(z.dtype)
    if cb.ndim == 1:
        cb = cb[:, None]
    ids = nearest_codes(z, cb)
    return ids.numpy(), cb[ids].numpy()


@torch.no_grad()
def tokenize(image, model: OneDPiece) -> np.ndarray:
    """Full-length token ids (length N) for one image."""
    return model.tokenize_batch(image_to_tensor(image))[0].numpy()


@torch.no_grad()
def decode(tokens, model: OneDPiece) -> np.ndarray:
    """Reconstruct an ``H x W x C`` image in [0, 1] from any token prefix."""
    return tensor_to_image(model.decode_batch(_as_ids(tokens)))


def detokenize(tokens, model: OneDPiece) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.dtype.kind not in "iu":
        raise InvalidTokenError(f"token ids must be integers, got dtype {ids.dtype}")
    return decode(ids, model)


# checkpoints ---------------------------------------------------------------


def weights_fingerprint(model: OneDPiece) -> bytes:
    """8-byte digest of all weights (bookkeeping buffers excluded)."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        if name.endswith("usage_counts"):
            continue
        arr = t.detach().cpu().contiguous().numpy()
        h.update(f"{name}|{arr.dtype.str}|{arr.shape}".encode())
        h.update(arr.tobytes())
    return h.digest()[:8]


def save_checkpoint(
    path: str | Path,
    model: OneDPiece,
    config: Config | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Atomically write config, weights, codebook and seed metadata."""
    path = Path(path)
    config = config or Config(model=model.cfg)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "fingerprint": weights_fingerprint(model).hex(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> tuple[OneDPiece, Config, dict[str, Any]]:
    """Load a checkpoint; the model comes back in eval mode."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a onedpiece checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload.get('format_version')}")
    config = Config.from_dict(payload["config"])
    model = OneDPiece(config.model)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, config, payload.get("extra", {})
