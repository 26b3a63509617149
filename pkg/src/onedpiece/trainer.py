"""Single-stage training: L2 reconstruction plus VQ losses, with tail token drop.

Three independent RNG streams keep runs reproducible: weight init (torch,
seeded from ``train.seed``), data order/augmentation (numpy, ``train.seed``)
and keep-length sampling (the ``DropPolicy``'s own stream, ``ttd.seed``).
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from onedpiece.config import Config, LossConfig, TrainConfig
from onedpiece.data import ImageDataset
from onedpiece.errors import ConfigurationError, IngestionError, TrainingDivergedError
from onedpiece.model import OneDPiece, save_checkpoint
from onedpiece.tail_drop import DropPolicy

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "kept_length", "l2", "commitment", "codebook", "total")

# Optional loss plug-ins: fn(recon, target) -> scalar tensor.
LossHook = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LossReport:
    l2_recon: float
    commitment: float
    codebook_loss: float
    total: float
    kept_length: int
    lr: float = 0.0
    step: int = 0

    def row(self) -> list[str]:
        return [
            str(self.step),
            repr(self.lr),
            str(self.kept_length),
            repr(self.l2_recon),
            repr(self.commitment),
            repr(self.codebook_loss),
            repr(self.total),
        ]


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr``, then cosine decay to ``cfg.end_lr`` at the last step."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - 1 - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.end_lr + (cfg.lr - cfg.end_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_model(config: Config) -> OneDPiece:
    """Construct a model whose initial weights depend only on ``train.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.train.seed)
        return OneDPiece(config.model)


def drop_policy(config: Config) -> DropPolicy:
    return DropPolicy(
        n_max=config.model.n_latent_tokens,
        granularity=config.ttd.granularity,
        rng_seed=config.ttd.seed,
        enabled=config.ttd.enabled,
    )


class Trainer:
    """Owns the optimizer and step counter for one model."""

    def __init__(
        self,
        model: OneDPiece,
        config: Config,
        policy: DropPolicy | None = None,
        hooks: dict[str, LossHook] | None = None,
    ):
        self.model = model
        self.config = config
        self.tc = config.train
        self.loss_cfg: LossConfig = config.loss
        self.policy = policy or drop_policy(config)
        self.hooks = hooks or {}
        for name in ("perceptual", "gan"):
            if getattr(self.loss_cfg, f"{name}_weight") > 0 and name not in self.hooks:
                raise ConfigurationError(f"loss.{name}_weight > 0 but no '{name}' hook supplied")
        self.optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=lr_at(0, self.tc),
            betas=(self.tc.beta1, self.tc.beta2),
            eps=self.tc.eps,
            weight_decay=self.tc.weight_decay,
        )
        self.step = 0
        self.window_usage = torch.zeros_like(model.quantizer.usage_counts)
        self._reseed_gen = torch.Generator().manual_seed(self.tc.seed + 1)

    def train_step(self, batch: torch.Tensor) -> LossReport:
        model = self.model
        model.train()
        lr = lr_at(self.step, self.tc)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        keep = torch.from_numpy(self.policy.sample(batch.shape[0]))
        kept = int(round(float(keep.float().mean())))
        before = model.quantizer.usage_counts.clone()
        out = model(batch, keep)
        l2 = F.mse_loss(out["recon"], batch)
        lc = self.loss_cfg
        total = (
            lc.reconstruction_weight * l2
            + lc.commitment_weight * out["commitment"]
            + lc.codebook_weight * out["codebook_loss"]
        )
        for name, hook in self.hooks.items():
            weight = getattr(lc, f"{name}_weight", 0.0)
            if weight:
                total = total + weight * hook(out["recon"], batch)
        if not torch.isfinite(total):
            raise TrainingDivergedError(self.step, lr, kept, f"l2={float(l2.detach())}")

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), self.tc.grad_clip)
        self.optimizer.step()

        self.window_usage += model.quantizer.usage_counts - before
        self.step += 1
        if self.tc.reseed_every and self.step % self.tc.reseed_every == 0:
            self.reseed_dead_codes(out["latents"].detach())

        return LossReport(
            l2_recon=float(l2.detach()),
            commitment=float(out["commitment"].detach()),
            codebook_loss=float(out["codebook_loss"].detach()),
            total=float(total.detach()),
            kept_length=kept,
            lr=lr,
            step=self.step - 1,
        )

    @torch.no_grad()
    def reseed_dead_codes(self, latents: torch.Tensor) -> int:
        """Move codebook rows unused since the last call onto random batch latents."""
        dead = (self.window_usage == 0).nonzero().squeeze(1)
        self.window_usage.zero_()
        if dead.numel() == 0:
            return 0
        pool = latents.reshape(-1, latents.shape[-1])
        pick = torch.randint(0, pool.shape[0], (dead.numel(),), generator=self._reseed_gen)
        noise = 0.01 * pool.std() * torch.randn(dead.numel(), pool.shape[1], generator=self._reseed_gen)
        self.model.quantizer.weight[dead] = pool[pick] + noise
        log.debug("step %d: reseeded %d dead codebook entries", self.step, dead.numel())
        return int(dead.numel())


def fit(
    dataset: ImageDataset,
    model: OneDPiece,
    config: Config,
    out_dir: str | Path,
    policy: DropPolicy | None = None,
    hooks: dict[str, LossHook] | None = None,
) -> Path:
    """Train for ``config.train.steps`` steps; return the final checkpoint path.

    Writes ``loss_log.csv`` (one row per step), optional intermediate
    checkpoints ``ckpt_<step>.pt`` and the final ``model.pt`` into ``out_dir``.
    """
    if len(dataset) == 0:
        raise IngestionError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, config, policy, hooks)
    tc = config.train
    batches = dataset.batches(tc.batch_size, seed=tc.seed)
    extra = {"train_seed": tc.seed, "ttd_seed": config.ttd.seed}

    with open(out / "loss_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for _ in range(tc.steps):
            report = trainer.train_step(next(batches))
            writer.writerow(report.row())
            if report.step % 100 == 0:
                log.info(
                    "step %d lr %.2e L=%d l2 %.5f total %.5f",
                    report.step, report.lr, report.kept_length, report.l2_recon, report.total,
                )
            if tc.checkpoint_every and trainer.step % tc.checkpoint_every == 0 and trainer.step < tc.steps:
                save_checkpoint(out / f"ckpt_{trainer.step:06d}.pt", model, config,
                                {**extra, "step": trainer.step})
    model.eval()
    return save_checkpoint(out / "model.pt", model, config, {**extra, "step": trainer.step})


def read_loss_log(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in LOG_HEADER}


def smoothed(values: np.ndarray, at: int, window: int = 10) -> float:
    """Trailing mean of ``values`` over the ``window`` steps ending at index ``at``."""
    lo = max(0, at - window + 1)
    return float(np.mean(values[lo : at + 1]))
