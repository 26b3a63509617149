"""Tail token drop: random truncation of the token sequence's tail.

During training a keep-length ``L`` is drawn uniformly from ``{1, ..., N}``
(equivalently ``N - k`` with ``k`` uniform on ``{0, ..., N-1}``) and only the
first ``L`` quantized tokens reach the decoder.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TypeVar

import numpy as np

from onedpiece.errors import ConfigurationError, InvalidInputError

T = TypeVar("T")

GRANULARITIES = ("per_batch", "per_sample")


@dataclass
class DropPolicy:
    """Keep-length sampler with its own seeded RNG stream.

    The stream is private to the policy so drop schedules can be reproduced
    independently of weight init and data order.
    """

    n_max: int
    granularity: str = "per_batch"
    rng_seed: int = 0
    enabled: bool = True
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n_max < 1:
            raise ConfigurationError(f"n_max must be >= 1, got {self.n_max}")
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"unknown granularity {self.granularity!r}")
        self.rng = np.random.default_rng(self.rng_seed)

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.rng_seed)

    def sample(self, batch_size: int = 1) -> np.ndarray:
        """Keep-lengths for one batch: shape ``(batch_size,)``.

        With ``per_batch`` granularity every entry is the same draw. A
        disabled policy always returns ``n_max`` and consumes no randomness.
        """
        if not self.enabled:
            return np.full(batch_size, self.n_max, dtype=np.int64)
        if self.granularity == "per_batch":
            return np.full(batch_size, sample_keep_length(self), dtype=np.int64)
        return self.rng.integers(1, self.n_max + 1, size=batch_size, dtype=np.int64)


def sample_keep_length(policy: DropPolicy, rng: np.random.Generator | None = None) -> int:
    """Draw ``L`` uniformly from ``{1, ..., policy.n_max}``.

    Advances ``rng`` (default: the policy's own stream).
    """
    rng = policy.rng if rng is None else rng
    return int(rng.integers(1, policy.n_max + 1))


def truncate(tokens: Sequence[T] | np.ndarray, length: int):
    """Return the first ``length`` entries of a token or latent sequence.

    Works on lists, tuples, numpy arrays and torch tensors, slicing the first
    axis. The input is never modified; array inputs come back as copies.
    """
    n = len(tokens)
    if not 1 <= length <= n:
        raise InvalidInputError(f"keep-length {length} outside [1, {n}]")
    out = tokens[:length]
    if hasattr(out, "copy") and not isinstance(out, (list, tuple)):
        out = out.copy()
    elif hasattr(out, "clone"):
        out = out.clone()
    return out
