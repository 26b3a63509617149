"""The ``.1dp`` token-stream file format and image <-> file pipeline.

Layout (all integers big-endian)::

    offset  size  field
    0       4     magic b"1DPC"
    4       1     version (1)
    5       1     flags (reserved, 0)
    6       2     width
    8       2     height
    10      2     token_count L (>= 1)
    12      1     bits_per_token b
    13      8     model_id (first 8 bytes of the weights' SHA-256)
    21      ...   payload: ceil(L*b/8) bytes

Tokens are packed MSB-first in sequence order; trailing pad bits are zero.
With 12-bit tokens the payload costs 1.5 bytes per token.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from onedpiece import model as model_core
from onedpiece.data import center_fit, read_image, write_image
from onedpiece.errors import (
    CorruptStreamError,
    IngestionError,
    InvalidInputError,
    InvalidTokenError,
    ModelMismatchError,
    UnsupportedVersionError,
)

log = logging.getLogger(__name__)

MAGIC = b"1DPC"
VERSION = 1
HEADER = struct.Struct(">4sBBHHHB8s")
HEADER_SIZE = HEADER.size  # 21
MAX_BITS = 32


def payload_size(n_tokens: int, bits_per_token: int) -> int:
    return math.ceil(n_tokens * bits_per_token / 8)


def file_size(n_tokens: int, bits_per_token: int = 12) -> int:
    return HEADER_SIZE + payload_size(n_tokens, bits_per_token)


def _check_bits(bits: int) -> None:
    if not 1 <= bits <= MAX_BITS:
        raise InvalidInputError(f"bits_per_token must be in [1, {MAX_BITS}], got {bits}")


def pack_tokens(tokens, bits_per_token: int) -> bytes:
    """Pack token ids MSB-first into ``ceil(L*bits/8)`` bytes, zero-padded."""
    _check_bits(bits_per_token)
    ids = np.asarray(tokens)
    if ids.ndim != 1:
        raise InvalidInputError("expected a 1-D token sequence")
    if ids.size and ids.dtype.kind not in "iu":
        raise InvalidTokenError(f"token ids must be integers, got dtype {ids.dtype}")
    ids = ids.astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= 1 << bits_per_token):
        raise InvalidTokenError(f"token id out of range for {bits_per_token}-bit packing")
    shifts = np.arange(bits_per_token - 1, -1, -1, dtype=np.int64)
    bits = ((ids[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bits).tobytes()


def unpack_tokens(payload: bytes, token_count: int, bits_per_token: int, strict: bool = True) -> np.ndarray:
    """Inverse of :func:`pack_tokens`.

    Raises ``CorruptStreamError`` on a length mismatch, and in strict mode on
    nonzero pad bits.
    """
    _check_bits(bits_per_token)
    if token_count < 0:
        raise InvalidInputError("token_count must be >= 0")
    expected = payload_size(token_count, bits_per_token)
    if len(payload) != expected:
        raise CorruptStreamError(
            f"payload is {len(payload)} bytes, expected {expected} for "
            f"{token_count} x {bits_per_token}-bit tokens"
        )
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    used = token_count * bits_per_token
    if strict and bits[used:].any():
        raise CorruptStreamError("nonzero pad bits")
    weights = np.int64(1) << np.arange(bits_per_token - 1, -1, -1, dtype=np.int64)
    return bits[:used].reshape(token_count, bits_per_token).astype(np.int64) @ weights


@dataclass
class TokenStreamFile:
    tokens: np.ndarray
    width: int
    height: int
    bits_per_token: int = 12
    model_id: bytes = b"\x00" * 8
    version: int = VERSION
    flags: int = 0

    @property
    def token_count(self) -> int:
        return int(len(self.tokens))

    def to_bytes(self) -> bytes:
        if self.token_count < 1:
            raise InvalidInputError("a token stream needs at least one token")
        if len(self.model_id) != 8:
            raise InvalidInputError("model_id must be 8 bytes")
        header = HEADER.pack(
            MAGIC, self.version, self.flags, self.width, self.height,
            self.token_count, self.bits_per_token, self.model_id,
        )
        return header + pack_tokens(self.tokens, self.bits_per_token)

    @classmethod
    def from_bytes(cls, data: bytes, strict: bool = True) -> "TokenStreamFile":
        if len(data) < HEADER_SIZE:
            raise CorruptStreamError(f"stream shorter than the {HEADER_SIZE}-byte header")
        magic, version, flags, width, height, count, bits, model_id = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported stream version {version}")
        if strict and flags != 0:
            raise CorruptStreamError(f"reserved flags set: {flags:#04x}")
        if count < 1:
            raise CorruptStreamError("token_count is 0")
        if not 1 <= bits <= MAX_BITS:
            raise CorruptStreamError(f"invalid bits_per_token {bits}")
        tokens = unpack_tokens(data[HEADER_SIZE:], count, bits, strict=strict)
        return cls(tokens, width, height, bits, model_id, version, flags)

    def header_fields(self) -> dict[str, object]:
        return {
            "magic": MAGIC.decode(),
            "version": self.version,
            "flags": self.flags,
            "width": self.width,
            "height": self.height,
            "token_count": self.token_count,
            "bits_per_token": self.bits_per_token,
            "model_id": self.model_id.hex(),
            "payload_bytes": payload_size(self.token_count, self.bits_per_token),
        }


def read_stream(path: str | Path, strict: bool = True) -> TokenStreamFile:
    return TokenStreamFile.from_bytes(Path(path).read_bytes(), strict=strict)


def write_stream(path: str | Path, stream: TokenStreamFile) -> Path:
    path = Path(path)
    path.write_bytes(stream.to_bytes())
    return path


def encode_image(
    image_path: str | Path,
    model: model_core.OneDPiece,
    n_tokens: int,
    out_path: str | Path,
) -> TokenStreamFile:
    """Tokenize an image file, keep the first ``n_tokens`` ids and write a ``.1dp``."""
    cfg = model.cfg
    if not 1 <= n_tokens <= cfg.n_latent_tokens:
        raise InvalidInputError(f"n_tokens {n_tokens} outside [1, {cfg.n_latent_tokens}]")
    try:
        image = read_image(image_path)
    except Exception as exc:
        raise IngestionError(f"cannot read image {image_path}: {exc}") from exc
    image = center_fit(image, cfg.image_size)
    ids = model_core.tokenize(image, model)[:n_tokens]
    stream = TokenStreamFile(
        tokens=ids,
        width=cfg.image_size,
        height=cfg.image_size,
        bits_per_token=cfg.bits_per_token,
        model_id=model_core.weights_fingerprint(model),
    )
    write_stream(out_path, stream)
    return stream


def decode_file(
    in_path: str | Path,
    model: model_core.OneDPiece,
    prefix_n: int | None = None,
    out_path: str | Path | None = None,
    strict: bool = True,
) -> np.ndarray:
    """Decode a ``.1dp`` file, optionally using only its first ``prefix_n`` tokens."""
    stream = read_stream(in_path, strict=strict)
    fingerprint = model_core.weights_fingerprint(model)
    if stream.model_id != fingerprint:
        msg = (
            f"{in_path} was encoded by model {stream.model_id.hex()}, "
            f"loaded model is {fingerprint.hex()}"
        )
        if strict:
            raise ModelMismatchError(msg)
        log.warning(msg)
    tokens = stream.tokens
    if prefix_n is not None:
        if not 1 <= prefix_n <= stream.token_count:
            raise InvalidInputError(f"prefix {prefix_n} outside [1, {stream.token_count}]")
        tokens = tokens[:prefix_n]
    image = model_core.detokenize(tokens, model)
    if out_path is not None:
        write_image(out_path, image)
    return image
