import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from onedpiece import codec
from onedpiece.codec import (
    HEADER_SIZE,
    TokenStreamFile,
    decode_file,
    encode_image,
    file_size,
    pack_tokens,
    unpack_tokens,
)
from onedpiece.data import write_image
from onedpiece.errors import (
    CorruptStreamError,
    IngestionError,
    InvalidInputError,
    InvalidTokenError,
    ModelMismatchError,
    UnsupportedVersionError,
)
from onedpiece.model import decode, detokenize, tokenize, weights_fingerprint

# 2-token golden stream: [0, 4095], 32x32, 12-bit, model id 0102..08
GOLDEN_2TOK = bytes.fromhex("31445043" "01" "00" "0020" "0020" "0002" "0c" "0102030405060708" "000fff")


def oracle_pack(tokens, bits):
    """Independent bit writer: one big integer, shifted left per token."""
    acc = 0
    for t in tokens:
        acc = (acc << bits) | int(t)
    total = len(tokens) * bits
    pad = (-total) % 8
    acc <<= pad
    return acc.to_bytes((total + pad) // 8, "big")


def test_golden_vector():
    assert pack_tokens([0, 4095], 12) == b"\x00\x0f\xff"
    assert oracle_pack([0, 4095], 12) == b"\x00\x0f\xff"
    assert unpack_tokens(b"\x00\x0f\xff", 2, 12).tolist() == [0, 4095]


def test_single_zero_token_pads_with_zeros():
    assert pack_tokens([0], 12) == b"\x00\x00"


def test_256_tokens_is_384_bytes():
    assert len(pack_tokens(np.zeros(256, dtype=np.int64), 12)) == 384


def test_32_tokens_is_48_bytes():
    assert len(pack_tokens(np.arange(32), 12)) == 48


@pytest.mark.parametrize("bits", [1, 3, 7, 8, 12, 13, 16, 20])
def test_pack_matches_oracle(bits, rng):
    for _ in range(20):
        n = int(rng.integers(1, 200))
        toks = rng.integers(0, 2**bits, size=n)
        assert pack_tokens(toks, bits) == oracle_pack(toks, bits)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 4095), min_size=1, max_size=4096))
def test_roundtrip_property(tokens):
    packed = pack_tokens(tokens, 12)
    assert len(packed) == math.ceil(12 * len(tokens) / 8)
    assert unpack_tokens(packed, len(tokens), 12).tolist() == tokens


def test_token_too_large():
    with pytest.raises(InvalidTokenError):
        pack_tokens([4096], 12)
    with pytest.raises(InvalidTokenError):
        pack_tokens([-1], 12)


def test_truncated_payload():
    with pytest.raises(CorruptStreamError):
        unpack_tokens(b"\x00\x0f", 2, 12)


def test_nonzero_pad_bits():
    with pytest.raises(CorruptStreamError):
        unpack_tokens(b"\x00\x01", 1, 12)
    assert unpack_tokens(b"\x00\x01", 1, 12, strict=False).tolist() == [0]


def test_golden_file_bytes():
    s = TokenStreamFile(np.array([0, 4095]), 32, 32, 12, bytes(range(1, 9)))
    assert s.to_bytes() == GOLDEN_2TOK
    assert HEADER_SIZE == 21
    back = TokenStreamFile.from_bytes(GOLDEN_2TOK)
    assert back.tokens.tolist() == [0, 4095]
    assert back.header_fields()["token_count"] == 2
    assert back.header_fields()["bits_per_token"] == 12


def test_header_errors():
    bad_magic = b"XDPC" + GOLDEN_2TOK[4:]
    with pytest.raises(CorruptStreamError):
        TokenStreamFile.from_bytes(bad_magic)
    v2 = GOLDEN_2TOK[:4] + b"\x02" + GOLDEN_2TOK[5:]
    with pytest.raises(UnsupportedVersionError):
        TokenStreamFile.from_bytes(v2)
    with pytest.raises(CorruptStreamError):
        TokenStreamFile.from_bytes(GOLDEN_2TOK[:10])
    with pytest.raises(CorruptStreamError):
        TokenStreamFile.from_bytes(GOLDEN_2TOK[:-1])
    zero = GOLDEN_2TOK[:10] + b"\x00\x00" + GOLDEN_2TOK[12:21]
    with pytest.raises(CorruptStreamError):
        TokenStreamFile.from_bytes(zero)


@pytest.mark.parametrize("n", [1, 2, 5, 31, 32, 256])
def test_file_size_law(n):
    assert file_size(n) == 21 + math.ceil(12 * n / 8)


# image <-> file pipeline on an untrained desk model ---------------------------


@pytest.fixture
def image_file(tmp_path, rng):
    p = tmp_path / "in.png"
    write_image(p, rng.uniform(size=(48, 40, 3)))
    return p


def test_encode_sizes(desk_model, image_file, tmp_path):
    out = tmp_path / "a.1dp"
    encode_image(image_file, desk_model, 32, out)
    assert out.stat().st_size == 69
    encode_image(image_file, desk_model, 1, out)
    assert out.stat().st_size == 21 + 2
    with pytest.raises(InvalidInputError):
        encode_image(image_file, desk_model, 33, out)
    with pytest.raises(InvalidInputError):
        encode_image(image_file, desk_model, 0, out)


def test_encode_unreadable(desk_model, tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(IngestionError):
        encode_image(bad, desk_model, 4, tmp_path / "x.1dp")


def test_decode_file_definitions(desk_model, image_file, tmp_path):
    f = tmp_path / "a.1dp"
    stream = encode_image(image_file, desk_model, 32, f)
    full = decode_file(f, desk_model)
    np.testing.assert_array_equal(full, detokenize(stream.tokens, desk_model))
    pre = decode_file(f, desk_model, prefix_n=8, out_path=tmp_path / "o.png")
    np.testing.assert_array_equal(pre, decode(stream.tokens[:8], desk_model))
    assert (tmp_path / "o.png").exists()
    # reader-side truncation == truncating the stored list
    f8 = tmp_path / "b.1dp"
    codec.write_stream(f8, TokenStreamFile(stream.tokens[:8], 32, 32, 12, stream.model_id))
    np.testing.assert_array_equal(decode_file(f8, desk_model), pre)
    with pytest.raises(InvalidInputError):
        decode_file(f, desk_model, prefix_n=33)


def test_model_id_binding(desk_model, image_file, tmp_path):
    f = tmp_path / "a.1dp"
    stream = encode_image(image_file, desk_model, 4, f)
    assert stream.model_id == weights_fingerprint(desk_model)
    with torch.no_grad():
        desk_model.decoder.mask_token.add_(1.0)
    with pytest.raises(ModelMismatchError):
        decode_file(f, desk_model)
    img = decode_file(f, desk_model, strict=False)
    assert img.shape == (32, 32, 3)


def test_encoded_tokens_are_a_prefix_of_tokenize(desk_model, image_file, tmp_path):
    from onedpiece.data import center_fit, read_image

    full = tokenize(center_fit(read_image(image_file), 32), desk_model)
    stream = encode_image(image_file, desk_model, 5, tmp_path / "a.1dp")
    assert stream.tokens.tolist() == full[:5].tolist()
