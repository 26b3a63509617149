import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy import stats

from onedpiece.errors import ConfigurationError, InvalidInputError
from onedpiece.tail_drop import DropPolicy, sample_keep_length, truncate


def test_single_token_policy_always_keeps_one():
    policy = DropPolicy(n_max=1, rng_seed=3)
    assert {sample_keep_length(policy) for _ in range(100)} == {1}


def test_support_at_256():
    policy = DropPolicy(n_max=256, rng_seed=0)
    draws = np.array([sample_keep_length(policy) for _ in range(60_000)])
    assert draws.min() == 1 and draws.max() == 256
    assert len(np.unique(draws)) == 256


def test_chi_square_uniformity_n32():
    policy = DropPolicy(n_max=32, rng_seed=7)
    draws = np.array([sample_keep_length(policy) for _ in range(100_000)])
    counts = np.bincount(draws, minlength=33)[1:]
    assert counts.sum() == 100_000
    assert stats.chisquare(counts).pvalue > 0.001


def test_seeded_stream_is_reproducible():
    a = DropPolicy(n_max=32, rng_seed=5)
    b = DropPolicy(n_max=32, rng_seed=5)
    assert [sample_keep_length(a) for _ in range(50)] == [sample_keep_length(b) for _ in range(50)]
    a.reset()
    b2 = DropPolicy(n_max=32, rng_seed=5)
    assert sample_keep_length(a) == sample_keep_length(b2)


def test_per_batch_shares_one_length_per_sample_varies():
    batch = DropPolicy(n_max=32, rng_seed=0).sample(64)
    assert len(set(batch.tolist())) == 1
    per = DropPolicy(n_max=32, granularity="per_sample", rng_seed=0).sample(64)
    assert len(set(per.tolist())) > 1
    assert per.min() >= 1 and per.max() <= 32


def test_disabled_policy_never_truncates():
    policy = DropPolicy(n_max=32, enabled=False)
    assert (policy.sample(16) == 32).all()


def test_invalid_policy():
    with pytest.raises(ConfigurationError):
        DropPolicy(n_max=0)
    with pytest.raises(ConfigurationError):
        DropPolicy(n_max=4, granularity="per_token")


def test_truncate_identity_and_first():
    q = list(range(100, 132))
    assert truncate(q, 32) == q
    assert truncate(q, 1) == [100]


def test_truncate_does_not_modify_input():
    q = np.arange(32)
    out = truncate(q, 8)
    out[0] = -1
    assert q[0] == 0
    t = torch.arange(32)
    o = truncate(t, 4)
    o[0] = -1
    assert int(t[0]) == 0


@pytest.mark.parametrize("length", [0, 33, -1])
def test_truncate_out_of_range(length):
    with pytest.raises(InvalidInputError):
        truncate(list(range(32)), length)


@given(
    st.lists(st.integers(0, 4095), min_size=1, max_size=64),
    st.data(),
)
def test_prefix_laws(q, data):
    n = len(q)
    a = data.draw(st.integers(1, n))
    b = data.draw(st.integers(a, n))
    assert truncate(q, b)[:a] == truncate(q, a)
    assert truncate(truncate(q, b), a) == truncate(q, a)
