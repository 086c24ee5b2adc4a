import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emoedit.masking import MaskError, MaskSpec, mask_length, sample_mask


def test_mask_length_examples():
    assert mask_length(1000, 0.12) == 120
    assert mask_length(10, 0.12) == 1
    assert mask_length(1, 0.12) == 1
    # round half up rather than half to even
    assert mask_length(25, 0.1) == 3


def test_sample_mask_fixed_length():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = sample_mask(1000, 0.12, rng)
        assert m.length == 120 and 0 <= m.start and m.end <= 1000


def test_sample_mask_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(MaskError):
        sample_mask(1, 0.12, rng)
    with pytest.raises(MaskError):
        sample_mask(100, 0.0, rng)
    with pytest.raises(MaskError):
        sample_mask(100, 1.0, rng)


def test_mask_check():
    MaskSpec(0, 10).check(10)
    with pytest.raises(MaskError):
        MaskSpec(5, 6).check(10)
    with pytest.raises(MaskError):
        MaskSpec(-1, 2).check(10)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 3000), st.floats(0.01, 0.99), st.integers(0, 2 ** 32 - 1))
def test_sample_mask_in_range(T, ratio, seed):
    m = sample_mask(T, ratio, np.random.default_rng(seed))
    assert m.length == mask_length(T, ratio)
    assert 0 <= m.start and m.end <= T


def test_sample_mask_deterministic():
    a = [sample_mask(300, 0.12, np.random.default_rng(7)) for _ in range(3)]
    assert len(set(a)) == 1
