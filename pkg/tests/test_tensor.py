import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pydmobilenet.tensor import (NonFiniteError, channel_concat, channel_split, check_finite,
                                 conv_fans, elementwise_add, make_rng, set_debug,
                                 xavier_uniform_init)


def test_xavier_bound_one():
    w = xavier_uniform_init((1000,), 3, 3, make_rng(0))
    assert w.min() >= -1.0 and w.max() <= 1.0
    assert w.max() > 0.95 and w.min() < -0.95


def test_xavier_bound_from_conv_fans():
    fan_in, fan_out = conv_fans((16, 16, 3, 3))
    assert (fan_in, fan_out) == (144, 144)
    w = xavier_uniform_init((16, 16, 3, 3), fan_in, fan_out, make_rng(1), dtype=np.float64)
    assert np.abs(w).max() <= math.sqrt(6 / 288)
    assert math.isclose(math.sqrt(6 / 288), 0.1443, abs_tol=1e-4)


def test_xavier_deterministic_and_stream_separated():
    a = xavier_uniform_init((5, 5), 5, 5, make_rng(7))
    b = xavier_uniform_init((5, 5), 5, 5, make_rng(7))
    c = xavier_uniform_init((5, 5), 5, 5, make_rng(7, 1))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("fans", [(0, 3), (3, 0), (-1, 2)])
def test_xavier_rejects_bad_fans(fans):
    with pytest.raises(ValueError):
        xavier_uniform_init((2,), *fans, make_rng(0))


def test_make_rng_rejects_negative_seed():
    with pytest.raises(ValueError):
        make_rng(-1)


def test_add_examples():
    one, two = np.ones((1, 2, 3, 3)), np.full((1, 2, 3, 3), 2.0)
    assert np.all(elementwise_add(one, two) == 3)
    assert np.array_equal(elementwise_add(one, np.zeros_like(one)), one)
    assert np.array_equal(elementwise_add(np.array([1.0, -1.0]), np.array([-1.0, 1.0])), [0, 0])
    with pytest.raises(ValueError):
        elementwise_add(one, np.ones((1, 3, 3, 3)))


def test_concat_examples(rand):
    a, b, c = rand(1, 4, 8, 8), rand(1, 4, 8, 8), rand(1, 4, 8, 8)
    assert channel_concat([a, b]).shape == (1, 8, 8, 8)
    single = channel_concat([a])
    assert np.array_equal(single, a) and single is not a
    out = channel_concat([a, b, c])
    assert out.shape == (1, 12, 8, 8)
    assert np.array_equal(out[:, 4:8], b)


def test_concat_errors(rand):
    with pytest.raises(ValueError):
        channel_concat([])
    with pytest.raises(ValueError):
        channel_concat([rand(1, 2, 8, 8), rand(1, 2, 7, 8)])


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2 ** 16))
def test_split_inverts_concat(sizes, seed):
    rng = make_rng(seed)
    parts = [rng.standard_normal((2, s, 3, 3)) for s in sizes]
    back = channel_split(channel_concat(parts), sizes)
    assert all(np.array_equal(p, q) for p, q in zip(parts, back))


def test_debug_mode_catches_non_finite():
    set_debug(True)
    try:
        with pytest.raises(NonFiniteError):
            check_finite(np.array([1.0, np.nan]), "test")
    finally:
        set_debug(False)
    check_finite(np.array([np.inf]))  # no-op when debug is off
