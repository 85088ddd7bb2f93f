import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from curbsight.numerics import ShapeError, cosine_similarity, dot, lora_merge, norm
from oracles import dense_lora


def test_identity_and_orthogonal():
    a = np.array([0.3, -1.2, 4.0])
    assert cosine_similarity(a, a) == 1.0
    assert cosine_similarity([1.0, 0.0], [0.0, 2.0]) == 0.0
    assert cosine_similarity([1.0, 2.0], [-1.0, -2.0]) == -1.0


def test_cosine_errors():
    with pytest.raises(ShapeError):
        cosine_similarity([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        cosine_similarity([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        cosine_similarity([math.nan, 1.0], [1.0, 1.0])
    with pytest.raises(ShapeError):
        cosine_similarity([], [])


def test_dot_and_norm():
    assert dot([1, 2, 3], [4, 5, 6]) == 32.0
    assert norm([3, 4]) == 5.0


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 8, elements=finite), arrays(np.float64, 8, elements=finite))
def test_cosine_bounded_and_symmetric(a, b):
    if norm(a) < 1e-6 or norm(b) < 1e-6:
        return
    s = cosine_similarity(a, b)
    assert -1.0 <= s <= 1.0
    assert s == cosine_similarity(b, a)


def test_lora_merge_matches_oracle_small():
    W = np.arange(6, dtype=float).reshape(2, 3)
    A = np.array([[1.0], [2.0]])
    B = np.array([[0.5, -1.0, 2.0]])
    np.testing.assert_array_equal(lora_merge(W, A, B), W + A @ B)
    np.testing.assert_allclose(lora_merge(W, A, B), dense_lora(W, A, B), rtol=0, atol=1e-12)


def test_lora_zero_update_bit_exact():
    W = np.random.default_rng(0).normal(size=(5, 7))
    out = lora_merge(W, np.ones((5, 2)), np.zeros((2, 7)))
    assert out.tobytes() == W.tobytes()
    assert out is not W


def test_lora_shape_errors():
    with pytest.raises(ShapeError):
        lora_merge(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        lora_merge(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((1, 4)))
