import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coreflow.data import CoreBatch, MatrixBatch, StiefelPair, mat, vec
from coreflow.errors import ShapeMismatch


def test_vec_is_column_stacking():
    S = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(vec(S), [1.0, 3.0, 2.0, 4.0])
    np.testing.assert_array_equal(mat(vec(S), 2), S)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 5), st.integers(0, 2**31))
def test_vec_mat_round_trip(R, n, seed):
    S = np.random.default_rng(seed).standard_normal((n, R, R))
    assert np.array_equal(mat(vec(S), R), S)
    s = vec(S)
    assert np.array_equal(vec(mat(s, R)), s)


def test_batch_shapes_and_observed():
    data = np.arange(12.0).reshape(2, 2, 3)
    mask = data % 2 == 0
    b = MatrixBatch(data, mask)
    assert b.n == 2 and b.shape == (2, 3) and not b.complete
    np.testing.assert_array_equal(b.observed(), np.where(mask, data, 0))
    assert MatrixBatch(data).complete
    assert MatrixBatch(data[0]).n == 1
    with pytest.raises(ShapeMismatch):
        MatrixBatch(data, mask[:, :1])


def test_corebatch_validates_width():
    with pytest.raises(ShapeMismatch):
        CoreBatch(np.zeros((3, 5)), 2)
    c = CoreBatch(np.zeros((3, 9)), 3)
    assert c.d == 9 and c.n == 3 and c.matrices().shape == (3, 3, 3)


def test_stiefel_pair_validates():
    with pytest.raises(ShapeMismatch):
        StiefelPair(np.zeros((4, 2)), np.zeros((5, 3)))
    assert StiefelPair(np.zeros((4, 2)), np.zeros((5, 2))).rank == 2
