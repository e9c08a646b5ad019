import numpy as np
import pytest

from habit import features
from habit.errors import DimensionMismatch, ZeroRow


def test_normalize_rows_345_triangle():
    out = features.normalize_rows([[3.0, 4.0]])
    np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-15)


def test_normalize_rows_unit_row_unchanged():
    row = np.array([[1.0 / np.sqrt(2), 1.0 / np.sqrt(2)]])
    out = features.normalize_rows(row)
    np.testing.assert_allclose(out, row, atol=1e-12)


def test_normalize_rows_against_per_row_oracle():
    rng = np.random.default_rng(42)
    m = rng.standard_normal((4, 8))
    out = features.normalize_rows(m)
    for i in range(4):
        assert abs(np.sqrt(sum(x * x for x in out[i])) - 1.0) < 1e-9
        np.testing.assert_allclose(out[i], m[i] / np.linalg.norm(m[i]), atol=1e-12)


def test_normalize_rows_zero_row_raises():
    with pytest.raises(ZeroRow):
        features.normalize_rows([[1.0, 0.0], [0.0, 0.0]])


def test_pool_single_row_identity():
    f = features.normalize_rows([[2.0, 1.0, 2.0]])
    np.testing.assert_allclose(features.pool(f), f[0], atol=1e-15)


def test_pool_opposite_rows_cancel():
    with pytest.raises(ZeroRow):
        features.pool(np.array([[1.0, 0.0], [-1.0, 0.0]]))


def test_pool_matches_mean_then_normalize():
    rng = np.random.default_rng(7)
    f = features.normalize_rows(rng.standard_normal((4, 8)))
    v = sum(f[i] for i in range(4)) / 4.0
    np.testing.assert_allclose(features.pool(f), v / np.linalg.norm(v), atol=1e-12)


def test_pool_permutation_invariant():
    rng = np.random.default_rng(8)
    f = features.normalize_rows(rng.standard_normal((5, 6)))
    perm = rng.permutation(5)
    np.testing.assert_allclose(features.pool(f), features.pool(f[perm]), atol=1e-14)


def test_similarity_self_and_orthogonal():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    s = features.similarity_matrix(q, q)
    np.testing.assert_allclose(np.diag(s), [1.0, 1.0], atol=1e-15)
    assert abs(s[0, 1]) < 1e-15


def test_similarity_matches_double_loop():
    rng = np.random.default_rng(3)
    q = features.normalize_rows(rng.standard_normal((3, 5)))
    t = features.normalize_rows(rng.standard_normal((3, 5)))
    s = features.similarity_matrix(q, t)
    for b in range(3):
        for j in range(3):
            assert abs(s[b, j] - float(np.dot(q[b], t[j]))) < 1e-12


def test_similarity_self_symmetric_unit_diagonal():
    rng = np.random.default_rng(11)
    x = features.normalize_rows(rng.standard_normal((6, 4)))
    s = features.similarity_matrix(x, x)
    np.testing.assert_allclose(s, s.T, atol=1e-14)
    np.testing.assert_allclose(np.diag(s), np.ones(6), atol=1e-12)
    assert np.all(np.isfinite(s))
    assert np.all(np.abs(s) <= 1 + 1e-12)


def test_similarity_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        features.similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))
