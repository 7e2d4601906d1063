import numpy as np
import pytest

from core import numerics
from core.errors import DegenerateInputError, ShapeError


def test_softmax_rows_sum_to_one_and_mask():
    m = np.array([[1.0, 2.0, -np.inf], [0.0, 0.0, 0.0]], dtype=np.float32)
    p = numerics.softmax_rows(m)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert p[0, 2] == 0.0
    assert np.allclose(p[1], 1.0 / 3.0)


def test_softmax_is_shift_invariant():
    m = np.array([[1000.0, 1001.0, 999.0]])
    assert np.allclose(numerics.softmax_rows(m), numerics.softmax_rows(m - 1000.0))


def test_log_softmax_matches_log_of_softmax():
    m = np.random.default_rng(1).standard_normal((4, 7))
    assert np.allclose(numerics.log_softmax_rows(m), np.log(numerics.softmax_rows(m)))


def test_silu_and_gradient():
    x = np.linspace(-4, 4, 81)
    assert np.allclose(numerics.silu(x), x / (1 + np.exp(-x)))
    eps = 1e-6
    numeric = (numerics.silu(x + eps) - numerics.silu(x - eps)) / (2 * eps)
    assert np.allclose(numerics.silu_grad(x), numeric, atol=1e-6)


def test_silu_negative_branch_is_bounded():
    a = np.linspace(-20, 0, 200001)[:-1]
    assert np.max(np.abs(numerics.silu(a))) <= numerics.SILU_NEGATIVE_BOUND


def test_rms_norm_unit_rms():
    x = np.random.default_rng(2).standard_normal((3, 8)).astype(np.float32)
    y, inv = numerics.rms_norm(x, np.ones(8, dtype=np.float32), eps=0.0)
    assert np.allclose(np.sqrt(np.mean(y * y, axis=-1)), 1.0, atol=1e-5)
    assert inv.shape == (3, 1)


def test_cosine_sim():
    assert numerics.cosine_sim([1, 0], [0, 1]) == 0.0
    assert numerics.cosine_sim([1, 1], [2, 2]) == pytest.approx(1.0)
    assert numerics.cosine_sim([1, 0], [-3, 0]) == pytest.approx(-1.0)


def test_cosine_sim_rejects_zero_and_mismatch():
    with pytest.raises(DegenerateInputError):
        numerics.cosine_sim([0, 0], [1, 0])
    with pytest.raises(ShapeError):
        numerics.cosine_sim([1, 0, 0], [1, 0])


def test_cosine_sim_rows_scores_zero_rows_as_zero():
    rows = np.array([[1.0, 0.0], [0.0, 0.0], [-1.0, 0.0]])
    assert list(numerics.cosine_sim_rows(rows, [2.0, 0.0])) == [1.0, 0.0, -1.0]


def test_matmul_shape_check():
    with pytest.raises(ShapeError):
        numerics.matmul(np.ones((2, 3)), np.ones((2, 3)))


def _triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            total = a.dtype.type(0)
            for k in range(a.shape[1]):
                total = total + a[i, k] * b[k, j]
            out[i, j] = total
    return out


def test_matmul_hand_cases():
    assert np.array_equal(numerics.matmul(np.eye(3), np.eye(3)), np.eye(3))
    assert numerics.matmul([[1, 2], [3, 4]], [[0], [1]]).tolist() == [[2], [4]]


@pytest.mark.parametrize("shape", [(7, 5, 3), (1, 64, 1), (64, 1, 64), (16, 64, 16), (9, 33, 2)])
def test_matmul_matches_triple_loop_exactly(shape, rng):
    n, k, m = shape
    a = rng.uniform(-1, 1, (n, k)).astype(np.float32)
    b = rng.uniform(-1, 1, (k, m)).astype(np.float32)
    assert np.array_equal(numerics.matmul(a, b), _triple_loop(a, b))


def test_matmul_agrees_with_blas_product(rng):
    for _ in range(5):
        n, k, m = rng.integers(1, 65, size=3)
        a = rng.uniform(-1, 1, (n, k)).astype(np.float32)
        b = rng.uniform(-1, 1, (k, m)).astype(np.float32)
        product = numerics.matmul(a, b)
        assert product.dtype == np.float32
        assert np.max(np.abs(product - a @ b)) < 1e-5
        assert np.array_equal(product, numerics.matmul(a, b))


def test_least_squares_recovers_linear_map(rng):
    t_true = rng.standard_normal((5, 4))
    source = rng.standard_normal((200, 4))
    t = numerics.least_squares_fit(source, source @ t_true.T, ridge=1e-9)
    assert t.shape == (5, 4)
    assert np.max(np.abs(t - t_true)) < 1e-4
    assert numerics.fit_residual(source, source @ t_true.T, t) < 1e-8


def test_principal_direction_matches_svd(rng):
    m = rng.standard_normal((6, 6))
    v = numerics.principal_direction(m, iterations=500, seed=0)
    top = np.linalg.svd(m)[2][0]
    assert abs(numerics.cosine_sim(v, top)) == pytest.approx(1.0, abs=1e-4)
    assert v[np.argmax(np.abs(v))] > 0


def test_principal_direction_of_zero_matrix_raises():
    with pytest.raises(DegenerateInputError):
        numerics.principal_direction(np.zeros((3, 3)))


def test_random_orthogonal_matrices(rng):
    for q in (numerics.orthogonal_matrix(8, rng), numerics.signed_permutation(8, rng)):
        assert np.allclose(q @ q.T, np.eye(8))
    p = numerics.signed_permutation(8, rng)
    assert np.array_equal(np.abs(p).sum(axis=0), np.ones(8))
