"""
Numerics - Dense linear algebra and activation functions shared by all modules
All functions are pure; inputs are never modified in place
"""

import numpy as np

from core.errors import DegenerateInputError, NumericalError, ShapeError

DTYPE = np.float32

# Largest |silu(a)| on the negative half-line, attained near a = -1.2785
SILU_NEGATIVE_BOUND = 0.2785


def as_matrix(data, dtype=DTYPE) -> np.ndarray:
    """Coerce input to a 2-D array of the working dtype."""
    m = np.asarray(data, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"Expected a matrix, got array of shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Matrix product accumulated in a fixed order

    Every entry is summed over k from left to right, one rounded product and
    one rounded addition per term, so results match a naive triple loop
    exactly and do not depend on BLAS blocking or thread count.

    Args:
        a: Left operand (n x k)
        b: Right operand (k x m)

    Returns:
        The n x m product
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """
    Row-wise softmax with max subtraction

    Entries equal to -inf (masked positions) receive exactly zero probability.
    Each row must contain at least one finite entry.
    """
    m = np.asarray(m)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    shifted = m - np.max(m, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.exp(-np.logaddexp(np.zeros((), dtype=x.dtype), -x)).astype(x.dtype, copy=False)


def silu(x: np.ndarray) -> np.ndarray:
    """Elementwise x * sigmoid(x)."""
    x = np.asarray(x)
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of silu evaluated at x."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def rms_norm(x: np.ndarray, scale: np.ndarray, eps: float = 1e-5):
    """
    RMS normalisation over the last axis

    Returns:
        (normalised output, inverse RMS per row)
    """
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    inv = inv.astype(x.dtype, copy=False)
    return x * inv * scale, inv


def norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.asarray(v, dtype=np.float64) ** 2)))


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Cosine similarity of two vectors

    Raises:
        DegenerateInputError: if either vector is zero
        ShapeError: if the vectors differ in length
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_sim of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_sim_rows(rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine similarity of every row of `rows` against `v`; zero rows score 0."""
    rows = np.asarray(rows, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64).ravel()
    nv = np.linalg.norm(v)
    if nv == 0.0:
        raise DegenerateInputError("cosine similarity against a zero vector")
    row_norms = np.linalg.norm(rows, axis=1)
    sims = np.zeros(rows.shape[0], dtype=np.float64)
    nz = row_norms > 0
    sims[nz] = rows[nz] @ v / (row_norms[nz] * nv)
    return np.clip(sims, -1.0, 1.0)


def frobenius(m: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(m, dtype=np.float64)))


def least_squares_fit(source: np.ndarray, target: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """
    Fit T minimising ||source @ T.T - target||_F via ridge normal equations

    Args:
        source: n x p matrix of source points (one per row)
        target: n x q matrix of paired target points
        ridge: Value added to the Gram diagonal

    Returns:
        T as a q x p float32 matrix
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.ndim != 2 or target.ndim != 2 or source.shape[0] != target.shape[0]:
        raise ShapeError(f"least_squares_fit row mismatch: {source.shape} vs {target.shape}")
    gram = source.T @ source + ridge * np.eye(source.shape[1])
    rhs = source.T @ target
    if not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > 1e14:
        raise NumericalError("least_squares_fit: Gram matrix is rank deficient beyond ridge rescue")
    try:
        t_transposed = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"least_squares_fit failed: {e}") from e
    return t_transposed.T.astype(DTYPE)


def fit_residual(source: np.ndarray, target: np.ndarray, t: np.ndarray) -> float:
    """Mean squared error of source @ t.T against target."""
    diff = np.asarray(source, dtype=np.float64) @ np.asarray(t, dtype=np.float64).T - target
    return float(np.mean(diff * diff))


def principal_direction(m: np.ndarray, iterations: int = 100, seed: int = 0) -> np.ndarray:
    """
    Top right singular vector of m by power iteration on m.T @ m

    The sign is fixed so that the largest-magnitude entry is positive.
    """
    m = np.asarray(m, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    gram = m.T @ m
    for _ in range(iterations):
        w = gram @ v
        n = np.linalg.norm(w)
        if n == 0.0:
            raise DegenerateInputError("principal_direction of a zero matrix")
        v = w / n
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v.astype(DTYPE)


def orthogonal_matrix(d: int, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal d x d matrix from the QR factorisation of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * np.sign(np.diag(r))).astype(np.float64)


def signed_permutation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal matrix with exactly one +-1 per row and column."""
    q = np.zeros((d, d), dtype=np.float64)
    q[np.arange(d), rng.permutation(d)] = rng.choice([-1.0, 1.0], size=d)
    return q
