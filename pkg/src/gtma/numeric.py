"""Dense float64 primitives shared by the encoder, optimizer and benchmark.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
The ``check_*`` helpers play the role of scikit-learn's ``check_array``: they
coerce, validate shape and reject non-finite entries once at the boundary so
the numerical code below them can stay assertion-free.

Random state is always a :class:`numpy.random.Generator` backed by PCG64
(a 128-bit-state permuted congruential generator), created through
:func:`make_rng` so that every seeded construction in the package is
reproducible bit-for-bit.
"""

import numpy as np

EPS_NORM = 1e-12


class GTMAError(Exception):
    """Base class for all errors raised by this package."""


class ZeroVectorError(GTMAError, ValueError):
    """A vector that must be normalized has (near) zero length."""


class DimMismatchError(GTMAError, ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(GTMAError, ArithmeticError):
    """A NaN or infinite value appeared where finite values are required."""


def make_rng(seed):
    """Return a PCG64-backed generator; passes existing generators through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def check_vector(v, name="vector"):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimMismatchError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def check_matrix(m, name="matrix"):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimMismatchError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def l2_normalize(v, eps=EPS_NORM):
    v = check_vector(v)
    n = np.linalg.norm(v)
    if n <= eps:
        raise ZeroVectorError(f"cannot normalize vector with norm {n:.3e}")
    return v / n


def cosine_sim(a, b, eps=EPS_NORM):
    """Cosine similarity, clipped to [-1, 1] against rounding drift."""
    a = check_vector(a, "a")
    b = check_vector(b, "b")
    if a.shape != b.shape:
        raise DimMismatchError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= eps or nb <= eps:
        raise ZeroVectorError("cosine similarity undefined for a zero vector")
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def softmax(scores):
    s = check_vector(scores, "scores")
    e = np.exp(s - s.max())
    return e / e.sum()


def scaled_dot_attention(query, keys, values):
    """Attention-pool ``values`` with weights ``softmax(keys @ query / sqrt(d_k))``.

    Parameters
    ----------
    query : array of shape (d_k,)
    keys : array of shape (M, d_k)
    values : array of shape (M, d_v)

    Returns
    -------
    pooled : array of shape (d_v,)
        A convex combination of the rows of ``values``.
    """
    q = check_vector(query, "query")
    k = check_matrix(keys, "keys")
    v = check_matrix(values, "values")
    if k.shape[1] != q.shape[0]:
        raise DimMismatchError(f"query dim {q.shape[0]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimMismatchError(f"{k.shape[0]} keys but {v.shape[0]} values")
    weights = softmax(k @ q / np.sqrt(q.shape[0]))
    return weights @ v


def finite_diff_gradient(f, z, h=1e-5):
    """Central-difference gradient of the scalar field ``f`` at ``z``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    z = check_vector(z, "z")
    grad = np.empty_like(z)
    probe = z.copy()
    for i in range(z.shape[0]):
        probe[i] = z[i] + h
        f_plus = f(probe)
        probe[i] = z[i] - h
        f_minus = f(probe)
        probe[i] = z[i]
        grad[i] = (f_plus - f_minus) / (2 * h)
    return grad


def random_orthogonal(rows, cols, rng):
    """Matrix with orthonormal rows (rows <= cols) or columns (rows > cols)."""
    rng = make_rng(rng)
    g = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(g)
    # sign fix makes the draw Haar-distributed
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)
