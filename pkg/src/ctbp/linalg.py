"""Small dense linear algebra kernels.

The matrix exponential is the scaling-and-squaring algorithm with diagonal
Pade approximants of Higham (2005), "The scaling and squaring method for
the matrix exponential revisited". It is compiled with numba because the
moment operators are recomputed for every likelihood evaluation inside
MCMC loops.
"""

import numba
import numpy as np
from scipy.linalg import lapack

from .errors import DimensionError, InvalidInputError, NumericalError

__all__ = [
    "as_matrix",
    "expm",
    "kron",
    "kron_sum",
    "vec",
    "unvec",
    "solve_spd",
    "logdet_spd",
    "cholesky_lower",
]

# Backward-error bounds theta_m for double precision (Higham 2005, Table 2.3).
_THETA = (
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068e0,
    5.371920351148152e0,
)

_B3 = np.array([120.0, 60.0, 12.0, 1.0])
_B5 = np.array([30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0])
_B7 = np.array([17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0])
_B9 = np.array(
    [
        17643225600.0,
        8821612800.0,
        2075673600.0,
        302702400.0,
        30270240.0,
        2162160.0,
        110880.0,
        3960.0,
        90.0,
        1.0,
    ]
)
_B13 = np.array(
    [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ]
)


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-d float array or raise."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-d, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise InvalidInputError(f"{name} contains NaN")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains infinite entries")
    return arr


@numba.njit(cache=True)
def _one_norm(a):
    n = a.shape[0]
    best = 0.0
    for j in range(a.shape[1]):
        s = 0.0
        for i in range(n):
            s += abs(a[i, j])
        if s > best:
            best = s
    return best


@numba.njit(cache=True)
def _pade_low(a, b, m):
    # degrees 3, 5, 7, 9: U = A * sum b_odd A^2k, V = sum b_even A^2k
    n = a.shape[0]
    ident = np.eye(n)
    a2 = a @ a
    u = b[1] * ident
    v = b[0] * ident
    power = ident
    for k in range(1, m // 2 + 1):
        power = power @ a2
        u = u + b[2 * k + 1] * power
        v = v + b[2 * k] * power
    u = a @ u
    return np.linalg.solve(v - u, v + u)


@numba.njit(cache=True)
def _pade13(a, b):
    n = a.shape[0]
    ident = np.eye(n)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident
    return np.linalg.solve(v - u, v + u)


@numba.njit(cache=True)
def expm_kernel(a):
    """Matrix exponential of a square float64 array (no validation)."""
    norm = _one_norm(a)
    if norm <= _THETA[0]:
        return _pade_low(a, _B3, 3)
    if norm <= _THETA[1]:
        return _pade_low(a, _B5, 5)
    if norm <= _THETA[2]:
        return _pade_low(a, _B7, 7)
    if norm <= _THETA[3]:
        return _pade_low(a, _B9, 9)
    s = 0
    if norm > _THETA[4]:
        s = int(np.ceil(np.log2(norm / _THETA[4])))
    scaled = a / (2.0**s)
    x = np.ascontiguousarray(_pade13(scaled, _B13))
    for _ in range(s):
        x = x @ x
    return x


def expm(a, tol=1e-12):
    """Matrix exponential ``e^A``.

    Parameters
    ----------
    a : array_like, shape (n, n)
    tol : float
        Requested relative accuracy, in ``(0, 1e-6]``. The Pade degree
        selection always targets double-precision unit roundoff, which
        meets any admissible ``tol`` on well-conditioned inputs.

    Returns
    -------
    ndarray, shape (n, n)
    """
    arr = as_matrix(a, "A")
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"matrix exponential needs a square matrix, got {arr.shape}")
    if not 0.0 < tol <= 1e-6:
        raise InvalidInputError(f"tol must lie in (0, 1e-6], got {tol}")
    return expm_kernel(np.ascontiguousarray(arr))


def kron(a, b):
    """Kronecker product; entry ``(i*rb + k, j*cb + l)`` is ``a[i, j] * b[k, l]``."""
    return np.kron(as_matrix(a, "A"), as_matrix(b, "B"))


@numba.njit(cache=True)
def kron_sum_kernel(a, b):
    # A (+) B = A (x) I + I (x) B
    return np.kron(a, np.eye(b.shape[0])) + np.kron(np.eye(a.shape[0]), b)


def kron_sum(a, b):
    """Kronecker sum ``A (+) B`` of two square matrices."""
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]:
        raise DimensionError("Kronecker sum needs square matrices")
    return kron_sum_kernel(a, b)


def vec(a):
    """Stack the columns of ``a`` into one vector."""
    return np.asarray(a, dtype=float).reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size != rows * cols:
        raise DimensionError(f"cannot reshape {v.size} entries into {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def cholesky_lower(a):
    """Lower Cholesky factor of ``(A + A^T)/2``.

    Raises
    ------
    NumericalError
        With ``minor`` set to the order of the first non-positive leading
        minor.
    """
    a = as_matrix(a, "A")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    sym = 0.5 * (a + a.T)
    c, info = lapack.dpotrf(sym, lower=1, clean=1)
    if info > 0:
        raise NumericalError(f"leading minor of order {info} is not positive definite", minor=int(info))
    if info < 0:
        raise InvalidInputError(f"dpotrf rejected argument {-info}")
    return c


def solve_spd(a, b):
    """Solve ``A X = B`` for symmetric positive definite ``A``."""
    c = cholesky_lower(a)
    b = np.asarray(b, dtype=float)
    squeeze = b.ndim == 1
    rhs = b.reshape(-1, 1) if squeeze else b
    if rhs.shape[0] != c.shape[0]:
        raise DimensionError(f"right-hand side has {rhs.shape[0]} rows, expected {c.shape[0]}")
    x, info = lapack.dpotrs(c, rhs, lower=1)
    if info != 0:
        raise NumericalError(f"dpotrs failed with info={info}")
    return x.ravel() if squeeze else x


def logdet_spd(a):
    """``log det A`` for symmetric positive definite ``A``."""
    c = cholesky_lower(a)
    return 2.0 * float(np.sum(np.log(np.diag(c))))


@numba.njit(cache=True)
def chol_kernel(a, out):
    """In-place lower Cholesky of the symmetric part of ``a`` into ``out``.

    Returns 0 on success, else the 1-based index of the failing minor.
    """
    n = a.shape[0]
    for j in range(n):
        s = 0.5 * (a[j, j] + a[j, j])
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if not s > 0.0:
            return j + 1
        d = np.sqrt(s)
        out[j, j] = d
        for i in range(j + 1, n):
            t = 0.5 * (a[i, j] + a[j, i])
            for k in range(j):
                t -= out[i, k] * out[j, k]
            out[i, j] = t / d
        for i in range(j):
            out[i, j] = 0.0
    return 0
