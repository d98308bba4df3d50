"""Dense LU factorization with partial pivoting.

Every routine accepts either one matrix ``(n, n)`` or a stack ``(N, n, n)``.
Stacks are what the Newton and sensitivity solves use: one small stage
Jacobian per training sample, all factored in a single kernel call.

Two kernel families exist. The loop kernels are compiled with numba; the
numpy kernels vectorize over the stack and loop over columns. ``_accel``
selects one at import time.
"""
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import DimensionMismatch, SingularMatrix

DEFAULT_SINGULAR_TOL = 1e-13


# ---------------------------------------------------------------------------
# loop kernels (numba)


def _lu_factor_loops(a, singular_tol, lu, piv, info):
    nb, n, _ = a.shape
    for b in range(nb):
        amax = 0.0
        for i in range(n):
            for j in range(n):
                v = a[b, i, j]
                lu[b, i, j] = v
                if abs(v) > amax:
                    amax = abs(v)
        thresh = singular_tol * amax
        info[b] = 0
        for k in range(n):
            p = k
            pv = abs(lu[b, k, k])
            for i in range(k + 1, n):
                v = abs(lu[b, i, k])
                if v > pv:
                    p = i
                    pv = v
            piv[b, k] = p
            if pv <= thresh or pv == 0.0:
                info[b] = k + 1
                for kk in range(k + 1, n):
                    piv[b, kk] = kk
                break
            if p != k:
                for j in range(n):
                    t = lu[b, k, j]
                    lu[b, k, j] = lu[b, p, j]
                    lu[b, p, j] = t
            pk = lu[b, k, k]
            for i in range(k + 1, n):
                # divide rather than multiply by 1/pivot: a subnormal pivot has no finite reciprocal
                lu[b, i, k] /= pk
                lik = lu[b, i, k]
                if lik != 0.0:
                    for j in range(k + 1, n):
                        lu[b, i, j] -= lik * lu[b, k, j]


def _lu_solve_loops(lu, piv, rhs, out):
    nb, n, _ = lu.shape
    m = rhs.shape[2]
    for b in range(nb):
        for i in range(n):
            for c in range(m):
                out[b, i, c] = rhs[b, i, c]
        for k in range(n):
            p = piv[b, k]
            if p != k:
                for c in range(m):
                    t = out[b, k, c]
                    out[b, k, c] = out[b, p, c]
                    out[b, p, c] = t
        for i in range(1, n):
            for k in range(i):
                lik = lu[b, i, k]
                if lik != 0.0:
                    for c in range(m):
                        out[b, i, c] -= lik * out[b, k, c]
        for i in range(n - 1, -1, -1):
            for k in range(i + 1, n):
                uik = lu[b, i, k]
                if uik != 0.0:
                    for c in range(m):
                        out[b, i, c] -= uik * out[b, k, c]
            inv = 1.0 / lu[b, i, i]
            for c in range(m):
                out[b, i, c] *= inv


# ---------------------------------------------------------------------------
# numpy kernels


def _lu_factor_numpy(a, singular_tol, lu, piv, info):
    nb, n, _ = a.shape
    lu[...] = a
    rows = np.arange(nb)
    thresh = singular_tol * np.abs(a).reshape(nb, -1).max(axis=1)
    info[:] = 0
    for k in range(n):
        p = k + np.argmax(np.abs(lu[:, k:, k]), axis=1)
        pv = np.abs(lu[rows, p, k])
        bad = ((pv <= thresh) | (pv == 0.0)) & (info == 0)
        info[bad] = k + 1
        p = np.where(info == 0, p, k)
        piv[:, k] = p
        swap = p != k
        if swap.any():
            r = rows[swap]
            tmp = lu[r, k, :].copy()
            lu[r, k, :] = lu[r, p[swap], :]
            lu[r, p[swap], :] = tmp
        pivot = lu[:, k, k].copy()
        pivot[info != 0] = 1.0
        lu[:, k + 1:, k] /= pivot[:, None]
        lu[:, k + 1:, k + 1:] -= lu[:, k + 1:, k, None] * lu[:, None, k, k + 1:]


def _lu_solve_numpy(lu, piv, rhs, out):
    nb, n, _ = lu.shape
    out[...] = rhs
    rows = np.arange(nb)
    for k in range(n):
        p = piv[:, k]
        swap = p != k
        if swap.any():
            r = rows[swap]
            tmp = out[r, k, :].copy()
            out[r, k, :] = out[r, p[swap], :]
            out[r, p[swap], :] = tmp
    for i in range(1, n):
        out[:, i, :] -= np.einsum("bk,bkc->bc", lu[:, i, :i], out[:, :i, :])
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            out[:, i, :] -= np.einsum("bk,bkc->bc", lu[:, i, i + 1:], out[:, i + 1:, :])
        out[:, i, :] /= lu[:, i, i, None]


if _accel.USE_NUMBA:
    _factor_kernel = _accel.njit(cache=True, nogil=True)(_lu_factor_loops)
    _solve_kernel = _accel.njit(cache=True, nogil=True)(_lu_solve_loops)
else:
    _factor_kernel = _lu_factor_numpy
    _solve_kernel = _lu_solve_numpy


# ---------------------------------------------------------------------------
# public API


@dataclass(frozen=True)
class LuFactors:
    """Packed ``L\\U`` factors with LAPACK-style row interchanges.

    ``pivots[..., k]`` is the row swapped with row ``k`` at elimination step
    ``k``. ``info`` is zero for a regular matrix, else ``k + 1`` for the first
    column whose pivot fell under the threshold.
    """

    lu: np.ndarray
    pivots: np.ndarray
    info: np.ndarray

    @property
    def batched(self):
        return self.lu.ndim == 3

    @property
    def n(self):
        return self.lu.shape[-1]

    @property
    def ok(self):
        return self.info == 0

    @property
    def parity(self):
        swaps = np.count_nonzero(self.pivots != np.arange(self.n), axis=-1)
        return np.where(swaps % 2 == 0, 1, -1)

    def permutation(self):
        """Row order ``perm`` such that ``a[perm] == L @ U``."""
        piv = np.atleast_2d(self.pivots)
        perms = np.tile(np.arange(self.n), (piv.shape[0], 1))
        for b in range(piv.shape[0]):
            for k, p in enumerate(piv[b]):
                perms[b, [k, p]] = perms[b, [p, k]]
        return perms if self.batched else perms[0]

    def unpack(self):
        """Return ``(L, U)`` as dense arrays."""
        lower = np.tril(self.lu, -1) + np.eye(self.n)
        upper = np.triu(self.lu)
        return lower, upper

    def take(self, idx):
        if not self.batched:
            raise DimensionMismatch("take() needs batched factors")
        return LuFactors(self.lu[idx], self.pivots[idx], self.info[idx])


def lu_factor_batch(a, singular_tol=DEFAULT_SINGULAR_TOL):
    """Factor a stack of square matrices without raising on singularity."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise DimensionMismatch(f"expected (N, n, n) stack, got {a.shape}")
    nb, n, _ = a.shape
    lu = np.empty_like(a)
    piv = np.empty((nb, n), dtype=np.int64)
    info = np.zeros(nb, dtype=np.int64)
    if nb and n:
        _factor_kernel(a, float(singular_tol), lu, piv, info)
    return LuFactors(lu, piv, info)


def lu_factor(a, singular_tol=DEFAULT_SINGULAR_TOL):
    """LU-factor ``a`` (or a stack of matrices) with partial pivoting.

    Raises SingularMatrix when any pivot magnitude is at or below
    ``singular_tol * max|a|``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim not in (2, 3) or a.shape[-1] != a.shape[-2] or a.shape[-1] == 0:
        raise DimensionMismatch(f"lu_factor needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    single = a.ndim == 2
    f = lu_factor_batch(a[None] if single else a, singular_tol)
    if not f.ok.all():
        bad = np.flatnonzero(~f.ok)
        raise SingularMatrix(f"singular matrix (pivot below {singular_tol:g} * max|a|)", indices=bad)
    if single:
        return LuFactors(f.lu[0], f.pivots[0], f.info[0])
    return f


def lu_solve(f, b):
    """Solve ``A x = b`` from factors of ``A``.

    ``b`` may be a vector ``(n,)``, a matrix ``(n, k)``, or for batched
    factors ``(N, n)`` / ``(N, n, k)``. The result has the shape of ``b``.
    """
    b = np.asarray(b, dtype=np.float64)
    n = f.n
    if f.batched:
        nb = f.lu.shape[0]
        if b.ndim == 2 and b.shape == (nb, n):
            rhs, squeeze = b[:, :, None], "vec"
        elif b.ndim == 3 and b.shape[:2] == (nb, n):
            rhs, squeeze = b, None
        else:
            raise DimensionMismatch(f"rhs shape {b.shape} incompatible with {nb} factors of size {n}")
        lu, piv = f.lu, f.pivots
    else:
        if b.ndim == 1 and b.shape[0] == n:
            rhs, squeeze = b[None, :, None], "single-vec"
        elif b.ndim == 2 and b.shape[0] == n and b.shape[1] >= 1:
            rhs, squeeze = b[None], "single"
        else:
            raise DimensionMismatch(f"rhs shape {b.shape} incompatible with factor size {n}")
        lu, piv = f.lu[None], f.pivots[None]
    rhs = np.ascontiguousarray(rhs)
    out = np.empty_like(rhs)
    if rhs.size:
        _solve_kernel(np.ascontiguousarray(lu), np.ascontiguousarray(piv), rhs, out)
    if squeeze == "vec":
        return out[:, :, 0]
    if squeeze == "single-vec":
        return out[0, :, 0]
    if squeeze == "single":
        return out[0]
    return out
