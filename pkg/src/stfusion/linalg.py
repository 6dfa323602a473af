"""Sparse Cholesky factorisation and the GMRF computations built on it.

CHOLMOD (through scikit-sparse) does the heavy lifting.  When it is not
importable a dense LAPACK factorisation is used instead, which is only
sensible for small problems.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numba import njit

try:
    from sksparse.cholmod import CholmodNotPositiveDefiniteError, analyze, cholesky
except ImportError:  # pragma: no cover - exercised only without scikit-sparse
    analyze = cholesky = None

    class CholmodNotPositiveDefiniteError(Exception):
        pass


HAVE_CHOLMOD = cholesky is not None


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class SparseCholesky:
    """``P Q P^T = L L^T`` for a sparse symmetric positive-definite ``Q``.

    A factor may be refreshed in place with :meth:`refactor` as long as the
    sparsity pattern is unchanged; the symbolic analysis is then reused.
    """

    def __init__(self, Q, *, dense: bool | None = None):
        Q = sp.csc_matrix(Q)
        self.n = Q.shape[0]
        self.dense = (not HAVE_CHOLMOD) if dense is None else dense
        self._factor = None
        self._dense_L = None
        self.refactor(Q)

    @classmethod
    def symbolic(cls, pattern, dense: bool | None = None) -> "SparseCholesky":
        """Analyse a pattern once; call :meth:`refactor` for each matrix."""
        self = cls.__new__(cls)
        pattern = sp.csc_matrix(pattern)
        self.n = pattern.shape[0]
        self.dense = (not HAVE_CHOLMOD) if dense is None else dense
        self._dense_L = None
        self._factor = None if self.dense else analyze(pattern, mode="supernodal")
        return self

    def refactor(self, Q) -> "SparseCholesky":
        Q = sp.csc_matrix(Q)
        if self.dense:
            try:
                self._dense_L = sla.cholesky(Q.toarray(), lower=True)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError(str(exc)) from None
            return self
        try:
            if self._factor is None:
                self._factor = cholesky(Q, mode="supernodal")
            else:
                self._factor.cholesky_inplace(Q)
        except CholmodNotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(str(exc)) from None
        return self

    def logdet(self) -> float:
        if self.dense:
            return 2.0 * float(np.log(np.diag(self._dense_L)).sum())
        return float(self._factor.logdet())

    def solve(self, b):
        """``Q^{-1} b`` for a vector, dense matrix or sparse matrix ``b``."""
        if self.dense:
            if sp.issparse(b):
                b = b.toarray()
            return sla.cho_solve((self._dense_L, True), b)
        if sp.issparse(b):
            return self._factor(sp.csc_matrix(b)).toarray()
        return self._factor(np.asarray(b, dtype=float))

    def solve_Lt(self, z):
        """``x`` with ``Q = L L^T`` and ``L^T x = z`` (so ``x ~ N(0, Q^-1)``)."""
        z = np.asarray(z, dtype=float)
        if self.dense:
            return sla.solve_triangular(self._dense_L, z, lower=True, trans="T")
        f = self._factor
        return f.apply_Pt(f.solve_Lt(z, use_LDLt_decomposition=False))

    def selected_inverse(self) -> "SelectedInverse":
        """Entries of ``Q^{-1}`` on the sparsity pattern of the factor."""
        if self.dense:
            Linv = sla.solve_triangular(self._dense_L, np.eye(self.n), lower=True)
            return SelectedInverse(dense=Linv.T @ Linv)
        L = sp.csc_matrix(self._factor.L())
        L.sort_indices()
        indptr = L.indptr.astype(np.int64)
        indices = L.indices.astype(np.int64)
        S = _supernodal_selinv(indptr, indices, np.ascontiguousarray(L.data, dtype=float), self.n)
        return SelectedInverse(indptr=indptr, indices=indices, values=S, perm=np.asarray(self._factor.P()))

    def inverse_diagonal(self) -> np.ndarray:
        """Diagonal of ``Q^{-1}``."""
        return self.selected_inverse().diagonal()


class SelectedInverse:
    """Partial inverse: ``Q^{-1}`` restricted to the pattern of ``L + L^T``.

    Stored in the factor's permuted ordering; :meth:`entries` accepts
    original indices.
    """

    def __init__(self, *, indptr=None, indices=None, values=None, perm=None, dense=None):
        self._dense = dense
        self.indptr, self.indices, self.values = indptr, indices, values
        if perm is not None:
            self.perm = perm
            self.iperm = np.empty_like(perm)
            self.iperm[perm] = np.arange(len(perm))

    def diagonal(self) -> np.ndarray:
        if self._dense is not None:
            return np.diag(self._dense).copy()
        out = np.empty(len(self.perm))
        out[self.perm] = self.values[self.indptr[:-1]]
        return out

    def positions(self, rows, cols) -> np.ndarray:
        """Storage positions of entries ``(rows, cols)``; -1 if outside the pattern."""
        i = self.iperm[np.asarray(rows, dtype=np.int64)]
        j = self.iperm[np.asarray(cols, dtype=np.int64)]
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        return _find_positions(self.indptr, self.indices, hi, lo)

    def entries(self, rows, cols, positions=None) -> np.ndarray:
        if self._dense is not None:
            return self._dense[np.asarray(rows), np.asarray(cols)]
        pos = self.positions(rows, cols) if positions is None else positions
        if np.any(pos < 0):
            raise KeyError("requested entries lie outside the factor pattern")
        return self.values[pos]

    def same_pattern(self, other: "SelectedInverse") -> bool:
        if self._dense is not None or other._dense is not None:
            return False
        return (np.array_equal(self.indptr, other.indptr) and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.perm, other.perm))


@njit(cache=True)
def _find_positions(indptr, indices, rows, cols):
    out = np.empty(len(rows), dtype=np.int64)
    for k in range(len(rows)):
        lo = indptr[cols[k]]
        hi = indptr[cols[k] + 1] - 1
        out[k] = -1
        while lo <= hi:
            mid = (lo + hi) // 2
            r = indices[mid]
            if r == rows[k]:
                out[k] = mid
                break
            if r < rows[k]:
                lo = mid + 1
            else:
                hi = mid - 1
    return out


# Selected inversion over supernodes: columns j0..j1 with nested patterns
# share one dense diagonal block and one set of off-diagonal rows R, and
#   S_RJ = -S_RR U,  S_JJ = L_JJ^-T L_JJ^-1 - U^T S_RJ,  U = L_RJ L_JJ^-1.

@njit(cache=True)
def _supernode_starts(indptr, indices, n):
    starts = [0]
    for j in range(1, n):
        prev = indptr[j] - indptr[j - 1]
        cur = indptr[j + 1] - indptr[j]
        nested = cur == prev - 1 and prev > 1 and indices[indptr[j - 1] + 1] == j
        if nested:
            a = indptr[j - 1] + 1
            b = indptr[j]
            for q in range(cur):
                if indices[a + q] != indices[b + q]:
                    nested = False
                    break
        if not nested:
            starts.append(j)
    starts.append(n)
    return np.array(starts)


@njit(cache=True)
def _gather_block(indptr, indices, S, R, pos):
    r = len(R)
    out = np.empty((r, r))
    for k in range(r):
        c = R[k]
        for p in range(indptr[c], indptr[c + 1]):
            pos[indices[p]] = p
        for i in range(k, r):
            v = S[pos[R[i]]]
            out[i, k] = v
            out[k, i] = v
        for p in range(indptr[c], indptr[c + 1]):
            pos[indices[p]] = -1
    return out


@njit(cache=True)
def _supernodal_selinv(indptr, indices, data, n):
    starts = _supernode_starts(indptr, indices, n)
    S = np.zeros(len(data))
    pos = -np.ones(n, dtype=np.int64)
    for J in range(len(starts) - 2, -1, -1):
        j0 = starts[J]
        s = starts[J + 1] - j0
        R = indices[indptr[j0] + s: indptr[j0 + 1]].copy()
        r = len(R)
        Ljj = np.zeros((s, s))
        Lrj = np.empty((r, s))
        for q in range(s):
            p = indptr[j0 + q]
            for i in range(s - q):
                Ljj[q + i, q] = data[p + i]
            for i in range(r):
                Lrj[i, q] = data[p + s - q + i]
        Linv = np.linalg.inv(Ljj)
        Sjj = Linv.T @ Linv
        Srj = np.empty((r, s))
        if r:
            U = Lrj @ Linv
            Srj = -(_gather_block(indptr, indices, S, R, pos) @ U)
            Sjj -= U.T @ Srj
        for q in range(s):
            p = indptr[j0 + q]
            for i in range(s - q):
                S[p + i] = Sjj[q + i, q]
            for i in range(r):
                S[p + s - q + i] = Srj[i, q]
    return S


class PatternSum:
    """Fast evaluation of ``sum_i c_i M_i`` over a fixed union pattern.

    The result always carries the full union pattern (explicit zeros are
    kept), which is what in-place refactorisation needs.
    """

    def __init__(self, terms):
        terms = [sp.coo_matrix(t) for t in terms]
        shape = terms[0].shape
        rows = np.concatenate([t.row for t in terms]).astype(np.int64)
        cols = np.concatenate([t.col for t in terms]).astype(np.int64)
        self._vals = np.concatenate([t.data for t in terms]).astype(float)
        self._term = np.repeat(np.arange(len(terms)), [t.nnz for t in terms])
        key = cols * shape[0] + rows
        uniq, self._slot = np.unique(key, return_inverse=True)
        self.shape = shape
        self.indices = (uniq % shape[0]).astype(np.int32)
        ucol = uniq // shape[0]
        self.indptr = np.searchsorted(ucol, np.arange(shape[1] + 1)).astype(np.int32)
        self.n_terms = len(terms)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def pattern(self) -> sp.csc_matrix:
        return sp.csc_matrix((np.ones(self.nnz), self.indices, self.indptr), shape=self.shape)

    @property
    def union_rows(self) -> np.ndarray:
        return self.indices

    @property
    def union_cols(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[1]), np.diff(self.indptr))

    def contract(self, slot_values) -> np.ndarray:
        """``sum_ab (M_i)_ab V_ab`` for every term, with ``V`` given per union slot."""
        return np.bincount(self._term, weights=self._vals * np.asarray(slot_values)[self._slot],
                           minlength=self.n_terms)

    def evaluate(self, coefs) -> sp.csc_matrix:
        coefs = np.asarray(coefs, dtype=float)
        data = np.bincount(self._slot, weights=self._vals * coefs[self._term], minlength=self.nnz)
        return sp.csc_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)
