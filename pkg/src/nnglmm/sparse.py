"""Sparse helpers: reusable Z'diag(w)Z patterns and Hadamard traces.

``GramPattern`` does the symbolic work once: it enumerates every upper
triangle pair (a, c) touched by some row of Z and stores a scatter
matrix T with ``T[p, l] = z_la * z_lc``. Any weighted Gram matrix
``Z' diag(w) Z`` is then the pattern values ``T @ w``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def as_csr(Z, shape=None):
    Z = sp.csr_matrix(Z, shape=shape, dtype=float)
    Z.sum_duplicates()
    Z.eliminate_zeros()
    Z.sort_indices()
    return Z


class GramPattern:
    """Upper-triangle nonzero pattern of Z'Z with a per-row scatter map."""

    def __init__(self, Z):
        Z = as_csr(Z)
        self.n, self.m = Z.shape
        pi, pj, obs, val = [], [], [], []
        indptr, indices, data = Z.indptr, Z.indices, Z.data
        counts = np.diff(indptr)
        tri_cache = {}
        for l in np.flatnonzero(counts):
            k = counts[l]
            if k not in tri_cache:
                tri_cache[k] = np.triu_indices(k)
            a, c = tri_cache[k]
            cols = indices[indptr[l]:indptr[l + 1]]
            vals = data[indptr[l]:indptr[l + 1]]
            pi.append(cols[a])
            pj.append(cols[c])
            val.append(vals[a] * vals[c])
            obs.append(np.full(a.size, l))
        if pi:
            pi, pj = np.concatenate(pi), np.concatenate(pj)
            obs, val = np.concatenate(obs), np.concatenate(val)
        else:
            pi = pj = obs = np.zeros(0, dtype=int)
            val = np.zeros(0)
        keys = pi.astype(np.int64) * self.m + pj
        ukeys, inverse = np.unique(keys, return_inverse=True)
        self.rows = (ukeys // self.m).astype(np.int64)
        self.cols = (ukeys % self.m).astype(np.int64)
        self.keys = ukeys
        self.scatter = sp.csr_matrix((val, (inverse, obs)), shape=(ukeys.size, self.n))
        self._offdiag = self.rows != self.cols

    @property
    def size(self):
        return self.rows.size

    def values(self, w):
        """Upper-pattern values of Z' diag(w) Z."""
        return self.scatter @ np.asarray(w, dtype=float)

    def add_to_dense(self, w, out):
        v = self.values(w)
        np.add.at(out, (self.rows, self.cols), v)
        od = self._offdiag
        np.add.at(out, (self.cols[od], self.rows[od]), v[od])
        return out

    def to_sparse(self, w):
        v = self.values(w)
        od = self._offdiag
        r = np.concatenate([self.rows, self.cols[od]])
        c = np.concatenate([self.cols, self.rows[od]])
        return sp.csr_matrix((np.concatenate([v, v[od]]), (r, c)), shape=(self.m, self.m))

    def quadratic_diag(self, dense):
        """diag(Z M Z') for symmetric M, reading M only on the pattern."""
        vals = dense[self.rows, self.cols] * np.where(self._offdiag, 2.0, 1.0)
        return self.scatter.T @ vals

    def hadamard_sum(self, w, dense):
        """tr(Z' diag(w) Z M) for symmetric M, touching only pattern entries."""
        vals = self.values(w)
        return float(np.sum(vals * dense[self.rows, self.cols] * np.where(self._offdiag, 2.0, 1.0)))


def hadamard_trace(A, B):
    """tr(A B) for symmetric A, B as the sum over A's nonzeros of A * B."""
    A = sp.coo_matrix(A)
    if sp.issparse(B):
        B = B.tocsr()
        return float(np.sum(A.data * np.asarray(B[A.row, A.col]).ravel()))
    return float(np.sum(A.data * np.asarray(B)[A.row, A.col]))


def upper_keys(rows, cols, m):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    return lo * m + hi
