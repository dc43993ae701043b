"""Random-effect structure: Z, D, factorisations, and the Gaussian density.

D is block diagonal: one family of blocks per additive random term, and
within a term one block per grouping level (a single block when the term
has no ``gr``). Two factorisation paths are provided and must agree: a
dense per-block Cholesky (the default for statistics that iterate blocks)
and a sparse LDL path over the assembled matrix, selected with
``set_sparse``.

Read paths (entry evaluation, log-density, simulation) are safe to call
concurrently for a fixed parameter vector; ``update_parameters`` on the
owning model invalidates cached factors via the version counter.
"""

import math

import numpy as np
import scipy.sparse as sps

from .formula import compile_term
from .kernels import get_kernel

STRUCTURAL_ZERO = 1e-14
PD_PIVOT_RTOL = 1e-12


class NotPositiveDefiniteError(ValueError):

    def __init__(self, message, block=None, pivot=None):
        super().__init__(message)
        self.block = block
        self.pivot = pivot


def dense_block_cholesky(a, block_index=None):
    """Lower Cholesky of one dense block with an explicit pivot guard."""
    a = np.asarray(a, dtype=float)
    max_diag = float(np.max(np.diag(a))) if a.size else 0.0
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pivot = _first_bad_pivot(a)
        raise NotPositiveDefiniteError(
            f"covariance block {block_index} is not positive definite "
            f"(pivot {pivot:.3e})", block=block_index, pivot=pivot,
        ) from None
    pivots = np.diag(L) ** 2
    if np.any(pivots <= PD_PIVOT_RTOL * max_diag):
        pivot = float(np.min(pivots))
        raise NotPositiveDefiniteError(
            f"covariance block {block_index} is numerically singular "
            f"(pivot {pivot:.3e} vs max diagonal {max_diag:.3e})",
            block=block_index, pivot=pivot,
        )
    return L


def _first_bad_pivot(a):
    # Cholesky-Banachiewicz, run only to locate the failing pivot
    n = a.shape[0]
    L = np.zeros_like(a)
    for i in range(n):
        for j in range(i + 1):
            s = a[i, j] - L[i, :j] @ L[j, :j]
            if i == j:
                if s <= 0:
                    return float(s)
                L[i, j] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return float(np.min(np.diag(L)) ** 2)


def sparse_ldl(d_csr):
    """LDL^T factorisation of a sparse SPD matrix.

    Returns (L, d) with L unit lower triangular (CSR) and d the positive
    diagonal. Column-oriented up-looking algorithm; efficient when the
    matrix is block diagonal or otherwise sparse with little fill-in.
    """
    a = d_csr.tocsc()
    n = a.shape[0]
    cols = [dict() for _ in range(n)]   # j -> {i: L_ij} for i > j
    dvec = np.zeros(n)
    arows = [a.indices[a.indptr[j]:a.indptr[j + 1]] for j in range(n)]
    avals = [a.data[a.indptr[j]:a.indptr[j + 1]] for j in range(n)]
    max_diag = max((float(v[r == j][0]) for j, (r, v) in enumerate(zip(arows, avals))
                    if np.any(r == j)), default=0.0)
    for j in range(n):
        # dense scatter of column j below the diagonal
        col = {}
        for i, v in zip(arows[j], avals[j]):
            if i >= j:
                col[i] = float(v)
        # subtract contributions of earlier columns k with L_jk != 0
        for k in range(j):
            ljk = cols[k].get(j)
            if ljk is None:
                continue
            scale = ljk * dvec[k]
            for i, lik in cols[k].items():
                if i >= j:
                    col[i] = col.get(i, 0.0) - lik * scale
        dj = col.pop(j, 0.0)
        if dj <= PD_PIVOT_RTOL * max_diag:
            raise NotPositiveDefiniteError(
                f"sparse factorisation hit a non-positive pivot {dj:.3e} "
                f"at column {j}", pivot=dj,
            )
        dvec[j] = dj
        cols[j] = {i: v / dj for i, v in col.items() if v != 0.0}
    rows, cix, vals = [], [], []
    for j in range(n):
        rows.append(j)
        cix.append(j)
        vals.append(1.0)
        for i, v in cols[j].items():
            rows.append(i)
            cix.append(j)
            vals.append(v)
    L = sps.csr_matrix((vals, (rows, cix)), shape=(n, n))
    return L, dvec


class RandomEffects:
    """Compiled random-effect terms bound to a data table."""

    def __init__(self, terms, data, effective_range=None):
        self.data = data
        self.terms = [
            compile_term(t, data, effective_range=effective_range) for t in terms
        ]
        start = 0
        self.theta_slices = []
        for ct in self.terms:
            nxt = ct.bind_params(start)
            self.theta_slices.append(slice(start, nxt))
            start = nxt
        self.n_params = start
        self.param_names = [n for ct in self.terms for n in ct.param_names()]

        # global combination offsets and blocks
        self.term_offsets = []
        q = 0
        self.blocks = []    # (term_idx, lo, hi) in global coordinates
        for k, ct in enumerate(self.terms):
            self.term_offsets.append(q)
            for lo, hi in ct.groups:
                self.blocks.append((k, q + lo, q + hi))
            q += ct.n_combos
        self.q = q
        self.z = self._build_z()
        self.sparse_mode = True
        self._cache = {}

    # -- construction -------------------------------------------------

    def _build_z(self):
        n = self.data.n
        mats = []
        for ct in self.terms:
            vals = ct.slope_values(self.data)
            rows = np.arange(n)
            mat = sps.csr_matrix(
                (vals, (rows, ct.row_combo)), shape=(n, ct.n_combos)
            )
            mat.eliminate_zeros()
            mats.append(mat)
        if not mats:
            return sps.csr_matrix((n, 0))
        z = sps.hstack(mats, format="csr")
        z.sort_indices()
        return z

    def param_bounds(self):
        return [b for ct in self.terms for b in ct.param_bounds()]

    def default_params(self):
        return np.array([v for ct in self.terms for v in ct.default_params()])

    def validate_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(
                f"theta has length {theta.size}, expected {self.n_params}"
            )
        for ct, sl in zip(self.terms, self.theta_slices):
            ct.validate_params(theta[sl])
        return theta

    # -- D and its factors ---------------------------------------------

    def eval_entry(self, block, a, b, theta):
        """Evaluate one D entry of a block (local combination indices)."""
        theta = self.validate_theta(theta)
        term_idx, lo, _ = self.blocks[block]
        ct = self.terms[term_idx]
        off = self.term_offsets[term_idx]
        return float(ct.program.evaluate(
            ct.table, np.array([lo - off + a]), ct.table,
            np.array([lo - off + b]), theta,
        )[0])

    def build_d_blocks(self, theta):
        """Dense lower blocks of D; symmetric mirror of computed triangle."""
        theta = self.validate_theta(theta)
        key = ("blocks", theta.tobytes())
        if key in self._cache:
            return self._cache[key]
        out = []
        for term_idx, lo, hi in self.blocks:
            ct = self.terms[term_idx]
            off = self.term_offsets[term_idx]
            idx = np.arange(lo - off, hi - off)
            m = idx.size
            ii, jj = np.tril_indices(m)
            vals = ct.program.evaluate(ct.table, idx[ii], ct.table, idx[jj], theta)
            block = np.zeros((m, m))
            block[ii, jj] = vals
            block[jj, ii] = vals
            if any(get_kernel(fn.name).compact for fn in ct.term.functions):
                block[np.abs(block) < STRUCTURAL_ZERO] = 0.0
            out.append(block)
        self._trim_cache()
        self._cache[key] = out
        return out

    def build_d(self, theta):
        """Assemble D in compressed sparse row form."""
        blocks = self.build_d_blocks(theta)
        if not blocks:
            return sps.csr_matrix((0, 0))
        d = sps.block_diag(blocks, format="csr")
        d.eliminate_zeros()
        d.sort_indices()
        return d

    def chol(self, theta):
        """L with L L^T = D, via the active (block or sparse) path."""
        theta = self.validate_theta(theta)
        if self.q == 0:
            return sps.csr_matrix((0, 0))
        key = ("chol", self.sparse_mode, theta.tobytes())
        if key in self._cache:
            return self._cache[key]
        if self.sparse_mode:
            L, dvec = sparse_ldl(self.build_d(theta))
            L = L @ sps.diags(np.sqrt(dvec))
            L = L.tocsr()
        else:
            blocks = self.build_d_blocks(theta)
            factors = [
                dense_block_cholesky(b, block_index=k)
                for k, b in enumerate(blocks)
            ]
            L = sps.block_diag(factors, format="csr")
        L.sort_indices()
        self._trim_cache()
        self._cache[key] = L
        return L

    def set_sparse(self, mode):
        self.sparse_mode = bool(mode)

    def clear_cache(self):
        self._cache.clear()

    def _trim_cache(self):
        # optimisers sweep many theta values; keep the cache bounded
        if len(self._cache) > 64:
            self._cache.clear()

    # -- statistics -----------------------------------------------------

    def log_likelihood(self, u, theta):
        """Multivariate Gaussian log density of u (or columns of U) under
        N(0, D(theta)), computed blockwise by forward substitution."""
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        U = u[:, None] if single else u
        if U.shape[0] != self.q:
            raise ValueError(f"u has length {U.shape[0]}, expected {self.q}")
        L = self.chol(theta)
        z = sps.linalg.spsolve_triangular(L.tocsr(), U, lower=True)
        if z.ndim == 1:
            z = z[:, None]
        logdiag = np.log(L.diagonal())
        out = (
            -0.5 * self.q * math.log(2.0 * math.pi)
            - math.fsum(logdiag)
            - 0.5 * np.sum(z * z, axis=0)
        )
        return float(out[0]) if single else out

    def simulate(self, rng, theta):
        """Draw u = L v with v standard normal."""
        v = rng.standard_normal(self.q)
        return self.chol(theta) @ v

    # -- prediction support ----------------------------------------------

    def cross_covariance(self, newdata, theta):
        """Covariance blocks between observed and new combination rows.

        Returns (d00, d01, d11, offsets_new) where d00 is Q x Q, d01 is
        Q x Q_new, d11 is Q_new x Q_new, built term by term.
        """
        theta = self.validate_theta(theta)
        d00 = self.build_d(theta).toarray()
        blocks01, blocks11, q_new, row_maps = [], [], [], []
        for ct in self.terms:
            new_table, row_map = ct.new_combos(newdata)
            m_new = new_table.shape[0]
            m_old = ct.n_combos
            io, jn = np.meshgrid(np.arange(m_old), np.arange(m_new), indexing="ij")
            c01 = ct.program.evaluate(
                ct.table, io.ravel(), new_table, jn.ravel(), theta
            ).reshape(m_old, m_new)
            ii, jj = np.meshgrid(np.arange(m_new), np.arange(m_new), indexing="ij")
            c11 = ct.program.evaluate(
                new_table, ii.ravel(), new_table, jj.ravel(), theta
            ).reshape(m_new, m_new)
            blocks01.append(c01)
            blocks11.append(c11)
            q_new.append(m_new)
            row_maps.append(row_map)
        if blocks01:
            d01 = _block_diag_dense(blocks01, (self.q, sum(q_new)),
                                    [b.shape for b in blocks01])
            d11 = _block_diag_dense(blocks11, (sum(q_new), sum(q_new)),
                                    [b.shape for b in blocks11])
        else:
            d01 = np.zeros((self.q, 0))
            d11 = np.zeros((0, 0))
        return d00, d01, d11, q_new, row_maps


def _block_diag_dense(blocks, shape, shapes):
    out = np.zeros(shape)
    r = c = 0
    for b, (dr, dc) in zip(blocks, shapes):
        out[r:r + dr, c:c + dc] = b
        r += dr
        c += dc
    return out
