"""GLMM model object: linear predictor, marginal covariance approximation,
information matrix, power, simulation, and prediction.

The marginal covariance uses the first-order approximation
``Sigma = W^-1 + Z D Z^T`` with W the GLM iterated weights; it is exact for
Gaussian-identity models. Statistics that need ``Sigma^-1`` exploit the
block structure induced by the random-effect grouping, falling back to a
dense solve when observations cannot be partitioned.
"""

import math

import numpy as np
from scipy import special

from .covariance import RandomEffects
from .datatable import DataTable
from .families import Family, get_family
from .formula import ModelFormula, build_design_matrix, parse_formula

# logit attenuation: eta shrinks by (1 + c^2 z D z^T)^(-1/2) with
# c = 16 sqrt(3) / (15 pi), the probit-logit scaling constant
_ATTEN_C2 = (16.0 * math.sqrt(3.0) / (15.0 * math.pi)) ** 2


def norm_cdf(x):
    return special.ndtr(x)


def norm_ppf(p):
    return special.ndtri(p)


class SingularInformationError(np.linalg.LinAlgError):

    def __init__(self, message, candidates=None):
        super().__init__(message)
        self.candidates = candidates or []


class PredictResult:

    def __init__(self, eta, re_mean, re_cov, term_sizes, row_maps):
        self.eta = eta
        self.re_mean = re_mean
        self.re_cov = re_cov
        self.term_sizes = term_sizes
        self.row_maps = row_maps


class Glmm:
    """A generalised linear mixed model bound to a data table.

    Parameters
    ----------
    formula : str or ModelFormula
        Fixed effects plus random terms, e.g.
        ``"~ factor(t) + int - 1 + (1|gr(cl)*ar1(t))"``. An outcome column
        may be named on the left of ``~``.
    data : DataTable
    family : Family or str
    beta, theta : array-like, optional
        Mean and covariance parameters; used directly by design statistics
        and as starting values by the fitters.
    var_par : float
        Family scale parameter (sd for gaussian).
    offset : array-like, optional
    attenuate : bool
        Adjust the linear predictor when approximating the marginal mean
        for log/logit links. Off by default.
    """

    def __init__(self, formula, data, family, beta=None, theta=None,
                 var_par=1.0, offset=None, attenuate=False,
                 effective_range=None, sparse=True):
        if isinstance(formula, str):
            formula = parse_formula(formula)
        if not isinstance(formula, ModelFormula):
            raise TypeError("formula must be a string or ModelFormula")
        if isinstance(family, str):
            family = get_family(family)
        if not isinstance(family, Family):
            raise TypeError("family must be a Family or family name")
        if not isinstance(data, DataTable):
            raise TypeError("data must be a DataTable")
        self.formula = formula
        self.data = data
        self.family = family
        self.X, self.x_names = build_design_matrix(formula, data)
        self.re = RandomEffects(
            formula.random, data, effective_range=effective_range
        )
        self.re.set_sparse(sparse)
        self.n, self.p = self.X.shape
        self.q = self.re.q

        self.beta = np.zeros(self.p) if beta is None else np.asarray(beta, dtype=float)
        if self.beta.shape != (self.p,):
            raise ValueError(f"beta has length {self.beta.size}, expected {self.p}")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")
        if theta is None:
            self.theta = self.re.default_params()
        else:
            self.theta = self.re.validate_theta(theta)
        self.var_par = float(var_par)
        if self.var_par <= 0:
            raise ValueError("var_par must be positive")
        self.offset = (
            np.zeros(self.n) if offset is None else np.asarray(offset, dtype=float)
        )
        if self.offset.shape != (self.n,):
            raise ValueError("offset length does not match the data")
        self.attenuate = bool(attenuate)
        self.version = 0
        self._cache = {}
        self._components = None

    # -- parameter management -------------------------------------------

    def update_parameters(self, beta=None, theta=None, var_par=None):
        """Set new parameter values; cached matrices recompute lazily."""
        if beta is not None:
            beta = np.asarray(beta, dtype=float)
            if beta.shape != (self.p,):
                raise ValueError(f"beta has length {beta.size}, expected {self.p}")
            if not np.all(np.isfinite(beta)):
                raise ValueError("beta must be finite")
            self.beta = beta
        if theta is not None:
            self.theta = self.re.validate_theta(theta)
            self.re.clear_cache()
        if var_par is not None:
            if var_par <= 0:
                raise ValueError("var_par must be positive")
            self.var_par = float(var_par)
        self.version += 1
        self._cache.clear()

    def use_attenuation(self, flag):
        self.attenuate = bool(flag)
        self.version += 1
        self._cache.clear()

    @property
    def y(self):
        if self.formula.outcome is None:
            raise ValueError("the model formula names no outcome column")
        return np.asarray(self.data[self.formula.outcome], dtype=float)

    # -- predictors and weights -------------------------------------------

    def linear_predictor(self, u=None):
        """eta = X beta + offset (+ Z u when u is given)."""
        eta = self.X @ self.beta + self.offset
        if u is not None:
            u = np.asarray(u, dtype=float)
            if u.shape != (self.q,):
                raise ValueError(f"u has length {u.size}, expected {self.q}")
            eta = eta + self.re.z @ u
        return eta

    def fitted(self, u=None):
        return self.family.inverse_link(self.linear_predictor(u))

    def _zdz_diag(self):
        key = "zdz_diag"
        if key not in self._cache:
            d = self.re.build_d(self.theta)
            zd = self.re.z @ d
            self._cache[key] = np.asarray(
                zd.multiply(self.re.z).sum(axis=1)
            ).ravel()
        return self._cache[key]

    def attenuated_eta(self):
        """Linear predictor adjusted to better approximate the marginal
        mean: log links add half the random-effect variance, logit links
        shrink by (1 + a z_i D z_i^T)^(-1/2)."""
        eta = self.X @ self.beta + self.offset
        if self.q == 0:
            return eta
        zdz = self._zdz_diag()
        if self.family.link == "log":
            return eta + 0.5 * zdz
        if self.family.link == "logit":
            return eta / np.sqrt(1.0 + _ATTEN_C2 * zdz)
        return eta

    def weights(self, eta=None):
        """Diagonal of the GLM iterated weight matrix W at eta."""
        if eta is None:
            eta = self.attenuated_eta() if self.attenuate else self.linear_predictor()
        return self.family.glm_weight(eta, self.var_par)

    # -- marginal covariance ----------------------------------------------

    def sigma(self, attenuate=None):
        """Dense marginal covariance approximation W^-1 + Z D Z^T."""
        if attenuate is None:
            attenuate = self.attenuate
        eta = self.attenuated_eta() if attenuate else self.linear_predictor()
        w = self.family.glm_weight(eta, self.var_par)
        out = np.diag(1.0 / w)
        if self.q:
            d = self.re.build_d(self.theta)
            out = out + (self.re.z @ d @ self.re.z.T).toarray()
        return out

    def _row_components(self):
        """Partition observations into groups independent under Sigma."""
        if self._components is not None:
            return self._components
        parent = np.arange(self.n)

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        def union(i, j):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[rj] = ri

        if self.q:
            col_block = np.empty(self.q, dtype=int)
            for b, (_, lo, hi) in enumerate(self.re.blocks):
                col_block[lo:hi] = b
            zc = self.re.z.tocsc()
            block_rep = {}
            for col in range(self.q):
                rows = zc.indices[zc.indptr[col]:zc.indptr[col + 1]]
                if rows.size == 0:
                    continue
                b = col_block[col]
                if b in block_rep:
                    union(block_rep[b], rows[0])
                else:
                    block_rep[b] = rows[0]
                for r in rows[1:]:
                    union(rows[0], r)
        groups = {}
        for i in range(self.n):
            groups.setdefault(find(i), []).append(i)
        self._components = [np.array(g) for g in groups.values()]
        return self._components

    def _sigma_blocks(self, attenuate=None):
        """(rows, Sigma_block) pairs covering the data."""
        if attenuate is None:
            attenuate = self.attenuate
        eta = self.attenuated_eta() if attenuate else self.linear_predictor()
        w = self.family.glm_weight(eta, self.var_par)
        d = self.re.build_d(self.theta) if self.q else None
        out = []
        for rows in self._row_components():
            sig = np.diag(1.0 / w[rows])
            if self.q:
                zg = self.re.z[rows]
                sig = sig + (zg @ d @ zg.T).toarray()
            out.append((rows, sig))
        return out

    def information_matrix(self):
        """M = (X^T Sigma^-1 X)^-1, the approximate covariance of beta-hat."""
        key = "infomat"
        if key in self._cache:
            return self._cache[key]
        info = np.zeros((self.p, self.p))
        for rows, sig in self._sigma_blocks():
            xg = self.X[rows]
            info += xg.T @ np.linalg.solve(sig, xg)
        try:
            chol = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            candidates = [
                name for name, col in zip(self.x_names, self.X.T)
                if np.ptp(col) == 0.0 and not np.all(col == 1.0)
            ]
            raise SingularInformationError(
                "X^T Sigma^-1 X is singular; candidate collinear columns: "
                f"{candidates or 'none obvious (check factor expansions)'}",
                candidates=candidates,
            ) from None
        inv_chol = np.linalg.inv(chol)
        m = inv_chol.T @ inv_chol
        self._cache[key] = m
        return m

    # -- power --------------------------------------------------------------

    def power(self, alpha=0.05):
        """Approximate power of two-sided Wald tests for each coefficient.

        Returns a list of dicts (parameter, value, se, power)."""
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must be inside (0, 1)")
        m = self.information_matrix()
        se = np.sqrt(np.diag(m))
        zcrit = norm_ppf(1.0 - alpha / 2.0)
        rows = []
        for name, b, s in zip(self.x_names, self.beta, se):
            rows.append({
                "parameter": name,
                "value": float(b),
                "se": float(s),
                "power": float(norm_cdf(abs(b) / s - zcrit)),
            })
        return rows

    # -- simulation -----------------------------------------------------------

    def simulate_re(self, rng):
        return self.re.simulate(rng, self.theta)

    def sim_data(self, rng, mode="y"):
        """Simulate outcomes at the current parameters.

        mode "y" returns the outcome vector, "data" the data table with a
        simulated ``y`` column appended, "all" a dict with y, u, X and Z.
        """
        if mode not in ("y", "data", "all"):
            raise ValueError("mode must be 'y', 'data' or 'all'")
        u = self.simulate_re(rng) if self.q else np.zeros(0)
        eta = self.linear_predictor(u if self.q else None)
        mu = self.family.inverse_link(eta)
        self.family.check_mu(mu)
        y = self.family.sample(rng, mu, self.var_par)
        if mode == "y":
            return y
        if mode == "data":
            return self.data.with_column("y", y)
        return {"y": y, "u": u, "X": self.X, "Z": self.re.z}

    # -- prediction -------------------------------------------------------------

    def predict(self, newdata, U):
        """Random-effect distribution at new variable values.

        Conditional on each column of U (Q x m), the new effects are
        Gaussian; the conditional mean is averaged over the columns while
        the covariance is common. Returns a PredictResult with the fixed
        linear predictor at the new rows.
        """
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if U.shape[0] != self.q or U.shape[1] == 0:
            raise ValueError(f"U must be {self.q} x m with m >= 1")
        x_new, _ = build_design_matrix(
            self.formula, newdata, levels=self._factor_levels()
        )
        eta_new = x_new @ self.beta
        d00, d01, d11, sizes, row_maps = self.re.cross_covariance(
            newdata, self.theta
        )
        try:
            sol = np.linalg.solve(d00, d01)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                "observed-effect covariance is singular; cannot condition"
            ) from None
        mean = sol.T @ U.mean(axis=1)
        cov = d11 - d01.T @ sol
        return PredictResult(eta_new, mean, cov, sizes, row_maps)

    def _factor_levels(self):
        key = "factor_levels"
        if key not in self._cache:
            levels = {}
            for kind, var in self.formula.fixed:
                if kind == "factor":
                    levels[var] = np.unique(np.asarray(self.data[var], dtype=float))
            self._cache[key] = levels
        return self._cache[key]
