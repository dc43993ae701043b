"""Outcome families and link functions.

Each family provides the inverse link and its derivative, the conditional
variance, the exact log density and its derivative in the linear predictor
(used by the samplers and fitters), and outcome simulation. ``phi`` is the
family scale parameter: the residual standard deviation for the Gaussian,
the dispersion for the Gamma (variance phi * mu^2), and the precision for
the Beta (variance mu (1-mu) / (1 + phi)). Binomial outcomes are Bernoulli.
"""

import numpy as np
from scipy import special


class FamilyError(ValueError):
    pass


def _logit_inv(eta):
    return special.expit(eta)


def _norm_pdf(x):
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _norm_cdf(x):
    return special.ndtr(x)


class Family:
    name = None
    links = ()
    has_scale = False

    def __init__(self, link=None):
        link = link or self.links[0]
        if link not in self.links:
            raise FamilyError(
                f"link {link!r} is not valid for the {self.name} family; "
                f"choose from {self.links}"
            )
        self.link = link

    def __repr__(self):
        return f"{type(self).__name__}(link={self.link!r})"

    # inverse link and its derivative ----------------------------------

    def inverse_link(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.link == "identity":
            return eta.copy()
        if self.link == "log":
            return np.exp(eta)
        if self.link == "logit":
            return _logit_inv(eta)
        if self.link == "probit":
            return _norm_cdf(eta)
        if self.link == "inverse":
            return 1.0 / eta
        raise FamilyError(f"unhandled link {self.link!r}")

    def dmu_deta(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.link == "identity":
            return np.ones_like(eta)
        if self.link == "log":
            return np.exp(eta)
        if self.link == "logit":
            mu = _logit_inv(eta)
            return mu * (1.0 - mu)
        if self.link == "probit":
            return _norm_pdf(eta)
        if self.link == "inverse":
            return -1.0 / eta**2
        raise FamilyError(f"unhandled link {self.link!r}")

    def link_fn(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.link == "identity":
            return mu.copy()
        if self.link == "log":
            return np.log(mu)
        if self.link == "logit":
            return np.log(mu / (1.0 - mu))
        if self.link == "probit":
            return special.ndtri(mu)
        if self.link == "inverse":
            return 1.0 / mu
        raise FamilyError(f"unhandled link {self.link!r}")

    # family-specific pieces --------------------------------------------

    def variance(self, mu, phi):
        raise NotImplementedError

    def check_mu(self, mu):
        """Raise when the mean leaves the family's support."""

    def loglik(self, y, eta, phi):
        raise NotImplementedError

    def score_eta(self, y, eta, phi):
        """d log f(y | eta) / d eta, exact."""
        mu = self.inverse_link(eta)
        self.check_mu(mu)
        return (y - mu) / self.variance(mu, phi) * self.dmu_deta(eta)

    def sample(self, rng, mu, phi):
        raise NotImplementedError

    def glm_weight(self, eta, phi):
        """Iterated weight (dmu/deta)^2 / Var(y | u); W^-1 is the
        conditional-variance contribution to the marginal covariance."""
        mu = self.inverse_link(eta)
        self.check_mu(mu)
        d = self.dmu_deta(eta)
        return d * d / self.variance(mu, phi)


class Gaussian(Family):
    name = "gaussian"
    links = ("identity", "log")
    has_scale = True

    def variance(self, mu, phi):
        return np.full_like(np.asarray(mu, dtype=float), phi**2)

    def loglik(self, y, eta, phi):
        mu = self.inverse_link(eta)
        return (
            -0.5 * np.log(2.0 * np.pi) - np.log(phi)
            - 0.5 * ((y - mu) / phi) ** 2
        )

    def sample(self, rng, mu, phi):
        return rng.normal(mu, phi)


class Binomial(Family):
    name = "binomial"
    links = ("logit", "log", "probit", "identity")

    def variance(self, mu, phi):
        return mu * (1.0 - mu)

    def check_mu(self, mu):
        if np.any(mu <= 0.0) or np.any(mu >= 1.0):
            raise FamilyError("binomial mean outside (0, 1)")

    def loglik(self, y, eta, phi):
        mu = self.inverse_link(eta)
        self.check_mu(mu)
        return y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu)

    def score_eta(self, y, eta, phi):
        if self.link == "logit":
            return y - _logit_inv(eta)    # canonical link shortcut
        return super().score_eta(y, eta, phi)

    def sample(self, rng, mu, phi):
        self.check_mu(mu)
        return (rng.random(np.shape(mu)) < mu).astype(float)


class Poisson(Family):
    name = "poisson"
    links = ("log", "identity")

    def variance(self, mu, phi):
        return mu

    def check_mu(self, mu):
        if np.any(mu <= 0.0):
            raise FamilyError("poisson mean must be positive")

    def loglik(self, y, eta, phi):
        mu = self.inverse_link(eta)
        self.check_mu(mu)
        return y * np.log(mu) - mu - special.gammaln(y + 1.0)

    def sample(self, rng, mu, phi):
        self.check_mu(mu)
        return rng.poisson(mu).astype(float)


class Gamma(Family):
    name = "gamma"
    links = ("log", "inverse", "identity")
    has_scale = True

    def variance(self, mu, phi):
        return phi * mu**2

    def check_mu(self, mu):
        if np.any(mu <= 0.0):
            raise FamilyError("gamma mean must be positive")

    def loglik(self, y, eta, phi):
        mu = self.inverse_link(eta)
        self.check_mu(mu)
        nu = 1.0 / phi
        return (
            nu * np.log(nu) - special.gammaln(nu)
            + (nu - 1.0) * np.log(y) - nu * np.log(mu) - nu * y / mu
        )

    def sample(self, rng, mu, phi):
        self.check_mu(mu)
        nu = 1.0 / phi
        return rng.gamma(shape=nu, scale=mu / nu)


class Beta(Family):
    name = "beta"
    links = ("logit",)
    has_scale = True

    def variance(self, mu, phi):
        return mu * (1.0 - mu) / (1.0 + phi)

    def check_mu(self, mu):
        if np.any(mu <= 0.0) or np.any(mu >= 1.0):
            raise FamilyError("beta mean outside (0, 1)")

    def loglik(self, y, eta, phi):
        mu = self.inverse_link(eta)
        self.check_mu(mu)
        a = mu * phi
        b = (1.0 - mu) * phi
        return (
            special.gammaln(phi) - special.gammaln(a) - special.gammaln(b)
            + (a - 1.0) * np.log(y) + (b - 1.0) * np.log(1.0 - y)
        )

    def score_eta(self, y, eta, phi):
        mu = self.inverse_link(eta)
        self.check_mu(mu)
        dldmu = phi * (
            np.log(y) - np.log(1.0 - y)
            - special.digamma(mu * phi) + special.digamma((1.0 - mu) * phi)
        )
        return dldmu * self.dmu_deta(eta)

    def sample(self, rng, mu, phi):
        self.check_mu(mu)
        g1 = rng.gamma(shape=mu * phi, scale=1.0)
        g2 = rng.gamma(shape=(1.0 - mu) * phi, scale=1.0)
        return g1 / (g1 + g2)


_FAMILIES = {f.name: f for f in (Gaussian, Binomial, Poisson, Gamma, Beta)}


def get_family(name, link=None):
    try:
        cls = _FAMILIES[name]
    except KeyError:
        raise FamilyError(
            f"unknown family {name!r}; choose from {sorted(_FAMILIES)}"
        ) from None
    return cls(link)
