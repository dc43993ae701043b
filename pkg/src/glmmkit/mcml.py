"""Full-likelihood model fitting by Monte Carlo maximum likelihood.

Each outer iteration draws standardised random effects v with Hamiltonian
Monte Carlo at the current parameters, transforms them through the
covariance Cholesky factor, then updates the mean parameters (Newton
scoring or expectation maximisation over the sampled effects) and the
covariance parameters (Gaussian likelihood of the samples). Iteration stops
when the largest parameter change falls below the tolerance. An optional
importance-sampling refinement of all parameters can follow, and standard
errors come from the information matrix or a numerical Hessian of the
simulated likelihood.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .hmc import HmcOptions, hmc_sample
from .optim import minimize_bounded, maximize_transformed


class EssError(RuntimeError):
    """Importance weights too degenerate to trust the simulated likelihood."""


class NonPDHessianError(RuntimeError):

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


@dataclass
class McmlOptions:
    method: str = "mcnr"            # or "mcem"
    tol: float = 0.01
    max_iter: int = 100
    se_method: str = "information"  # or "hessian"
    simlik: bool = False
    warm_start: str = None          # "la" fits a Laplace approximation first

    def __post_init__(self):
        if self.method not in ("mcnr", "mcem"):
            raise ValueError("method must be 'mcnr' or 'mcem'")
        if self.se_method not in ("information", "hessian"):
            raise ValueError("se_method must be 'information' or 'hessian'")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class FitResult:
    beta: np.ndarray
    theta: np.ndarray
    var_par: float
    se_beta: np.ndarray = None
    se_theta: np.ndarray = None
    converged: bool = False
    n_iter: int = 0
    trace: list = field(default_factory=list)
    U: np.ndarray = None
    accept_rate: float = None
    algorithm: str = ""
    boundary: list = field(default_factory=list)
    message: str = ""
    loglik: float = None


# ---------------------------------------------------------------------------
# pieces


def glm_start(model, y):
    """Starting beta from an iterated weighted least squares GLM fit that
    ignores the random effects."""
    fam = model.family
    X = model.X
    if fam.name == "gaussian":
        mu = y.astype(float)
    elif fam.name in ("binomial", "beta"):
        mu = (y + 0.5) / 2.0
        mu = np.clip(mu, 0.02, 0.98)
    else:
        mu = y + np.mean(np.abs(y)) * 0.1 + 0.1
    eta = fam.link_fn(mu) - model.offset
    beta = np.linalg.lstsq(X, eta, rcond=None)[0]
    for _ in range(25):
        eta = X @ beta + model.offset
        mu = fam.inverse_link(eta)
        try:
            fam.check_mu(mu)
        except Exception:
            break
        w = fam.glm_weight(eta, model.var_par)
        z = eta - model.offset + (y - mu) / np.maximum(fam.dmu_deta(eta), 1e-10)
        wx = X * w[:, None]
        new = np.linalg.solve(X.T @ wx, wx.T @ z)
        if np.max(np.abs(new - beta)) < 1e-10:
            beta = new
            break
        beta = new
    return beta


def log_gradient(model, v, y, beta=None, theta=None, var_par=None, zt=None):
    """Gradient of the joint log likelihood of the standardised effects,
    grad = Zt' dlogf/deta - v with Zt = Z L."""
    beta = model.beta if beta is None else beta
    theta = model.theta if theta is None else theta
    phi = model.var_par if var_par is None else var_par
    if zt is None:
        zt = model.re.z @ model.re.chol(theta)
    eta = model.X @ beta + model.offset + zt @ v
    return zt.T @ model.family.score_eta(y, eta, phi) - v


def _make_target(model, y, beta, phi, zt):
    xb = model.X @ beta + model.offset
    fam = model.family
    zt_T = zt.T.tocsr()

    def logp_grad(v):
        eta = xb + zt @ v
        try:
            ll = math.fsum(fam.loglik(y, eta, phi)) - 0.5 * float(v @ v)
            score = fam.score_eta(y, eta, phi)
        except Exception:
            return -np.inf, np.zeros_like(v)
        if not np.isfinite(ll):
            return -np.inf, np.zeros_like(v)
        return ll, zt_T @ score - v

    return logp_grad


def sample_re(model, y, hmc_options, rng, beta=None, phi=None, v0=None):
    """Draw V (Q x m) from the conditional density of the standardised
    effects at the given parameters, and return (V, result)."""
    beta = model.beta if beta is None else beta
    phi = model.var_par if phi is None else phi
    if model.q == 0:
        from .hmc import HmcResult

        draws = np.zeros((0, hmc_options.samples))
        return draws, HmcResult(draws, 1.0, 0.0, 0)
    zt = model.re.z @ model.re.chol(model.theta)
    target = _make_target(model, y, beta, phi, zt)
    q0 = np.zeros(model.q) if v0 is None else v0
    res = hmc_sample(target, q0, hmc_options, rng)
    return res.draws, res


def mcem_step(model, y, U, beta0, phi0):
    """Maximise the mean complete-data log likelihood over (beta, phi)."""
    fam = model.family
    zu = (model.re.z @ U) if model.q else np.zeros((model.n, U.shape[1]))
    xoff = model.offset

    def mean_loglik(beta, phi):
        eta = (model.X @ beta + xoff)[:, None] + zu
        try:
            ll = fam.loglik(y[:, None], eta, phi)
        except Exception:
            return -np.inf
        val = float(np.sum(ll)) / U.shape[1]
        return val if np.isfinite(val) else -np.inf

    if fam.has_scale:
        def neg(pack):
            return -mean_loglik(pack[:-1], math.exp(pack[-1]))

        x0 = np.r_[beta0, math.log(phi0)]
        res = minimize_bounded(neg, x0, budget=4000, xtol=1e-7)
        return res.x[:-1], math.exp(res.x[-1])

    def neg(beta):
        return -mean_loglik(beta, phi0)

    res = minimize_bounded(neg, beta0, budget=4000, xtol=1e-7)
    return res.x, phi0


def mcnr_step(model, y, U, beta0, phi0):
    """One Newton (Fisher scoring) update of beta using sampled effects:
    beta + (E[X'WX])^-1 E[X' dlogf/deta]."""
    fam = model.family
    m = U.shape[1]
    zu = (model.re.z @ U) if model.q else np.zeros((model.n, m))
    X = model.X
    info = np.zeros((model.p, model.p))
    score = np.zeros(model.p)
    for j in range(m):
        eta = X @ beta0 + model.offset + zu[:, j]
        w = fam.glm_weight(eta, phi0)
        info += X.T @ (X * w[:, None])
        score += X.T @ fam.score_eta(y, eta, phi0)
    info /= m
    score /= m
    try:
        delta = np.linalg.solve(info, score)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "X'WX is singular in the scoring update"
        ) from None
    return beta0 + delta


def phi_step(model, y, U, beta, phi0):
    """Maximum likelihood scale update given sampled effects."""
    fam = model.family
    if not fam.has_scale:
        return phi0
    zu = (model.re.z @ U) if model.q else np.zeros((model.n, U.shape[1]))
    eta = (model.X @ beta + model.offset)[:, None] + zu
    if fam.name == "gaussian":
        mu = fam.inverse_link(eta)
        # floor keeps the weights finite on noise-free data
        return float(max(np.sqrt(np.mean((y[:, None] - mu) ** 2)), 1e-8))

    def neg(logphi):
        try:
            val = float(np.sum(fam.loglik(y[:, None], eta, math.exp(logphi[0]))))
        except Exception:
            return np.inf
        return -val if np.isfinite(val) else np.inf

    res = minimize_bounded(neg, np.array([math.log(phi0)]), budget=200)
    return float(math.exp(res.x[0]))


def theta_step(model, U, theta0, budget=400):
    """Maximise the mean Gaussian log density of the sampled effects over
    the covariance parameters (box constraints via transforms)."""
    re = model.re
    if re.n_params == 0:
        return np.asarray(theta0, dtype=float), []

    def objective(theta):
        try:
            vals = re.log_likelihood(U, theta)
        except Exception:
            return -np.inf
        out = float(np.mean(vals))
        return out if np.isfinite(out) else -np.inf

    theta, value, flags = maximize_transformed(
        objective, theta0, re.param_bounds(), budget=budget
    )
    return theta, flags


# ---------------------------------------------------------------------------
# simulated likelihood


def _simlik_parts(model, y, U, beta, phi, theta, h_log):
    fam = model.family
    zu = (model.re.z @ U) if model.q else np.zeros((model.n, U.shape[1]))
    eta = (model.X @ beta + model.offset)[:, None] + zu
    ly = np.sum(fam.loglik(y[:, None], eta, phi), axis=0)
    lu = model.re.log_likelihood(U, theta)
    return ly + lu - h_log


def simulated_loglik(model, y, U, beta, phi, theta, h_log):
    """Log of the importance-sampling likelihood estimate."""
    logw = _simlik_parts(model, y, U, beta, phi, theta, h_log)
    mx = np.max(logw)
    if not np.isfinite(mx):
        return -np.inf
    return mx + math.log(np.mean(np.exp(logw - mx)))


def effective_sample_size(logw):
    mx = np.max(logw)
    w = np.exp(logw - mx)
    return float(w.sum() ** 2 / (w * w).sum())


def simlik_refine(model, y, U, beta, phi, theta, h_log=None, min_ess=10.0):
    """Refine (beta, phi, theta) by maximising the simulated likelihood.

    h_log defaults to the (unnormalised) joint density at the current
    parameters, under which the starting weights are flat.
    """
    if h_log is None:
        h_log = _simlik_parts(
            model, y, U, beta, phi, theta, np.zeros(U.shape[1])
        )
    logw0 = _simlik_parts(model, y, U, beta, phi, theta, h_log)
    ess = effective_sample_size(logw0)
    if ess < min_ess:
        raise EssError(
            f"effective sample size {ess:.2f} below {min_ess}; the "
            "importance weights are too degenerate for refinement"
        )
    re = model.re
    bounds = re.param_bounds()
    from .optim import BoxTransform

    tr = BoxTransform(bounds)
    has_scale = model.family.has_scale

    def unpack(x):
        b = x[: model.p]
        if has_scale:
            ph = math.exp(x[model.p])
            th = tr.to_constrained(x[model.p + 1:])
        else:
            ph = phi
            th = tr.to_constrained(x[model.p:])
        return b, ph, th

    def neg(x):
        b, ph, th = unpack(x)
        try:
            val = simulated_loglik(model, y, U, b, ph, th, h_log)
        except Exception:
            return np.inf
        return -val if np.isfinite(val) else np.inf

    x0 = np.r_[beta, ([math.log(phi)] if has_scale else []),
               tr.to_unconstrained(theta)]
    res = minimize_bounded(neg, x0, budget=4000, xtol=1e-7)
    b, ph, th = unpack(res.x)
    return b, ph, th, -res.fun


# ---------------------------------------------------------------------------
# standard errors


def std_errors(model, method="information", y=None, U=None, h_log=None):
    """Standard errors of the mean parameters (and covariance parameters
    under the Hessian method)."""
    if method == "information":
        m = model.information_matrix()
        return np.sqrt(np.diag(m)), None
    if method != "hessian":
        raise ValueError("method must be 'information' or 'hessian'")
    if y is None or U is None:
        raise ValueError("the hessian method needs y and sampled effects U")
    beta, phi, theta = model.beta, model.var_par, model.theta
    if h_log is None:
        h_log = _simlik_parts(model, y, U, beta, phi, theta,
                              np.zeros(U.shape[1]))
    has_scale = model.family.has_scale
    x0 = np.r_[beta, ([phi] if has_scale else []), theta]

    def f(x):
        b = x[: model.p]
        ph = x[model.p] if has_scale else phi
        th = x[model.p + (1 if has_scale else 0):]
        return simulated_loglik(model, y, U, b, ph, th, h_log)

    k = x0.size
    H = np.zeros((k, k))
    h = 1e-4 * (1.0 + np.abs(x0))
    f0 = f(x0)
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h[i]
            ej[j] = h[j]
            if i == j:
                val = (f(x0 + ei) - 2 * f0 + f(x0 - ei)) / (h[i] ** 2)
            else:
                val = (
                    f(x0 + ei + ej) - f(x0 + ei - ej)
                    - f(x0 - ei + ej) + f(x0 - ei - ej)
                ) / (4 * h[i] * h[j])
            H[i, j] = H[j, i] = val
    neg_h = -H
    eig = np.linalg.eigvalsh(neg_h)
    if np.any(eig <= 0):
        raise NonPDHessianError(
            f"negative Hessian is not positive definite; eigenvalues {eig}",
            eigenvalues=eig,
        )
    cov = np.linalg.inv(neg_h)
    se = np.sqrt(np.diag(cov))
    se_beta = se[: model.p]
    se_theta = se[model.p + (1 if has_scale else 0):]
    return se_beta, se_theta


# ---------------------------------------------------------------------------
# driver


def mcml_fit(model, y=None, options=None, hmc_options=None, rng=None):
    """Fit the model by Monte Carlo maximum likelihood (Algorithm: sample,
    update mean parameters, update covariance parameters, repeat)."""
    options = options or McmlOptions()
    hmc_options = hmc_options or HmcOptions()
    rng = rng if rng is not None else np.random.default_rng()
    y = model.y if y is None else np.asarray(y, dtype=float)

    if options.warm_start == "la":
        from .laplace import LaOptions, la_fit

        warm = la_fit(model, y=y, options=LaOptions(
            tol=0.02, max_iter=25, theta_budget=300, refine_budget=600,
        ))
        model.update_parameters(beta=warm.beta, theta=warm.theta,
                                var_par=warm.var_par)
        beta = warm.beta.copy()
    else:
        beta = glm_start(model, y)
        model.update_parameters(beta=beta)
    phi = model.var_par
    theta = model.theta.copy()

    trace = []
    converged = False
    v_last = None
    U = np.zeros((model.q, hmc_options.samples))
    accept = None
    flags = [False] * theta.size
    it = 0
    for it in range(1, options.max_iter + 1):
        V, res = sample_re(model, y, hmc_options, rng, beta=beta, phi=phi,
                           v0=v_last)
        accept = res.accept_rate
        v_last = V[:, -1].copy()
        L = model.re.chol(theta)
        U = L @ V

        if options.method == "mcem":
            beta_new, phi_new = mcem_step(model, y, U, beta, phi)
        else:
            beta_new = mcnr_step(model, y, U, beta, phi)
            phi_new = phi_step(model, y, U, beta_new, phi)
        theta_new, flags = theta_step(model, U, theta)

        delta = max(
            float(np.max(np.abs(beta_new - beta))),
            abs(phi_new - phi),
            float(np.max(np.abs(theta_new - theta))) if theta.size else 0.0,
        )
        beta, phi, theta = beta_new, phi_new, theta_new
        model.update_parameters(beta=beta, theta=theta, var_par=phi)
        trace.append({
            "iteration": it, "delta": delta,
            "beta": beta.copy(), "phi": phi, "theta": theta.copy(),
            "accept": accept,
        })
        if delta <= options.tol:
            converged = True
            break

    loglik = None
    if options.simlik:
        beta, phi, theta, loglik = simlik_refine(model, y, U, beta, phi, theta)
        model.update_parameters(beta=beta, theta=theta, var_par=phi)

    se_beta, se_theta = std_errors(
        model, options.se_method, y=y, U=U if model.q else None
    )
    return FitResult(
        beta=beta, theta=theta, var_par=phi,
        se_beta=se_beta, se_theta=se_theta,
        converged=converged, n_iter=it, trace=trace, U=U,
        accept_rate=accept, algorithm=f"mcml-{options.method}",
        boundary=flags, loglik=loglik,
        message="converged" if converged else
        f"no convergence in {options.max_iter} iterations",
    )
