"""Model fitting by Laplace approximation.

The marginal log likelihood of the standardised-effects model is
approximated by

    -1/2 log|I + Zt' W Zt| + sum_i log f(y_i | v, beta, phi) - 1/2 v'v

evaluated at the conditional mode of v. Fitting alternates a joint
(beta, v) step (Fisher scoring by default, derivative-free optionally)
with a (theta, phi) step on the full approximation, and ends with one
joint refinement of (beta, theta, phi) at the final mode.
"""

import math
from dataclasses import dataclass

import numpy as np

from .mcml import FitResult, glm_start, std_errors
from .optim import maximize_transformed, minimize_bounded


@dataclass
class LaOptions:
    variant: str = "scoring"    # or "dfo"
    tol: float = 0.01
    max_iter: int = 50
    inner_tol: float = 1e-9
    inner_max_iter: int = 200
    theta_budget: int = 800     # objective evaluations per covariance step
    refine_budget: int = 2500   # final joint refinement budget

    def __post_init__(self):
        if self.variant not in ("scoring", "dfo"):
            raise ValueError("variant must be 'scoring' or 'dfo'")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


def _zt(model, theta):
    return model.re.z @ model.re.chol(np.asarray(theta, dtype=float))


def joint_loglik(model, y, beta, phi, v):
    """Conditional joint log likelihood: sum_i log f(y_i|v) - v'v/2 at the
    current theta (through the model's cached Cholesky factor)."""
    zt = _zt(model, model.theta)
    eta = model.X @ beta + model.offset + zt @ v
    return math.fsum(model.family.loglik(y, eta, phi)) - 0.5 * float(v @ v)


def la_loglik(model, y, beta=None, theta=None, phi=None, v=None):
    """Laplace approximation of the marginal log likelihood at v."""
    beta = model.beta if beta is None else np.asarray(beta, dtype=float)
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    phi = model.var_par if phi is None else float(phi)
    v = np.zeros(model.q) if v is None else np.asarray(v, dtype=float)
    zt = _zt(model, theta)
    eta = model.X @ beta + model.offset + zt @ v
    ll = math.fsum(model.family.loglik(y, eta, phi)) - 0.5 * float(v @ v)
    w = model.family.glm_weight(eta, phi)
    a = np.eye(model.q) + (zt.T @ (zt.multiply(w[:, None]))).toarray()
    sign, logdet = np.linalg.slogdet(a)
    if sign <= 0:
        return -np.inf
    return ll - 0.5 * logdet


def scoring_update(model, y, beta, phi, v):
    """One Fisher-scoring step of (beta, v) on the joint log likelihood:
    beta' = beta + (X'WX)^-1 X' s and v' = v + (I + Zt'WZt)^-1 grad."""
    zt = _zt(model, model.theta)
    X = model.X
    eta = X @ beta + model.offset + zt @ v
    fam = model.family
    w = fam.glm_weight(eta, phi)
    score = fam.score_eta(y, eta, phi)
    beta_new = beta + np.linalg.solve(X.T @ (X * w[:, None]), X.T @ score)
    a = np.eye(model.q) + (zt.T @ (zt.multiply(w[:, None]))).toarray()
    grad = zt.T @ score - v
    v_new = v + np.linalg.solve(a, grad)
    return beta_new, v_new


def _mode_step(model, y, beta, phi, v, options):
    """Inner maximisation of the joint log likelihood over (beta, v)."""
    if options.variant == "scoring":
        for _ in range(options.inner_max_iter):
            beta_new, v_new = scoring_update(model, y, beta, phi, v)
            move = max(
                float(np.max(np.abs(beta_new - beta))),
                float(np.max(np.abs(v_new - v))) if v.size else 0.0,
            )
            beta, v = beta_new, v_new
            if move < options.inner_tol:
                break
        return beta, v

    def neg(pack):
        b, vv = pack[: model.p], pack[model.p:]
        try:
            val = joint_loglik(model, y, b, phi, vv)
        except Exception:
            return np.inf
        return -val if np.isfinite(val) else np.inf

    res = minimize_bounded(neg, np.r_[beta, v], budget=6000, xtol=1e-9)
    return res.x[: model.p], res.x[model.p:]


def la_fit(model, y=None, options=None):
    """Laplace-approximation maximum likelihood fit."""
    options = options or LaOptions()
    y = model.y if y is None else np.asarray(y, dtype=float)
    beta = glm_start(model, y)
    phi = model.var_par
    theta = model.theta.copy()
    model.update_parameters(beta=beta)
    v = np.zeros(model.q)
    has_scale = model.family.has_scale
    bounds = model.re.param_bounds()

    trace = []
    converged = False
    flags = [False] * theta.size
    it = 0
    for it in range(1, options.max_iter + 1):
        # step 1: conditional mode and mean parameters
        beta_new, v = _mode_step(model, y, beta, phi, v, options)

        # step 2: covariance (and scale) parameters on the full objective
        if not bounds and not has_scale:
            theta_new, phi_new = theta, phi
            value = la_loglik(model, y, beta_new, theta, phi, v)
            flags = []
        elif has_scale:
            def obj(pack):
                th, ph = pack[:-1], pack[-1]
                return la_loglik(model, y, beta_new, th, ph, v)

            packed, value, fl = maximize_transformed(
                obj, np.r_[theta, phi],
                list(bounds) + [(0.0, None, True, False)],
                budget=options.theta_budget,
            )
            theta_new, phi_new = packed[:-1], float(packed[-1])
            flags = fl[:-1]
        else:
            def obj(th):
                return la_loglik(model, y, beta_new, th, phi, v)

            theta_new, value, flags = maximize_transformed(
                obj, theta, bounds, budget=options.theta_budget
            )
            phi_new = phi

        delta = max(
            float(np.max(np.abs(beta_new - beta))),
            abs(phi_new - phi),
            float(np.max(np.abs(theta_new - theta))) if theta.size else 0.0,
        )
        beta, theta, phi = beta_new, theta_new, phi_new
        model.update_parameters(beta=beta, theta=theta, var_par=phi)
        trace.append({
            "iteration": it, "delta": delta, "beta": beta.copy(),
            "theta": theta.copy(), "phi": phi, "objective": value,
        })
        if delta <= options.tol:
            converged = True
            break

    # step 3: joint refinement of (beta, theta, phi) at the final mode
    before = la_loglik(model, y, beta, theta, phi, v)

    def joint_obj(pack):
        b = pack[: model.p]
        if has_scale:
            th = pack[model.p:-1]
            ph = pack[-1]
        else:
            th, ph = pack[model.p:], phi
        return la_loglik(model, y, b, th, ph, v)

    pack0 = np.r_[beta, theta, ([phi] if has_scale else [])]
    pack_bounds = (
        [(None, None, False, False)] * model.p + list(bounds)
        + ([(0.0, None, True, False)] if has_scale else [])
    )
    packed, after, fl = maximize_transformed(
        joint_obj, pack0, pack_bounds, budget=options.refine_budget
    )
    if after >= before:
        beta = packed[: model.p]
        if has_scale:
            theta, phi = packed[model.p:-1], float(packed[-1])
        else:
            theta = packed[model.p:]
        flags = fl[model.p: model.p + theta.size]
        model.update_parameters(beta=beta, theta=theta, var_par=phi)
        final = after
    else:
        final = before

    # re-polish the conditional mode at the final parameters so the
    # returned effects satisfy grad L(v-hat) ~ 0
    zt = _zt(model, model.theta)
    fam = model.family
    for _ in range(options.inner_max_iter):
        eta = model.X @ beta + model.offset + zt @ v
        w = fam.glm_weight(eta, phi)
        a = np.eye(model.q) + (zt.T @ (zt.multiply(w[:, None]))).toarray()
        grad = zt.T @ fam.score_eta(y, eta, phi) - v
        step = np.linalg.solve(a, grad)
        v = v + step
        if v.size == 0 or np.max(np.abs(step)) < options.inner_tol:
            break

    se_beta, se_theta = std_errors(model, "information")
    L = model.re.chol(model.theta)
    return FitResult(
        beta=beta, theta=theta, var_par=phi,
        se_beta=se_beta, se_theta=se_theta,
        converged=converged, n_iter=it, trace=trace,
        U=(L @ v)[:, None] if model.q else np.zeros((0, 1)),
        algorithm=f"la-{options.variant}", boundary=list(flags),
        loglik=final,
        message="converged" if converged else
        f"no convergence in {options.max_iter} iterations",
    )
