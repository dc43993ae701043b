import math

import numpy as np
import pytest

from glmmkit.blocks import nelder
from glmmkit.laplace import LaOptions, joint_loglik, la_fit, la_loglik, scoring_update
from glmmkit.model import Glmm
from glmmkit.optim import minimize_bounded

from oracles import dense_mvn_loglik


def gaussian_model(seed=0, n_groups=4, per=5, theta=0.5, sigma=0.7):
    data = nelder(f"~j({n_groups}) > i({per})")
    rng = np.random.default_rng(seed)
    data = data.with_column("x", rng.normal(size=data.n))
    model = Glmm("~ x + (1|gr(j))", data, "gaussian",
                 beta=[0.3, -0.6], theta=[theta], var_par=sigma)
    y = model.sim_data(np.random.default_rng(seed + 1))
    return model, y


def exact_marginal(model, y, beta, theta, sigma):
    model.update_parameters(beta=np.asarray(beta, dtype=float),
                            theta=np.atleast_1d(theta), var_par=sigma)
    zt = (model.re.z @ model.re.chol(model.theta)).toarray()
    cov = sigma**2 * np.eye(model.n) + zt @ zt.T
    return dense_mvn_loglik(y - model.X @ np.asarray(beta, dtype=float), cov)


def conditional_mode(model, y, beta, sigma):
    zt = (model.re.z @ model.re.chol(model.theta)).toarray()
    prec = zt.T @ zt / sigma**2 + np.eye(model.q)
    return np.linalg.solve(prec, zt.T @ (y - model.X @ beta) / sigma**2)


# ---------------------------------------------------------------------------
# la_loglik


def test_la_loglik_reduces_to_glm_when_d_vanishes():
    model, y = gaussian_model(theta=1e-9)
    v = np.zeros(model.q)
    got = la_loglik(model, y, v=v)
    want = math.fsum(model.family.loglik(y, model.linear_predictor(),
                                         model.var_par))
    assert got == pytest.approx(want, abs=1e-6)


def test_la_loglik_exact_for_gaussian_q1():
    data = nelder("~j(1) > i(6)")
    model = Glmm("~1 + (1|gr(j))", data, "gaussian",
                 beta=[0.4], theta=[0.8], var_par=0.6)
    y = model.sim_data(np.random.default_rng(5))
    vhat = conditional_mode(model, y, model.beta, 0.6)
    got = la_loglik(model, y, v=vhat)
    want = exact_marginal(model, y, [0.4], [0.8], 0.6)
    assert got == pytest.approx(want, abs=1e-10)


def test_la_loglik_exact_for_gaussian_any_q():
    for seed in range(5):
        model, y = gaussian_model(seed=seed, theta=0.4 + 0.1 * seed)
        vhat = conditional_mode(model, y, model.beta, model.var_par)
        got = la_loglik(model, y, v=vhat)
        want = exact_marginal(model, y, model.beta, model.theta,
                              model.var_par)
        assert got == pytest.approx(want, abs=1e-8)


def test_la_logdet_matches_dense_oracle():
    model, y = gaussian_model(seed=3)
    zt = (model.re.z @ model.re.chol(model.theta)).toarray()
    w = model.family.glm_weight(model.linear_predictor(), model.var_par)
    a = np.eye(model.q) + zt.T @ (zt * w[:, None])
    v = np.zeros(model.q)
    got = la_loglik(model, y, v=v)
    ll = math.fsum(model.family.loglik(y, model.linear_predictor(),
                                       model.var_par))
    want = ll - 0.5 * np.linalg.slogdet(a)[1]
    assert got == pytest.approx(want, rel=1e-9)


# ---------------------------------------------------------------------------
# scoring updates


def test_scoring_lands_on_mode_in_one_step_gaussian():
    model, y = gaussian_model(seed=7)
    beta0 = model.beta.copy()
    _, v1 = scoring_update(model, y, beta0, model.var_par, np.zeros(model.q))
    vhat = conditional_mode(model, y, beta0, model.var_par)
    assert np.allclose(v1, vhat, atol=1e-10)


def test_scoring_fixed_point():
    model, y = gaussian_model(seed=8)
    # GLS beta at the mode, mode at the GLS beta: joint stationary point
    beta, v = model.beta.copy(), np.zeros(model.q)
    for _ in range(200):
        beta, v = scoring_update(model, y, beta, model.var_par, v)
    beta2, v2 = scoring_update(model, y, beta, model.var_par, v)
    assert np.allclose(beta2, beta, atol=1e-10)
    assert np.allclose(v2, v, atol=1e-10)


def test_scoring_and_dfo_agree_on_binomial_toy():
    data = nelder("~j(4) > i(6)")
    model = Glmm("~1 + (1|gr(j))", data, "binomial", beta=[0.3], theta=[0.6])
    y = model.sim_data(np.random.default_rng(9))

    beta, v = np.array([0.0]), np.zeros(model.q)
    for _ in range(300):
        beta, v = scoring_update(model, y, beta, 1.0, v)

    def neg(pack):
        return -joint_loglik(model, y, pack[:1], 1.0, pack[1:])

    res = minimize_bounded(neg, np.r_[beta + 0.3, v + 0.2], budget=20000,
                           xtol=1e-10)
    assert np.allclose(res.x[:1], beta, atol=1e-4)
    assert np.allclose(res.x[1:], v, atol=1e-4)


# ---------------------------------------------------------------------------
# full fits


def test_la_fit_matches_dense_marginal_mle():
    model, y = gaussian_model(seed=11, n_groups=6, per=8, theta=0.5)
    res = la_fit(model, y=y, options=LaOptions(tol=1e-6, max_iter=200))

    # oracle: directly maximise the exact marginal likelihood
    def neg(pack):
        beta, log_theta, log_sigma = pack[:2], pack[2], pack[3]
        return -exact_marginal(model, y, beta, math.exp(log_theta),
                               math.exp(log_sigma))

    start = np.r_[res.beta, math.log(max(res.theta[0], 1e-4)),
                  math.log(res.var_par)]
    ref = minimize_bounded(neg, start + 0.05, budget=20000, xtol=1e-12)
    assert np.allclose(res.beta, ref.x[:2], atol=1e-4)
    assert res.theta[0] == pytest.approx(math.exp(ref.x[2]), abs=1e-4)
    assert res.var_par == pytest.approx(math.exp(ref.x[3]), abs=1e-4)


def test_la_fit_flags_boundary_when_no_cluster_variance():
    data = nelder("~j(6) > i(10)")
    rng = np.random.default_rng(13)
    data = data.with_column("x", rng.normal(size=data.n))
    model = Glmm("~ x + (1|gr(j))", data, "gaussian",
                 beta=[0.2, 0.5], theta=[0.5], var_par=1.0)
    y = model.X @ np.array([0.2, 0.5]) + rng.normal(size=data.n)  # no cluster effect
    res = la_fit(model, y=y)
    assert res.theta[0] < 0.05 or res.boundary[0]


def test_la_fit_objective_monotone_on_dfo_path():
    model, y = gaussian_model(seed=15, n_groups=3, per=4)
    res = la_fit(model, y=y, options=LaOptions(variant="dfo", tol=1e-4,
                                               max_iter=30))
    objs = [row["objective"] for row in res.trace]
    assert all(b >= a - 1e-6 for a, b in zip(objs, objs[1:]))


def test_la_fit_step3_never_decreases_objective():
    model, y = gaussian_model(seed=16)
    res = la_fit(model, y=y, options=LaOptions(tol=1e-5, max_iter=100))
    assert res.loglik >= res.trace[-1]["objective"] - 1e-9


def test_la_fit_binomial_runs_and_converges():
    data = nelder("~(cl(6) * t(3)) > i(4)")
    data = data.with_column("int", (data["t"] > data["cl"]).astype(float))
    model = Glmm("~ int + factor(t) - 1 + (1|gr(cl))", data, "binomial",
                 beta=np.r_[0.4, np.zeros(3)], theta=[0.4])
    y = model.sim_data(np.random.default_rng(17))
    res = la_fit(model, y=y)
    assert res.converged
    assert np.all(np.isfinite(res.beta))
    assert np.all(np.isfinite(res.se_beta))


def test_gradient_vanishes_at_converged_mode():
    from glmmkit.mcml import log_gradient
    from scipy.sparse.linalg import spsolve_triangular

    model, y = gaussian_model(seed=21)
    res = la_fit(model, y=y, options=LaOptions(tol=1e-6, max_iter=150))
    L = model.re.chol(model.theta).tocsr()
    vhat = spsolve_triangular(L, res.U[:, 0], lower=True)
    grad = log_gradient(model, vhat, y)
    assert np.max(np.abs(grad)) < 1e-4
