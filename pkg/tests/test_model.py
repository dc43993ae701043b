import math

import numpy as np
import pytest
from scipy import stats

from glmmkit.blocks import nelder
from glmmkit.datatable import DataTable
from glmmkit.families import FamilyError, get_family
from glmmkit.model import Glmm, SingularInformationError

from oracles import dense_mvn_loglik


def gaussian_toy(n_groups=4, per=3, sigma=0.5, theta=0.3, seed=0):
    data = nelder(f"~j({n_groups}) > i({per * n_groups})")
    rng = np.random.default_rng(seed)
    data = data.with_column("x", rng.normal(size=data.n))
    model = Glmm(
        "~ x + (1|gr(j))", data, "gaussian",
        beta=np.array([0.0, 1.0]), theta=np.array([theta]), var_par=sigma,
    )
    return model, rng


# ---------------------------------------------------------------------------
# linear predictor


def test_linear_predictor_zero():
    data = nelder("~j(2) > i(2)")
    m = Glmm("~1 + (1|gr(j))", data, "gaussian", beta=[0.0], theta=[0.5])
    assert np.allclose(m.linear_predictor(np.zeros(m.q)), 0.0)


def test_linear_predictor_identity_x():
    data = DataTable({"a": np.array([1, 0]), "b": np.array([0, 1]),
                      "j": np.array([1, 2])})
    m = Glmm("~ a + b - 1 + (1|gr(j))", data, "gaussian",
             beta=[1.0, 2.0], theta=[0.5])
    assert np.allclose(m.linear_predictor(), [1.0, 2.0])


def test_linear_predictor_matches_dense_oracle():
    model, rng = gaussian_toy()
    u = rng.normal(size=model.q)
    got = model.linear_predictor(u)
    want = model.X @ model.beta + model.offset + model.re.z.toarray() @ u
    assert np.allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# weights


def test_gaussian_weights_are_inverse_variance():
    model, _ = gaussian_toy(sigma=0.7)
    w = model.weights()
    assert np.allclose(1.0 / w, 0.49)


def test_binomial_logit_weight_matches_finite_differences():
    fam = get_family("binomial", "logit")
    for eta in (0.0, 0.6, -1.3):
        h = 1e-6
        dmu = (fam.inverse_link(eta + h) - fam.inverse_link(eta - h)) / (2 * h)
        mu = fam.inverse_link(eta)
        var = mu * (1 - mu)
        want = dmu**2 / var
        assert fam.glm_weight(np.array([eta]), 1.0)[0] == pytest.approx(want, rel=1e-8)
    assert fam.glm_weight(np.array([0.0]), 1.0)[0] == pytest.approx(0.25)
    # W^-1 entry at eta=0 is 4
    assert 1.0 / fam.glm_weight(np.array([0.0]), 1.0)[0] == pytest.approx(4.0)


def test_poisson_log_weight_at_zero():
    fam = get_family("poisson")
    assert fam.dmu_deta(np.array([0.0]))[0] == pytest.approx(1.0)
    assert fam.variance(np.array([1.0]), 1.0)[0] == pytest.approx(1.0)


def test_binomial_identity_support_error():
    fam = get_family("binomial", "identity")
    with pytest.raises(FamilyError):
        fam.glm_weight(np.array([1.5]), 1.0)


# ---------------------------------------------------------------------------
# marginal covariance


def test_sigma_gaussian_no_randomness():
    data = nelder("~j(3) > i(2)")
    m = Glmm("~1 + (1|gr(j))", data, "gaussian", beta=[0.0],
             theta=[1e-8], var_par=0.9)
    sig = m.sigma()
    assert np.allclose(sig, 0.81 * np.eye(6), atol=1e-10)


def test_sigma_gaussian_exact():
    model, _ = gaussian_toy(sigma=0.5, theta=0.3)
    sig = model.sigma()
    want = 0.25 * np.eye(model.n) + (
        model.re.z @ model.re.build_d(model.theta) @ model.re.z.T
    ).toarray()
    assert np.allclose(sig, want, atol=1e-14)


def test_attenuated_mean_matches_mc_integral():
    # one cluster, binomial-logit; oracle integrates over u ~ N(0, theta^2)
    data = DataTable({"j": np.ones(4, dtype=np.int64)})
    theta = 0.15
    m = Glmm("~1 + (1|gr(j))", data, "binomial", beta=[0.5], theta=[theta])
    m.use_attenuation(True)
    mu_att = m.family.inverse_link(m.attenuated_eta())[0]
    rng = np.random.default_rng(99)
    draws = 1.0 / (1.0 + np.exp(-(0.5 + theta * rng.standard_normal(100_000))))
    mc_mean = draws.mean()
    mc_se = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(mu_att - mc_mean) < 3 * mc_se
    # unattenuated path differs only through the eta adjustment
    m.use_attenuation(False)
    assert m.attenuated_eta()[0] != m.linear_predictor()[0] or theta == 0


def test_attenuation_noop_for_gaussian_identity():
    model, _ = gaussian_toy()
    a = model.sigma(attenuate=False)
    b = model.sigma(attenuate=True)
    assert np.allclose(a, b, atol=1e-15)


def test_log_link_attenuation_shifts_by_half_variance():
    data = DataTable({"j": np.ones(3, dtype=np.int64)})
    m = Glmm("~1 + (1|gr(j))", data, "poisson", beta=[0.1], theta=[0.4])
    assert np.allclose(m.attenuated_eta(), 0.1 + 0.5 * 0.16)


# ---------------------------------------------------------------------------
# information matrix and power


def test_information_matrix_iid_mean():
    data = nelder("~j(25)")
    m = Glmm("~1 + (1|gr(j))", data, "gaussian", beta=[0.0],
             theta=[1e-9], var_par=2.0)
    info = m.information_matrix()
    assert info[0, 0] == pytest.approx(4.0 / 25.0, rel=1e-6)


def test_information_matrix_block_equals_dense_oracle():
    model, _ = gaussian_toy(n_groups=5, per=4, sigma=0.8, theta=0.45)
    got = model.information_matrix()
    sig = model.sigma()
    want = np.linalg.inv(model.X.T @ np.linalg.solve(sig, model.X))
    assert np.allclose(got, want, rtol=1e-9, atol=1e-12)


def test_information_matrix_binomial_block_equals_dense():
    data = nelder("~(cl(4) * t(3)) > i(2)")
    data = data.with_column("trt", (data["t"] > data["cl"]).astype(float))
    m = Glmm("~ factor(t) + trt - 1 + (1|gr(cl)*ar1(t))", data, "binomial",
             beta=np.r_[np.zeros(3), 0.4], theta=[0.3, 0.6])
    got = m.information_matrix()
    sig = m.sigma()
    want = np.linalg.inv(m.X.T @ np.linalg.solve(sig, m.X))
    assert np.allclose(got, want, rtol=1e-9)


def test_singular_information_reports_candidates():
    data = nelder("~j(4) > i(2)")
    data = data.with_column("zero", np.zeros(data.n))
    m = Glmm("~ zero + (1|gr(j))", data, "gaussian", theta=[0.3])
    with pytest.raises(SingularInformationError) as err:
        m.information_matrix()
    assert "zero" in err.value.candidates


def test_power_zero_effect_is_alpha_over_two():
    model, _ = gaussian_toy()
    model.update_parameters(beta=np.zeros(model.p))
    rows = model.power(alpha=0.05)
    for row in rows:
        assert row["power"] == pytest.approx(0.025, abs=1e-10)


def test_power_at_unit_z():
    # SE equal to |beta| puts the z statistic at 1
    want = stats.norm.cdf(1.0 - stats.norm.ppf(0.975))
    assert want == pytest.approx(0.1685, abs=5e-5)
    model, _ = gaussian_toy()
    rows = model.power()
    se = rows[1]["se"]
    model.update_parameters(beta=np.array([0.0, se]))
    rows = model.power()
    assert rows[1]["power"] == pytest.approx(want, rel=1e-6)


def test_power_monotone_in_effect_and_cluster_variance():
    data = nelder("~(cl(6) * t(4)) > i(3)")
    data = data.with_column("trt", (data["t"] > data["cl"]).astype(float))

    def power_at(beta_trt, theta1):
        m = Glmm("~ factor(t) + trt - 1 + (1|gr(cl)*ar1(t))", data, "binomial",
                 beta=np.r_[np.zeros(4), beta_trt], theta=[theta1, 0.7])
        return m.power()[-1]["power"]

    effects = np.linspace(0.05, 1.2, 10)
    powers = [power_at(b, 0.25) for b in effects]
    assert all(a < b for a, b in zip(powers, powers[1:]))
    scales = np.linspace(0.05, 0.9, 10)
    powers = [power_at(0.5, s) for s in scales]
    assert all(a > b for a, b in zip(powers, powers[1:]))


# ---------------------------------------------------------------------------
# simulation


def test_sim_data_gaussian_zero_mean():
    data = nelder("~j(40) > i(25)")
    m = Glmm("~1 + (1|gr(j))", data, "gaussian", beta=[0.0],
             theta=[1e-9], var_par=1.0)
    y = m.sim_data(np.random.default_rng(5))
    assert abs(y.mean()) < 3.0 / math.sqrt(y.size)


def test_sim_data_binomial_rate():
    data = nelder("~j(1) > i(4000)")
    m = Glmm("~1 + (1|gr(i))", data, "binomial", beta=[0.7], theta=[1e-9])
    y = m.sim_data(np.random.default_rng(6))
    p = 1.0 / (1.0 + math.exp(-0.7))
    se = math.sqrt(p * (1 - p) / y.size)
    assert abs(y.mean() - p) < 3 * se


def test_sim_data_all_shapes():
    model, _ = gaussian_toy()
    out = model.sim_data(np.random.default_rng(1), mode="all")
    assert out["y"].shape == (model.n,)
    assert out["u"].shape == (model.q,)
    assert out["X"].shape == (model.n, model.p)
    assert out["Z"].shape == (model.n, model.q)


def test_sim_data_table_mode():
    model, _ = gaussian_toy()
    table = model.sim_data(np.random.default_rng(2), mode="data")
    assert "y" in table
    assert table.n == model.n


# ---------------------------------------------------------------------------
# prediction


def test_predict_at_observed_points_interpolates():
    data = DataTable({"x": np.array([0.0, 1.0, 2.5])})
    m = Glmm("~1 + (1|fexp0(x))", data, "gaussian", beta=[0.0], theta=[1.5])
    rng = np.random.default_rng(3)
    u = rng.normal(size=m.q)
    res = m.predict(data, u[:, None])
    assert np.allclose(res.re_mean, u, atol=1e-8)
    assert np.allclose(res.re_cov, 0.0, atol=1e-8)


def test_predict_independent_point_reverts_to_prior():
    data = DataTable({"j": np.array([1, 1, 2, 2])})
    m = Glmm("~1 + (1|gr(j))", data, "gaussian", beta=[0.0], theta=[0.6])
    new = DataTable({"j": np.array([9])})
    res = m.predict(new, np.array([[0.4], [-0.2]]))
    assert res.re_mean[0] == pytest.approx(0.0, abs=1e-12)
    assert res.re_cov[0, 0] == pytest.approx(0.36, rel=1e-12)


def test_predict_matches_joint_covariance_oracle():
    # 3 observed + 1 new point under a 1-D exponential kernel
    x_obs = np.array([0.0, 1.0, 2.0])
    x_new = np.array([1.4])
    rho = 1.2
    data = DataTable({"x": x_obs})
    m = Glmm("~1 + (1|fexp0(x))", data, "gaussian", beta=[0.0], theta=[rho])
    u = np.array([0.3, -0.5, 0.8])
    res = m.predict(DataTable({"x": x_new}), u[:, None])

    allx = np.concatenate([x_obs, x_new])
    joint = np.exp(-np.abs(allx[:, None] - allx[None, :]) / rho)
    s00, s01 = joint[:3, :3], joint[:3, 3:]
    mean_oracle = s01.T @ np.linalg.solve(s00, u)
    cov_oracle = joint[3:, 3:] - s01.T @ np.linalg.solve(s00, s01)
    assert np.allclose(res.re_mean, mean_oracle, atol=1e-10)
    assert np.allclose(res.re_cov, cov_oracle, atol=1e-10)


def test_predict_averages_over_samples():
    data = DataTable({"j": np.array([1, 2])})
    m = Glmm("~1 + (1|gr(j))", data, "gaussian", beta=[0.0], theta=[0.5])
    U = np.array([[1.0, 3.0], [0.0, 2.0]])
    res = m.predict(data, U)
    assert np.allclose(res.re_mean, U.mean(axis=1), atol=1e-10)


# ---------------------------------------------------------------------------
# parameter updates and caching


def test_update_parameters_invalidates_caches():
    model, _ = gaussian_toy()
    m1 = model.information_matrix()
    v1 = model.version
    model.update_parameters(theta=np.array([0.9]))
    assert model.version == v1 + 1
    m2 = model.information_matrix()
    assert not np.allclose(m1, m2)


def test_update_parameters_validates_lengths():
    model, _ = gaussian_toy()
    with pytest.raises(ValueError):
        model.update_parameters(beta=np.zeros(model.p + 1))
    with pytest.raises(ValueError):
        model.update_parameters(var_par=-1.0)


def test_mvn_loglik_consistency_with_model_d():
    model, rng = gaussian_toy()
    u = rng.normal(size=model.q)
    got = model.re.log_likelihood(u, model.theta)
    want = dense_mvn_loglik(u, model.re.build_d(model.theta).toarray())
    assert got == pytest.approx(want, rel=1e-10)


def test_model_without_random_terms_degrades_to_glm():
    rng = np.random.default_rng(90)
    data = DataTable({"x": rng.normal(size=30)})
    m = Glmm("~ x", data, "gaussian", beta=[1.0, -0.5], var_par=0.8)
    assert m.q == 0
    assert np.allclose(m.sigma(), 0.64 * np.eye(30))
    info = m.information_matrix()
    want = 0.64 * np.linalg.inv(m.X.T @ m.X)
    assert np.allclose(info, want, rtol=1e-10)
    y = m.sim_data(np.random.default_rng(3))
    assert y.shape == (30,)
    rows = m.power()
    assert len(rows) == 2


def test_mcml_fit_without_random_terms_is_glm_fit():
    from glmmkit.hmc import HmcOptions
    from glmmkit.mcml import McmlOptions, mcml_fit

    rng = np.random.default_rng(91)
    data = DataTable({"x": rng.normal(size=60)})
    m = Glmm("~ x", data, "gaussian", beta=[1.0, -0.5], var_par=0.5)
    y = m.sim_data(np.random.default_rng(4))
    res = mcml_fit(
        m, y=y, options=McmlOptions(tol=0.01, max_iter=5),
        hmc_options=HmcOptions(warmup=20, adapt=5, samples=10),
        rng=np.random.default_rng(5),
    )
    ols = np.linalg.lstsq(m.X, y, rcond=None)[0]
    assert np.allclose(res.beta, ols, atol=1e-6)
