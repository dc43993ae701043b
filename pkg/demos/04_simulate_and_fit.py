"""Simulating data and fitting it back: Laplace and full likelihood.

The Laplace approximation is fast and a good starting point; Monte Carlo
maximum likelihood refines it using Hamiltonian Monte Carlo draws of the
random effects. On a cluster trial with strong correlation the two can
differ, which is exactly when the full-likelihood fit earns its cost.
"""

import numpy as np

from glmmkit import Glmm, HmcOptions, LaOptions, McmlOptions, la_fit, mcml_fit, nelder

# Parallel cluster trial: 10 clusters (5 treated), 5 periods, 10 per cell,
# exchangeable cluster and cluster-period effects.
data = nelder("~(cl(10) * t(5)) > i(10)")
data = data.with_column("int", (data["cl"] > 5).astype(np.int64))
truth_beta = np.r_[0.5, -2.1, -2.2, -2.0, -1.5, -1.8]
truth_theta = [0.5, 0.3]

model = Glmm(
    "~ int + factor(t) - 1 + (1|gr(cl)) + (1|gr(cl,t))",
    data, "binomial", beta=truth_beta, theta=truth_theta,
)
rng = np.random.Generator(np.random.Philox(20240501))
y = model.sim_data(rng)
print(f"simulated {int(y.sum())} events over {y.size} observations")

# -- Laplace approximation (scoring updates; seconds) ----------------------
la = la_fit(model, y=y, options=LaOptions(variant="scoring"))
print("\nLaplace:   int = %+.3f (SE %.3f), theta = %s"
      % (la.beta[0], la.se_beta[0], np.round(la.theta, 3)))

# -- Monte Carlo maximum likelihood, warm-started from the Laplace fit ----
fit = mcml_fit(
    model, y=y,
    options=McmlOptions(method="mcnr", warm_start="la", max_iter=12),
    hmc_options=HmcOptions(warmup=250, adapt=50, samples=250),
    rng=rng,
)
print("MCML-MCNR: int = %+.3f (SE %.3f), theta = %s"
      % (fit.beta[0], fit.se_beta[0], np.round(fit.theta, 3)))
print("sampler acceptance %.2f; %d outer iterations"
      % (fit.accept_rate, fit.n_iter))
print("truth:     int = %+.3f, theta = %s" % (0.5, truth_theta))

# The final random-effect draws come back as a Q x m matrix for reuse.
U = fit.U
print("\nrandom-effect samples:", U.shape)
cluster_effects = U[:10].mean(axis=1)
print("posterior-mean cluster effects:", np.round(cluster_effects, 2))

# Predictions at new covariance-variable values condition on those draws:
# two yet-unseen clusters over the observed periods. Unobserved clusters
# get the prior (mean zero, full variance); observed cells interpolate.
from glmmkit import DataTable

new = DataTable({
    "cl": np.repeat([1, 11, 12], 5),
    "t": np.tile(np.arange(1, 6), 3),
    "int": np.zeros(15, dtype=np.int64),
})
pred = model.predict(new, U)
print("\nnew-cluster effect means (should sit near zero):",
      np.round(pred.re_mean[1:3], 3))
print("observed-cluster effect mean (borrows the fit):",
      round(float(pred.re_mean[0]), 3))
