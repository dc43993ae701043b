"""Independent reference implementations used as test oracles.

These are written directly from the covariance-function definitions and
standard linear algebra, deliberately separate from the package's compiled
evaluation paths.
"""

import numpy as np
from scipy import integrate, special


def k_gr(d, t):
    return t[0] ** 2 * (1.0 if d == 0 else 0.0)


def k_fexp(d, t):
    return t[0] * np.exp(-d / t[1])


def k_fexp0(d, t):
    return np.exp(-d / t[0])


def k_sqexp(d, t):
    return t[0] * np.exp(-((d / t[1]) ** 2))


def k_sqexp0(d, t):
    return np.exp(-((d / t[0]) ** 2))


def k_ar1(d, t):
    return t[0] ** d


def k_bessel(d, t):
    return special.kv(t[0], d)


def k_matern(d, t):
    nu, rho = t
    if d == 0:
        return 1.0
    y = np.sqrt(2 * nu) * d / rho
    return (2 ** (1 - nu) / special.gamma(nu)) * y**nu * special.kv(nu, y)


def k_wend0(y, t):
    if y >= 1:
        return 0.0
    return t[0] * (1 - y) ** t[1]


def k_wend1(y, t):
    if y >= 1:
        return 0.0
    return t[0] * (1 + (t[1] + 1) * y) * (1 - y) ** (t[1] + 1)


def k_wend2(y, t):
    if y >= 1:
        return 0.0
    k = t[1] + 2
    return t[0] * (1 + k * y + (k**2 - 1) * y**2 / 3.0) * (1 - y) ** k


def k_prodwm(y, t):
    if y >= 1:
        return 0.0
    nu = t[1]
    if y == 0:
        wm = 1.0
    else:
        wm = (2 ** (1 - nu) / special.gamma(nu)) * y**nu * special.kv(nu, y)
    taper = (1 + 5.5 * y + (117.0 / 12.0) * y**2) * (1 - y) ** 5.5
    return t[0] * wm * taper


def k_prodcb(y, t):
    if y >= 1:
        return 0.0
    bohman = (1 - y) * np.cos(np.pi * y) + np.sin(np.pi * y) / np.pi
    return t[0] * (1 + y ** t[1]) ** (-3) * bohman


def k_prodek(y, t):
    if y >= 1:
        return 0.0
    if y == 0:
        kant = 1.0
    else:
        x = 2 * np.pi * y
        kant = (1 - y) * np.sin(x) / x + (1 - np.cos(x)) / (np.pi * x)
    return t[0] * np.exp(-(y ** t[1])) * kant


CLOSED_FORMS = {
    "gr": k_gr, "fexp": k_fexp, "fexp0": k_fexp0, "sqexp": k_sqexp,
    "sqexp0": k_sqexp0, "ar1": k_ar1, "bessel": k_bessel, "matern": k_matern,
    "wend0": k_wend0, "wend1": k_wend1, "wend2": k_wend2,
    "prodwm": k_prodwm, "prodcb": k_prodcb, "prodek": k_prodek,
}

# draw ranges for random parameter/distance sampling per kernel
PARAM_RANGES = {
    "gr": [(0.05, 3.0)],
    "fexp": [(0.05, 3.0), (0.1, 3.0)],
    "fexp0": [(0.1, 3.0)],
    "sqexp": [(0.05, 3.0), (0.1, 3.0)],
    "sqexp0": [(0.1, 3.0)],
    "ar1": [(0.05, 0.95)],
    "bessel": [(0.3, 3.0)],
    "matern": [(0.5, 3.0), (0.1, 3.0)],
    "wend0": [(0.05, 3.0), (1.0, 6.0)],
    "wend1": [(0.05, 3.0), (2.0, 6.0)],
    "wend2": [(0.05, 3.0), (3.0, 8.0)],
    "prodwm": [(0.05, 3.0), (0.3, 3.0)],
    "prodcb": [(0.05, 3.0), (0.1, 1.9)],
    "prodek": [(0.05, 3.0), (0.3, 3.0)],
}


def cholesky_banachiewicz(a):
    """Row-by-row reference Cholesky factorisation."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    L = np.zeros_like(a)
    for i in range(n):
        for j in range(i + 1):
            s = a[i, j] - L[i, :j] @ L[j, :j]
            if i == j:
                if s <= 0:
                    raise np.linalg.LinAlgError(f"non-positive pivot {s}")
                L[i, j] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return L


def dense_mvn_loglik(u, cov):
    """Gaussian log density via explicit determinant and inverse."""
    u = np.asarray(u, dtype=float)
    q = u.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    quad = u @ np.linalg.solve(cov, u)
    return -0.5 * (q * np.log(2 * np.pi) + logdet + quad)


def bessel_k_quadrature(nu, x):
    """Integral representation of K_nu(x); independent of scipy.special.kv."""
    val, _ = integrate.quad(
        lambda t: np.exp(-x * np.cosh(t)) * np.cosh(nu * t), 0, 30, limit=200
    )
    return val


def random_spd(rng, n, jitter=0.5):
    a = rng.standard_normal((n, n))
    return a @ a.T + jitter * n * np.eye(n)
