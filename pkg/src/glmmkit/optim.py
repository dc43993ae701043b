"""Bounded derivative-free minimisation and parameter transforms.

The fitters optimise smooth, noisy-free objectives of low dimension, so a
bounded simplex search is sufficient: box constraints, convergence when the
simplex collapses below 1e-8, and a 2000-evaluation budget by default.
Covariance parameters are optimised on an unconstrained scale via log /
scaled-logit transforms built from each kernel's admissible box.
"""

import numpy as np
from scipy import optimize


class OptimError(RuntimeError):
    pass


def minimize_bounded(fn, x0, bounds=None, budget=2000, xtol=1e-8, ftol=1e-10):
    """Minimise fn subject to box constraints without derivatives.

    Returns scipy's OptimizeResult. Raises OptimError when the objective
    goes non-finite at the start.
    """
    x0 = np.asarray(x0, dtype=float)
    f0 = fn(x0)
    if not np.isfinite(f0):
        raise OptimError(f"objective is not finite at the starting point: {f0}")
    if bounds is not None:
        bounds = [
            (-np.inf if lo is None else lo, np.inf if hi is None else hi)
            for lo, hi in bounds
        ]
    res = optimize.minimize(
        fn, x0, method="Nelder-Mead", bounds=bounds,
        options={
            "maxfev": budget, "xatol": xtol, "fatol": ftol,
            "adaptive": x0.size > 4,
        },
    )
    if not np.isfinite(res.fun):
        raise OptimError("optimizer ended on a non-finite objective value")
    return res


class BoxTransform:
    """Bijections between a parameter box and unconstrained space.

    Entries of ``bounds`` are (lo, hi, lo_strict, hi_strict); None means
    unbounded on that side. Two-sided boxes map through a scaled logit,
    one-sided ones through a shifted log.
    """

    # margin keeping transformed starting points off the boundary
    _EDGE = 1e-8

    def __init__(self, bounds):
        self.bounds = [(b[0], b[1]) for b in bounds]

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        z = np.empty_like(theta)
        for k, (lo, hi) in enumerate(self.bounds):
            v = theta[k]
            if lo is None and hi is None:
                z[k] = v
            elif hi is None:
                z[k] = np.log(max(v - lo, self._EDGE))
            elif lo is None:
                z[k] = -np.log(max(hi - v, self._EDGE))
            else:
                p = (v - lo) / (hi - lo)
                p = min(max(p, self._EDGE), 1.0 - self._EDGE)
                z[k] = np.log(p / (1.0 - p))
        return z

    def to_constrained(self, z):
        z = np.asarray(z, dtype=float)
        theta = np.empty_like(z)
        for k, (lo, hi) in enumerate(self.bounds):
            v = z[k]
            if lo is None and hi is None:
                theta[k] = v
            elif hi is None:
                theta[k] = lo + np.exp(v)
            elif lo is None:
                theta[k] = hi - np.exp(-v)
            else:
                theta[k] = lo + (hi - lo) / (1.0 + np.exp(-v))
        return theta

    def boundary_flags(self, theta, tol=1e-6):
        """Which parameters sit within tol of an admissible bound."""
        flags = []
        for (lo, hi), v in zip(self.bounds, np.asarray(theta, dtype=float)):
            at = lo is not None and v - lo <= tol or hi is not None and hi - v <= tol
            flags.append(bool(at))
        return flags


def maximize_transformed(fn, theta0, bounds, budget=2000, xtol=1e-8):
    """Maximise fn(theta) over a box by minimising -fn in transformed space.

    Returns (theta_hat, value, boundary_flags)."""
    tr = BoxTransform(bounds)
    z0 = tr.to_unconstrained(theta0)

    def neg(z):
        try:
            val = fn(tr.to_constrained(z))
        except Exception:
            return np.inf
        return -val if np.isfinite(val) else np.inf

    res = minimize_bounded(neg, z0, budget=budget, xtol=xtol)
    theta = tr.to_constrained(res.x)
    return theta, -res.fun, tr.boundary_flags(theta)
