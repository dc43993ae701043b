"""Hamiltonian Monte Carlo for the standardised random effects.

One chain, identity mass matrix. The step size is tuned by dual averaging
toward a target acceptance probability during the adaptation phase and then
frozen; the number of leapfrog steps is the integration time divided by the
step size, capped at a maximum.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class HmcOptions:
    warmup: int = 500
    adapt: int = 50
    samples: int = 250
    max_leapfrog: int = 100
    target_accept: float = 0.95
    int_time: float = 5.0
    initial_step: float = None

    def __post_init__(self):
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be inside (0, 1)")
        for field in ("warmup", "adapt", "samples", "max_leapfrog"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if self.int_time <= 0:
            raise ValueError("int_time must be positive")


@dataclass
class HmcResult:
    draws: np.ndarray          # Q x m
    accept_rate: float         # post-adaptation average acceptance probability
    step_size: float
    divergences: int


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.h_bar = 0.0
        self.log_eps_bar = math.log(eps0)
        self.count = 0

    def update(self, accept_prob):
        self.count += 1
        m = self.count
        frac = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_prob)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        w = m ** (-self.kappa)
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def adapted(self):
        return math.exp(self.log_eps_bar)


def _leapfrog(logp_grad, q, p, eps, steps):
    _, grad = logp_grad(q)
    for _ in range(steps):
        p = p + 0.5 * eps * grad
        q = q + eps * p
        logp, grad = logp_grad(q)
        p = p + 0.5 * eps * grad
    return q, p, logp


def find_reasonable_epsilon(logp_grad, q0, rng):
    """Double or halve the step size until the one-step acceptance
    probability crosses one half."""
    eps = 1.0
    logp0, _ = logp_grad(q0)
    p0 = rng.standard_normal(q0.size)
    q1, p1, logp1 = _leapfrog(logp_grad, q0, p0, eps, 1)
    joint0 = logp0 - 0.5 * p0 @ p0
    joint1 = logp1 - 0.5 * p1 @ p1
    if not np.isfinite(joint1):
        joint1 = -np.inf
    direction = 1.0 if joint1 - joint0 > math.log(0.5) else -1.0
    for _ in range(50):
        eps *= 2.0**direction
        q1, p1, logp1 = _leapfrog(logp_grad, q0, p0, eps, 1)
        joint1 = logp1 - 0.5 * p1 @ p1
        if not np.isfinite(joint1):
            joint1 = -np.inf
        if direction * (joint1 - joint0) <= direction * math.log(0.5):
            break
    return eps


def hmc_sample(logp_grad, q0, options, rng):
    """Draw ``options.samples`` post-warmup samples.

    logp_grad maps a position to (log density, gradient). Raises
    RuntimeError if every warmup trajectory diverges.
    """
    q = np.asarray(q0, dtype=float).copy()
    dim = q.size
    eps = options.initial_step or find_reasonable_epsilon(logp_grad, q, rng)
    tuner = _DualAveraging(eps, options.target_accept)
    total = options.warmup + options.samples
    draws = np.empty((dim, options.samples))
    accept_sum = 0.0
    accept_n = 0
    divergences = 0
    warmup_divergences = 0

    logp, _ = logp_grad(q)
    for it in range(total):
        p0 = rng.standard_normal(dim)
        steps = max(1, min(int(math.ceil(options.int_time / eps)),
                           options.max_leapfrog))
        q1, p1, logp1 = _leapfrog(logp_grad, q, p0, eps, steps)
        joint0 = logp - 0.5 * p0 @ p0
        joint1 = logp1 - 0.5 * p1 @ p1
        log_ratio = joint1 - joint0
        if not np.isfinite(log_ratio):
            accept_prob = 0.0
            divergences += 1
            if it < options.warmup:
                warmup_divergences += 1
        else:
            accept_prob = min(1.0, math.exp(min(0.0, log_ratio)))
        if rng.random() < accept_prob:
            q, logp = q1, logp1
        if it < min(options.adapt, options.warmup):
            eps = tuner.update(accept_prob)
            if it == min(options.adapt, options.warmup) - 1:
                eps = tuner.adapted
        else:
            accept_sum += accept_prob
            accept_n += 1
        if it == options.warmup - 1 and warmup_divergences >= options.warmup:
            raise RuntimeError(
                "all warmup trajectories diverged; the step size could not "
                f"be stabilised (last eps {eps:.3e})"
            )
        if it >= options.warmup:
            draws[:, it - options.warmup] = q
    return HmcResult(
        draws=draws,
        accept_rate=accept_sum / max(accept_n, 1),
        step_size=eps,
        divergences=divergences,
    )
