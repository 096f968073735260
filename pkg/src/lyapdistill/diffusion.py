"""Discrete-time diffusion: schedules, forward corruption, reverse samplers.

The reverse samplers are written against a generic model callable
(x, t) -> predicted noise, and every step is expressed through the autodiff
op set, so deterministic step compositions (flow maps) stay differentiable
with respect to the state. Stochastic steps take their noise as an explicit
argument; nothing in here owns an RNG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    kind: str = "linear"
    beta_min: float = 0.0
    beta_max: float = 0.0

    def meta(self):
        return {"T": self.T, "kind": self.kind,
                "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(kind, T, beta_min=1e-4, beta_max=0.02):
    """Build a noise schedule; beta in (0, 1), alpha_bar strictly decreasing."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        # squared-cosine alpha_bar ramp, betas clipped into the valid range
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * np.pi / 2.0) ** 2
        abar = f / f[0]
        beta = np.clip(1.0 - abar[1:] / abar[:-1], beta_min, beta_max)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt((1.0 - alpha_bar) / alpha_bar)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma,
                         kind=kind, beta_min=float(beta_min),
                         beta_max=float(beta_max))


def alpha_bar_at(s, t):
    """alpha_bar at integer time t, with t = -1 denoting the clean data point."""
    if t == -1:
        return 1.0
    if not 0 <= t < s.T:
        raise IndexError(f"timestep {t} outside [0, {s.T})")
    return float(s.alpha_bar[t])


def forward_perturb(x0, t, eps, s):
    """Corrupt x0 to timestep t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t may be a scalar or a per-sample integer array matching the batch.
    """
    x0v = ad.value_of(x0)
    if np.shape(ad.value_of(eps)) != np.shape(x0v):
        raise ValueError("eps must match x0 in shape")
    tv = np.asarray(t)
    if tv.ndim == 0:
        abar = alpha_bar_at(s, int(tv))
    else:
        if np.any(tv < 0) or np.any(tv >= s.T):
            raise IndexError("timestep outside [0, T)")
        abar = s.alpha_bar[tv][:, None]
    return ad.add(ad.mul(np.sqrt(abar), x0),
                  ad.mul(np.sqrt(1.0 - abar), eps))


def ddim_step(model, x_t, t, t_prev, s):
    """Deterministic reverse update from t to t_prev (t_prev <= t; -1 = data)."""
    if t_prev > t:
        raise ValueError(f"t_prev {t_prev} must not exceed t {t}")
    abar_t = alpha_bar_at(s, t)
    abar_p = alpha_bar_at(s, t_prev)
    eps_hat = model(x_t, t)
    x0_hat = ad.mul(1.0 / np.sqrt(abar_t),
                    ad.sub(x_t, ad.mul(np.sqrt(1.0 - abar_t), eps_hat)))
    return ad.add(ad.mul(np.sqrt(abar_p), x0_hat),
                  ad.mul(np.sqrt(1.0 - abar_p), eps_hat))


def ddpm_step(model, x_t, t, s, noise):
    """Ancestral reverse update; noise is injected explicitly, none at t = 0."""
    if not 0 <= t < s.T:
        raise IndexError(f"timestep {t} outside [0, {s.T})")
    eps_hat = model(x_t, t)
    abar_t = alpha_bar_at(s, t)
    mean = ad.mul(1.0 / np.sqrt(s.alpha[t]),
                  ad.sub(x_t, ad.mul(s.beta[t] / np.sqrt(1.0 - abar_t), eps_hat)))
    if t == 0:
        return mean
    # sigma_t^2 = beta_t; the clipped posterior variance systematically
    # undershoots for broad data distributions
    return ad.add(mean, ad.mul(np.sqrt(s.beta[t]), noise))


@dataclass
class FlowMapSpec:
    """k composed deterministic reverse steps starting at t_start."""

    model: object  # (x, t) -> predicted noise
    schedule: NoiseSchedule
    t_start: int
    k: int
    sampler: str = "ddim"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.t_start - self.k < 0 or self.t_start >= self.schedule.T:
            raise ValueError(
                f"flow [{self.t_start} -> {self.t_start - self.k}] leaves [0, T)")
        if self.sampler != "ddim":
            raise ValueError("only the deterministic ddim sampler defines a flow map")


def flow_map(spec, x):
    """Apply the composed reverse flow to x; differentiable through every step."""
    for i in range(spec.k):
        t = spec.t_start - i
        x = ddim_step(spec.model, x, t, t - 1, spec.schedule)
    return x


def sample_ddim(model, s, n, dim, seed, return_trajectory=False):
    """Full deterministic reverse chain from seeded standard normal noise."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    traj = [x]
    for t in range(s.T - 1, -1, -1):
        x = ad.value_of(ddim_step(model, x, t, t - 1, s))
        if return_trajectory:
            traj.append(x)
    return (x, traj) if return_trajectory else x


def sample_ddpm(model, s, n, dim, seed):
    """Full ancestral reverse chain with seeded noise injection."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    for t in range(s.T - 1, -1, -1):
        noise = rng.standard_normal((n, dim)) if t > 0 else np.zeros((n, dim))
        x = ad.value_of(ddpm_step(model, x, t, s, noise))
    return x
