"""Finite-time Lyapunov exponents of reverse-diffusion flow maps.

The expansion rate of a flow Phi around a point is governed by the largest
eigenvalue of J^T J, where J is the flow's Jacobian. Both directional rates
and the dominant eigenvalue are computed matrix-free: forward-mode passes
give J v, reverse-mode passes give J^T u, and power iteration on their
composition finds lambda_max without ever forming J.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffusion as df


@dataclass
class FTLEEstimate:
    x0: np.ndarray
    t_start: int
    k: int
    lambda_max: float
    ftle: float
    iterations: int
    converged: bool
    horizon_time: float

    def to_record(self):
        h = hashlib.sha256(np.ascontiguousarray(self.x0).tobytes()).hexdigest()[:12]
        return {"x0_hash": h, "t_start": self.t_start, "k": self.k,
                "lambda_max": self.lambda_max, "ftle": self.ftle,
                "converged": self.converged, "iterations": self.iterations}


@dataclass
class FTLEAverage:
    mean: float
    stderr: float
    n_points: int
    n_skipped: int


def _flow_fn(spec):
    return lambda x: df.flow_map(spec, x)


def directional_sensitivity(spec, x, v):
    """||J v||^2 of the flow map at x for a unit direction v (one JVP)."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-10:
        raise ValueError("direction must have unit norm")
    _, tangent = ad.jvp(_flow_fn(spec), x, v)
    t = ad.value_of(tangent)
    return float(np.sum(t * t))


def max_sq_stretch_of_map(f, x, max_iters=50, tol=1e-6, seed=0):
    """Power iteration for the largest eigenvalue of J^T J of an arbitrary
    map f at x; returns (lambda_max, iterations, converged)."""
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(x.shape)
    u /= np.linalg.norm(u)
    lam_prev = None
    for it in range(1, max_iters + 1):
        _, ju = ad.jvp(f, x, u)
        ju = ad.value_of(ju)
        lam = float(np.sum(ju * ju))  # Rayleigh quotient at unit u
        z = ad.vjp(f, x, ju)
        zn = float(np.linalg.norm(z))
        if zn == 0.0:
            return 0.0, it, True
        u = z / zn
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(lam, 1e-300):
            return lam, it, True
        lam_prev = lam
    return lam_prev, max_iters, False


def max_singular_value_sq(spec, x, max_iters=50, tol=1e-6, seed=0):
    """lambda_max of J^T J for a schedule flow map."""
    return max_sq_stretch_of_map(_flow_fn(spec), x, max_iters, tol, seed)


def ftle_of_map(f, x, horizon_time, max_iters=50, tol=1e-6, seed=0,
                t_start=-1, k=-1):
    """FTLE of an arbitrary map over a given horizon: ln(sqrt(lambda))/time."""
    if horizon_time <= 0:
        raise ValueError("horizon_time must be positive")
    lam, iters, conv = max_sq_stretch_of_map(f, x, max_iters, tol, seed)
    if lam <= 0:
        raise ValueError("flow map has vanishing Jacobian at this point")
    val = 0.5 * np.log(lam) / horizon_time
    return FTLEEstimate(np.asarray(x, dtype=np.float64), t_start, k,
                        lam, float(val), iters, conv, horizon_time)


def ftle(spec, x, max_iters=50, tol=1e-6, seed=0):
    """FTLE of a k-step reverse flow; horizon normalized to k/T schedule time."""
    horizon = spec.k / spec.schedule.T
    return ftle_of_map(_flow_fn(spec), x, horizon, max_iters, tol, seed,
                       t_start=spec.t_start, k=spec.k)


def ftle_model_average(model, schedule, points, t_start, k,
                       max_iters=50, tol=1e-6, seed=0):
    """Mean FTLE over a batch of start points, with standard error.

    Points are evaluated one at a time (batch order never affects values);
    non-converged estimates are skipped and counted.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    spec = df.FlowMapSpec(model, schedule, t_start, k)
    values = []
    skipped = 0
    for p in points:
        est = ftle(spec, p, max_iters=max_iters, tol=tol, seed=seed)
        if est.converged:
            values.append(est.ftle)
        else:
            skipped += 1
    if not values:
        raise ValueError("no FTLE estimate converged")
    arr = np.asarray(values)
    stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return FTLEAverage(float(arr.mean()), stderr, points.shape[0], skipped)
