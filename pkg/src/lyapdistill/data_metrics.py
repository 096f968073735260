"""Analytic toy datasets and sample-based distribution metrics.

The central object is an isotropic Gaussian mixture: its density, score, and
behavior under Gaussian convolution and variance-preserving diffusion are all
closed-form, so model scores can be checked against the exact ground truth
instead of against another estimator. The metrics (unbiased squared MMD and
sliced Wasserstein) compare generated samples to held-out data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion as df


@dataclass
class GaussianMixture:
    """Equal-dimension isotropic components: means (K, d), variances (K,)."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.means.ndim != 2:
            raise ValueError("means must be (K, d)")
        k = self.means.shape[0]
        if self.variances.shape != (k,) or self.weights.shape != (k,):
            raise ValueError("variances and weights must have one entry per component")
        if np.any(self.variances <= 0.0):
            raise ValueError("component variances must be positive")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("weights must be a probability vector")

    @property
    def dim(self):
        return self.means.shape[1]


@dataclass
class SampleSet:
    points: np.ndarray
    kind: str
    seed: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError("points must be a nonempty (n, d) array")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite entries")


def ring_mixture(n_components=8, radius=1.0, component_std=0.1):
    """Equal-weight isotropic Gaussians spaced around a circle."""
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(means,
                           np.full(n_components, component_std ** 2),
                           np.full(n_components, 1.0 / n_components))


def sample_gmm(gmm, n, rng):
    comp = rng.choice(gmm.means.shape[0], size=n, p=gmm.weights)
    eps = rng.standard_normal((n, gmm.dim))
    return gmm.means[comp] + np.sqrt(gmm.variances[comp])[:, None] * eps


def sample_dataset(kind, n, seed):
    """Draw n points from a named generator, deterministically under seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if kind == "gmm_ring8":
        pts = sample_gmm(ring_mixture(), n, rng)
    elif kind == "two_moons":
        # two interleaved half circles of radius 1 with Gaussian jitter
        theta = rng.uniform(0.0, np.pi, n)
        lower = rng.integers(0, 2, n).astype(bool)
        x = np.where(lower, 1.0 - np.cos(theta), np.cos(theta))
        y = np.where(lower, 0.5 - np.sin(theta), np.sin(theta))
        pts = np.stack([x, y], axis=1) + 0.05 * rng.standard_normal((n, 2))
    elif kind == "checkerboard":
        # 4x4 alternating cells tiling [-2, 2)^2
        x = rng.uniform(-2.0, 2.0, n)
        y = rng.uniform(0.0, 1.0, n) - 2.0 * rng.integers(0, 2, n)
        y = y + np.floor(x) % 2
        pts = np.stack([x, y], axis=1)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return SampleSet(pts, kind, seed)


def export_csv(sample_set, path):
    """Write points as CSV with an x0,x1,... header row."""
    d = sample_set.points.shape[1]
    header = ",".join(f"x{i}" for i in range(d))
    np.savetxt(path, sample_set.points, delimiter=",", header=header, comments="")


# ---------------------------------------------------------------------------
# exact densities and scores
# ---------------------------------------------------------------------------

def _log_component_terms(gmm, x):
    """Per-point, per-component log(w_k N(x; mu_k, sigma_k^2 I)), shape (n, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    diff = x[:, None, :] - gmm.means[None, :, :]  # (n, K, d)
    sq = np.sum(diff * diff, axis=2)
    var = gmm.variances[None, :]
    d = gmm.dim
    return (np.log(gmm.weights)[None, :]
            - 0.5 * d * np.log(2.0 * np.pi * var)
            - 0.5 * sq / var), diff


def log_density(gmm, x):
    """log p(x) per point, stable in log space."""
    terms, _ = _log_component_terms(gmm, x)
    m = terms.max(axis=1, keepdims=True)
    out = m[:, 0] + np.log(np.sum(np.exp(terms - m), axis=1))
    return out if np.ndim(x) > 1 else float(out[0])


def score(gmm, x):
    """Exact gradient of log density: responsibility-weighted Gaussian scores."""
    single = np.ndim(x) == 1
    terms, diff = _log_component_terms(gmm, x)
    m = terms.max(axis=1, keepdims=True)
    e = np.exp(terms - m)
    resp = e / e.sum(axis=1, keepdims=True)  # (n, K)
    per_comp = -diff / gmm.variances[None, :, None]
    out = np.sum(resp[:, :, None] * per_comp, axis=1)
    return out[0] if single else out


def convolve(gmm, added_noise_var):
    """Mixture after adding independent N(0, v I) noise: variances inflate."""
    if added_noise_var < 0:
        raise ValueError("added noise variance must be non-negative")
    if added_noise_var == 0:
        return gmm
    return GaussianMixture(gmm.means, gmm.variances + added_noise_var, gmm.weights)


def true_score(gmm, x, added_noise_var=0.0):
    """Score of the noise-convolved mixture at x."""
    return score(convolve(gmm, added_noise_var), x)


def diffused(gmm, alpha_bar):
    """Mixture of sqrt(ab) x0 + sqrt(1 - ab) eps: means shrink, variances blend."""
    if not 0.0 < alpha_bar <= 1.0:
        raise ValueError("alpha_bar must lie in (0, 1]")
    return GaussianMixture(np.sqrt(alpha_bar) * gmm.means,
                           alpha_bar * gmm.variances + (1.0 - alpha_bar),
                           gmm.weights)


def score_matching_error(model, gmm, schedule, t, n, seed):
    """Half mean squared gap between the model's converted score and the
    exact score of the diffused mixture at timestep t.

    Returns (estimate, standard error). The model's noise prediction is
    turned into a score with the -eps_hat / sqrt(1 - alpha_bar_t) conversion.
    """
    abar = df.alpha_bar_at(schedule, t)
    if abar >= 1.0:
        raise ValueError("score conversion undefined at alpha_bar = 1")
    rng = np.random.default_rng(seed)
    x0 = sample_gmm(gmm, n, rng)
    eps = rng.standard_normal(x0.shape)
    xt = df.forward_perturb(x0, t, eps, schedule)
    model_score = -np.asarray(model(xt, t)) / np.sqrt(1.0 - abar)
    exact = score(diffused(gmm, abar), xt)
    per_point = 0.5 * np.sum((model_score - exact) ** 2, axis=1)
    est = float(per_point.mean())
    stderr = float(per_point.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return est, stderr


# ---------------------------------------------------------------------------
# two-sample metrics
# ---------------------------------------------------------------------------

def _points(x):
    return x.points if isinstance(x, SampleSet) else np.asarray(x, dtype=np.float64)


def median_heuristic_bandwidth(x, y=None, max_points=2048):
    """Median pairwise distance over (a deterministic prefix of) the pooled
    points; the usual RBF bandwidth default. Symmetric in x and y."""
    pts = [_points(x)[:max_points]]
    if y is not None:
        pts.append(_points(y)[:max_points])
    p = np.concatenate(pts, axis=0)
    sq = np.sum(p * p, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (p @ p.T)
    iu = np.triu_indices(p.shape[0], k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    if med <= 0.0:
        raise ValueError("degenerate point set: median pairwise distance is zero")
    return med


def _kernel_sums(a, b, gamma, chunk=1024):
    """(sum of exp(-gamma ||ai - bj||^2) over all pairs, computed in row tiles)."""
    bsq = np.sum(b * b, axis=1)
    total = 0.0
    for lo in range(0, a.shape[0], chunk):
        blk = a[lo:lo + chunk]
        d2 = np.sum(blk * blk, axis=1)[:, None] + bsq[None, :] - 2.0 * (blk @ b.T)
        total += float(np.exp(-gamma * np.maximum(d2, 0.0)).sum())
    return total


def mmd_rbf(x, y, bandwidth=None):
    """Unbiased squared MMD with an RBF kernel; may be slightly negative.

    bandwidth is the kernel length scale h in exp(-||a-b||^2 / (2 h^2));
    None selects the median heuristic over the pooled inputs.
    """
    xp, yp = _points(x), _points(y)
    if xp.shape[0] < 2 or yp.shape[0] < 2:
        raise ValueError("unbiased MMD needs at least two points per set")
    if xp.shape == yp.shape and np.array_equal(xp, yp):
        return 0.0
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(xp, yp)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    m, n = xp.shape[0], yp.shape[0]
    kxx = _kernel_sums(xp, xp, gamma) - m  # drop the unit diagonal
    kyy = _kernel_sums(yp, yp, gamma) - n
    kxy = _kernel_sums(xp, yp, gamma)
    return kxx / (m * (m - 1)) + kyy / (n * (n - 1)) - 2.0 * kxy / (m * n)


def _wasserstein_1d(u, v):
    """Exact W1 between empirical distributions with uniform weights."""
    u = np.sort(u)
    v = np.sort(v)
    m, n = u.size, v.size
    # integrate |inverse cdf gap| over the merged quantile breakpoints
    qs = np.union1d(np.arange(1, m) / m, np.arange(1, n) / n)
    edges = np.concatenate([[0.0], qs, [1.0]])
    mid = 0.5 * (edges[:-1] + edges[1:])
    ui = np.minimum((mid * m).astype(int), m - 1)
    vi = np.minimum((mid * n).astype(int), n - 1)
    return float(np.sum(np.diff(edges) * np.abs(u[ui] - v[vi])))


def sliced_wasserstein(x, y, n_proj=128, seed=0):
    """Mean 1-D Wasserstein distance over seeded random unit projections."""
    xp, yp = _points(x), _points(y)
    if xp.shape[1] != yp.shape[1]:
        raise ValueError("point sets must share a dimension")
    if n_proj < 1:
        raise ValueError("n_proj must be at least 1")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_proj, xp.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px = xp @ dirs.T  # (n, n_proj)
    py = yp @ dirs.T
    return float(np.mean([_wasserstein_1d(px[:, j], py[:, j])
                          for j in range(n_proj)]))
