"""Training objectives for noise-prediction models and their distillation.

Models here are callables (x, t) -> predicted noise unless noted; the
score-based denoising objectives take (x, sigma) -> score callables instead.
Jacobian terms never materialize a Jacobian: each probe direction costs one
forward-mode pass, and the passes stay differentiable with respect to
student parameters, so sensitivity matching trains by plain gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffusion as df


@dataclass
class LossWeights:
    lambda_np: float = 1.0
    lambda_kd: float = 1.0
    lambda_jac: float = 0.1
    n_probes: int = 1
    enable_first_jac: bool = False

    def __post_init__(self):
        if min(self.lambda_np, self.lambda_kd, self.lambda_jac) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.lambda_np, self.lambda_kd, self.lambda_jac) == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.n_probes < 1:
            raise ValueError("n_probes must be at least 1")


@dataclass
class ProbeSet:
    """Directions for Jacobian probing, one row per probe.

    normalized=True rows lie on the unit sphere (directional sensitivities);
    normalized=False rows are raw N(0, I) draws (unbiased Frobenius probing).
    """

    directions: np.ndarray
    seed: int
    normalized: bool = True

    def __post_init__(self):
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if self.normalized:
            norms = np.linalg.norm(self.directions, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise ValueError("normalized probe directions must have unit norm")

    def __len__(self):
        return self.directions.shape[0]


def unit_probes(n, dim, seed):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, dim))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate probe draw")
    return ProbeSet(d / norms, seed, normalized=True)


def gaussian_probes(n, dim, seed):
    rng = np.random.default_rng(seed)
    return ProbeSet(rng.standard_normal((n, dim)), seed, normalized=False)


def _sq_norm_rows(x):
    return ad.sum_(ad.square(x), axis=1)


def _as_batch(x):
    return ad.reshape(x, (1, np.shape(ad.value_of(x))[0])) \
        if np.ndim(ad.value_of(x)) == 1 else x


def loss_np(model, batch, schedule):
    """Mean squared noise-prediction error: E||model(x_t, t) - eps||^2."""
    x0, t, eps = batch
    if np.shape(ad.value_of(x0))[0] < 1:
        raise ValueError("empty batch")
    xt = df.forward_perturb(x0, t, eps, schedule)
    return ad.mean(_sq_norm_rows(ad.sub(model(xt, t), eps)))


def loss_kd(student, teacher, batch):
    """Mean squared gap to the teacher's prediction at given states."""
    xt, t = batch
    if np.shape(ad.value_of(xt))[0] < 1:
        raise ValueError("empty batch")
    target = ad.value_of(teacher(xt, t))
    return ad.mean(_sq_norm_rows(ad.sub(student(xt, t), target)))


def dsm_loss(model, x0, sigma, eps):
    """Denoising score matching at one noise scale.

    model maps (x, sigma) to a score; the regression target for x = x0 +
    sigma * eps is -(x - x0)/sigma^2, i.e. eps/sigma with a sign flip.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0 in shape")
    xt = x0 + sigma * eps
    target = -(xt - x0) / sigma ** 2
    return ad.mul(0.5, ad.mean(_sq_norm_rows(ad.sub(model(xt, sigma), target))))


def multiscale_dsm(model, x0, sigmas, weights=None, seed=0):
    """Average of per-scale losses weighted by lambda(sigma); defaults to
    the variance-compensating lambda(sigma) = sigma^2."""
    sigmas = [float(s) for s in sigmas]
    if not sigmas:
        raise ValueError("need at least one noise scale")
    if weights is None:
        weights = [s * s for s in sigmas]
    if len(weights) != len(sigmas):
        raise ValueError("one weight per noise scale required")
    if any(w < 0 for w in weights):
        raise ValueError("scale weights must be non-negative")
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    total = None
    for s, w in zip(sigmas, weights):
        eps = rng.standard_normal(x0.shape)
        term = ad.mul(w, dsm_loss(model, x0, s, eps))
        total = term if total is None else ad.add(total, term)
    return ad.div(total, float(len(sigmas)))


def probe_tangents(model, x, t, v):
    """Per-sample J v for one shared direction v, via one forward-mode pass.

    Returns (n, d); stays taped when the model closes over tracked params.
    """
    x = _as_batch(x)
    shape = np.shape(ad.value_of(x))
    vt = np.broadcast_to(np.asarray(v, dtype=np.float64), shape)
    out = model(ad.DualBatch(ad.value_of(x), vt), t)
    if not isinstance(out, ad.DualBatch):
        return np.zeros(shape)
    if out.tangent is None:
        return np.zeros(shape)
    return out.tangent


def loss_first_jac(student, teacher, xt, t, probes):
    """Unbiased estimate of ||J - J_D||_F^2 via raw Gaussian probes:
    E_{v ~ N(0,I)} ||(J - J_D) v||^2, averaged over the batch."""
    if probes.normalized:
        raise ValueError("Frobenius probing needs raw (unnormalized) Gaussian probes")
    total = None
    for v in probes.directions:
        ts = probe_tangents(student, xt, t, v)
        tt = ad.value_of(probe_tangents(teacher, xt, t, v))
        term = ad.mean(_sq_norm_rows(ad.sub(ts, tt)))
        total = term if total is None else ad.add(total, term)
    return ad.div(total, float(len(probes)))


def loss_2nd_jac(student, teacher, xt, t, probes):
    """Directional expansion-rate matching: E[(||J v||^2 - ||J_D v||^2)^2]
    over unit probes, averaged over the batch."""
    if not probes.normalized:
        raise ValueError("directional matching needs unit-norm probes")
    ds = np.shape(ad.value_of(_as_batch(xt)))[1]
    if probes.directions.shape[1] != ds:
        raise ValueError("probe dimension does not match the state dimension")
    total = None
    for v in probes.directions:
        ss = _sq_norm_rows(probe_tangents(student, xt, t, v))
        st = ad.value_of(_sq_norm_rows(probe_tangents(teacher, xt, t, v)))
        term = ad.mean(ad.square(ad.sub(ss, st)))
        total = term if total is None else ad.add(total, term)
    return ad.div(total, float(len(probes)))


def total_loss(weights, student, teacher, batch, schedule, probe_seed):
    """Weighted training objective; returns (value, per-term breakdown).

    student and teacher are (x, t) -> noise callables; batch is (x0, t, eps).
    The Jacobian term uses fresh probes from probe_seed, shared across the
    batch; enable_first_jac swaps directional matching for Frobenius matching.
    """
    x0, t, eps = batch
    xt = ad.value_of(df.forward_perturb(x0, t, eps, schedule))
    parts = {"loss_np": 0.0, "loss_kd": 0.0, "loss_jac": 0.0}
    total = None

    def accumulate(total, lam, term, key):
        parts[key] = float(ad.value_of(term))
        scaled = ad.mul(lam, term)
        return scaled if total is None else ad.add(total, scaled)

    # one student pass serves both regression terms
    pred = student(xt, t) if weights.lambda_np > 0 or weights.lambda_kd > 0 else None
    if weights.lambda_np > 0:
        total = accumulate(total, weights.lambda_np,
                           ad.mean(_sq_norm_rows(ad.sub(pred, eps))), "loss_np")
    if weights.lambda_kd > 0:
        target = ad.value_of(teacher(xt, t))
        total = accumulate(total, weights.lambda_kd,
                           ad.mean(_sq_norm_rows(ad.sub(pred, target))), "loss_kd")
    if weights.lambda_jac > 0:
        dim = np.shape(xt)[1]
        if weights.enable_first_jac:
            probes = gaussian_probes(weights.n_probes, dim, probe_seed)
            term = loss_first_jac(student, teacher, xt, t, probes)
        else:
            probes = unit_probes(weights.n_probes, dim, probe_seed)
            term = loss_2nd_jac(student, teacher, xt, t, probes)
        total = accumulate(total, weights.lambda_jac, term, "loss_jac")
    parts["total"] = float(ad.value_of(total))
    return total, parts


# ---------------------------------------------------------------------------
# second-order expansion verifier
# ---------------------------------------------------------------------------

def frobenius_sq_gap(student, teacher, x, t):
    """Exact ||J - J_D||_F^2 at a single point via basis-vector passes."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    total = 0.0
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        col = ad.value_of(probe_tangents(student, x, t, e)) \
            - ad.value_of(probe_tangents(teacher, x, t, e))
        total += float(np.sum(col * col))
    return total


def _gauss_hermite_grid(dim, nodes):
    """Tensor-product nodes/weights for E over N(0, I_dim)."""
    z, w = np.polynomial.hermite.hermgauss(nodes)
    z = z * np.sqrt(2.0)
    w = w / np.sqrt(np.pi)
    pts = np.stack([g.ravel() for g in np.meshgrid(*([z] * dim), indexing="ij")],
                   axis=1)
    wts = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([w] * dim),
                                                           indexing="ij")]), axis=0)
    return pts, wts


def _expected_sq_gap(student, teacher, x, t, sigma, n, rule):
    """E_zeta ||student(x+zeta) - teacher(x+zeta)||^2, zeta ~ N(0, sigma^2 I)."""
    x = np.asarray(x, dtype=np.float64)
    if rule == "quadrature":
        pts, wts = _gauss_hermite_grid(x.shape[0], n)
        xs = x[None, :] + sigma * pts
        diff = np.asarray(ad.value_of(student(xs, t))) \
            - np.asarray(ad.value_of(teacher(xs, t)))
        return float(wts @ np.sum(diff * diff, axis=1))
    rng = np.random.default_rng(0)
    xs = x[None, :] + sigma * rng.standard_normal((n, x.shape[0]))
    diff = np.asarray(ad.value_of(student(xs, t))) \
        - np.asarray(ad.value_of(teacher(xs, t)))
    return float(np.mean(np.sum(diff * diff, axis=1)))


def taylor_redundancy_check(student, teacher, x, t, sigmas, n=12, rule="auto"):
    """Measure how the expected output gap under input noise decomposes.

    For each sigma, reports the measured excess gap
    E||s(x+z) - s_D(x+z)||^2 - ||s(x) - s_D(x)||^2, the second-order
    prediction sigma^2 ||J - J_D||_F^2, and their residual. Expectations use
    tensor-product Gauss-Hermite quadrature in low dimension (n nodes per
    axis) so fourth-order residuals are resolvable; rule="montecarlo" forces
    sampling with n draws instead.
    """
    x = np.asarray(x, dtype=np.float64)
    if rule == "auto":
        rule = "quadrature" if x.shape[0] <= 3 else "montecarlo"
    base_diff = np.asarray(ad.value_of(student(x, t))) \
        - np.asarray(ad.value_of(teacher(x, t)))
    base = float(np.sum(base_diff * base_diff))
    frob = frobenius_sq_gap(student, teacher, x, t)
    rows = []
    for sigma in sigmas:
        if sigma <= 0 or sigma > 0.1:
            raise ValueError("sigma must lie in (0, 0.1] for the expansion to apply")
        gap = _expected_sq_gap(student, teacher, x, t, sigma, n, rule) - base
        pred = sigma * sigma * frob
        rows.append({"sigma": float(sigma), "measured_gap": gap,
                     "frobenius_sq": frob, "second_order": pred,
                     "residual": gap - pred})
    return rows
