import numpy as np
import pytest

from lyapdistill import data_metrics as dm
from lyapdistill import diffusion as df


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def test_sample_dataset_deterministic():
    a = dm.sample_dataset("gmm_ring8", 1, 42)
    b = dm.sample_dataset("gmm_ring8", 1, 42)
    assert np.array_equal(a.points, b.points)
    assert a.points.shape == (1, 2)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        dm.sample_dataset("spiral", 10, 0)


def test_ring_mean_is_near_origin():
    pts = dm.sample_dataset("gmm_ring8", 100_000, 7).points
    assert np.linalg.norm(pts.mean(axis=0)) < 0.01


def test_ring_mixture_geometry():
    gmm = dm.ring_mixture()
    assert gmm.means.shape == (8, 2)
    radii = np.linalg.norm(gmm.means, axis=1)
    assert np.allclose(radii, 1.0)
    assert np.allclose(gmm.variances, 0.01)
    assert np.allclose(gmm.weights, 1.0 / 8.0)


def test_two_moons_radius_bounds():
    pts = dm.sample_dataset("two_moons", 20_000, 3).points
    # every point lies within 6 jitter sigmas of one of the two arcs
    r_upper = np.abs(np.linalg.norm(pts, axis=1) - 1.0)
    r_lower = np.abs(np.linalg.norm(pts - np.array([1.0, 0.5]), axis=1) - 1.0)
    assert np.maximum(np.minimum(r_upper, r_lower), 0.0).max() < 0.3


def test_checkerboard_cells():
    pts = dm.sample_dataset("checkerboard", 20_000, 5).points
    assert pts.min() >= -2.0 and pts.max() < 2.0
    ix = np.floor(pts[:, 0] + 2.0).astype(int)
    iy = np.floor(pts[:, 1] + 2.0).astype(int)
    assert np.all((ix + iy) % 2 == 0)


def test_export_csv_header(tmp_path):
    ss = dm.sample_dataset("gmm_ring8", 3, 1)
    path = tmp_path / "pts.csv"
    dm.export_csv(ss, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "x0,x1"
    assert len(lines) == 4
    back = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    assert np.array_equal(back, ss.points)


# ---------------------------------------------------------------------------
# analytic score
# ---------------------------------------------------------------------------

def test_single_component_score():
    gmm = dm.GaussianMixture(np.array([[1.0, -1.0]]), np.array([0.04]),
                             np.array([1.0]))
    x = np.array([[1.5, 0.0]])
    got = dm.true_score(gmm, x, added_noise_var=0.06)
    expect = -(x - gmm.means[0]) / 0.10
    assert np.allclose(got, expect)


def test_symmetric_midpoint_score_vanishes_on_axis():
    gmm = dm.GaussianMixture(np.array([[-1.0, 0.0], [1.0, 0.0]]),
                             np.array([0.09, 0.09]), np.array([0.5, 0.5]))
    x = np.array([[0.0, 0.3]])
    s = dm.true_score(gmm, x, 0.0)
    assert abs(s[0, 0]) < 1e-14  # separating-axis component cancels
    assert s[0, 1] < 0           # pulls back toward the means' y level


def test_score_is_gradient_of_log_density():
    gmm = dm.ring_mixture()
    rng = np.random.default_rng(11)
    xs = rng.standard_normal((20, 2)) * 1.2
    h = 1e-6
    s = dm.true_score(gmm, xs, added_noise_var=0.05)
    for i, x in enumerate(xs):
        fd = np.zeros(2)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            conv = dm.convolve(gmm, 0.05)
            fd[j] = (dm.log_density(conv, x + e)
                     - dm.log_density(conv, x - e)) / (2 * h)
        assert np.linalg.norm(s[i] - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-6


def test_log_density_survives_far_tails():
    gmm = dm.ring_mixture()
    x = np.array([1e4, -1e4])
    ld = dm.log_density(gmm, x)
    assert np.isfinite(ld) and ld < -1e6
    assert np.all(np.isfinite(dm.true_score(gmm, x[None, :], 0.0)))


def test_score_line_integral_recovers_log_density_gap():
    """The score field integrates to log-density differences."""
    gmm = dm.ring_mixture()
    a = np.array([0.2, -0.1])
    b = np.array([0.9, 0.7])
    n = 20_000
    ts = (np.arange(n) + 0.5) / n
    pts = a[None, :] + ts[:, None] * (b - a)[None, :]
    s = dm.true_score(gmm, pts, added_noise_var=0.02)
    integral = float(np.sum(s @ (b - a)) / n)
    conv = dm.convolve(gmm, 0.02)
    direct = dm.log_density(conv, b) - dm.log_density(conv, a)
    assert abs(integral - direct) < 1e-4


def test_convolve_and_diffused():
    gmm = dm.ring_mixture()
    conv = dm.convolve(gmm, 0.5)
    assert np.allclose(conv.variances, gmm.variances + 0.5)
    assert np.allclose(conv.means, gmm.means)
    dif = dm.diffused(gmm, 0.25)
    assert np.allclose(dif.means, 0.5 * gmm.means)
    assert np.allclose(dif.variances, 0.25 * gmm.variances + 0.75)
    same = dm.diffused(gmm, 1.0)
    assert np.allclose(same.means, gmm.means)
    assert np.allclose(same.variances, gmm.variances)


def test_diffused_matches_forward_perturb_moments():
    """Empirical moments of perturbed data sit on the analytic mixture."""
    s = df.make_schedule("linear", 100, 1e-4, 0.2)
    t = 60
    gmm = dm.ring_mixture()
    rng = np.random.default_rng(2)
    x0 = dm.sample_gmm(gmm, 200_000, rng)
    xt = df.forward_perturb(x0, t, rng.standard_normal(x0.shape), s)
    dif = dm.diffused(gmm, s.alpha_bar[t])
    mean_expect = np.sum(dif.weights[:, None] * dif.means, axis=0)
    # isotropic per-component second moment
    e2 = np.sum(dif.weights * (dif.variances + 0.5 * np.sum(dif.means**2, axis=1)))
    got_e2 = 0.5 * np.sum(xt**2, axis=1).mean()
    assert np.linalg.norm(xt.mean(axis=0) - mean_expect) < 0.01
    assert abs(got_e2 - e2) / e2 < 0.02


def test_gmm_validation():
    with pytest.raises(ValueError):
        dm.GaussianMixture(np.zeros((2, 2)), np.array([0.1, 0.1]),
                           np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        dm.GaussianMixture(np.zeros((1, 2)), np.array([-0.1]), np.array([1.0]))


# ---------------------------------------------------------------------------
# score matching error
# ---------------------------------------------------------------------------

def test_sme_zero_for_exact_model():
    gmm = dm.ring_mixture()
    s = df.make_schedule("linear", 100, 1e-4, 0.2)
    t = 50
    ab = s.alpha_bar[t]

    def exact_eps(x, tt):
        # invert the score conversion used by the metric
        return -dm.true_score(dm.diffused(gmm, ab), np.asarray(x), 0.0) * np.sqrt(1 - ab)

    err, se = dm.score_matching_error(exact_eps, gmm, s, t, 2048, 3)
    assert err < 1e-22


def test_sme_zero_model_matches_plugin_oracle():
    """Zero model error is half the mean squared true-score norm."""
    gmm = dm.ring_mixture()
    s = df.make_schedule("linear", 100, 1e-4, 0.2)
    t = 30
    zero = lambda x, tt: np.zeros_like(np.asarray(x))
    err, se = dm.score_matching_error(zero, gmm, s, t, 50_000, 9)

    rng = np.random.default_rng(1234)
    x0 = dm.sample_gmm(gmm, 200_000, rng)
    xt = df.forward_perturb(x0, t, rng.standard_normal(x0.shape), s)
    sc = dm.true_score(dm.diffused(gmm, s.alpha_bar[t]), xt, 0.0)
    oracle = 0.5 * np.sum(sc**2, axis=1).mean()
    assert abs(err - oracle) < 4 * se + 0.01 * oracle


def test_sme_rejects_unnoised_time():
    gmm = dm.ring_mixture()
    s = df.make_schedule("linear", 10, 1e-4, 0.02)
    with pytest.raises(ValueError):
        dm.score_matching_error(lambda x, t: x, gmm, s, -1, 100, 0)


# ---------------------------------------------------------------------------
# mmd
# ---------------------------------------------------------------------------

def test_mmd_identical_sets_is_exactly_zero():
    x = np.random.default_rng(0).standard_normal((50, 2))
    assert dm.mmd_rbf(x, x.copy(), 1.0) == 0.0


def test_mmd_symmetry_and_permutation_invariance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((40, 2))
    y = rng.standard_normal((60, 2)) + 0.5
    m1 = dm.mmd_rbf(x, y, 0.7)
    m2 = dm.mmd_rbf(y, x, 0.7)
    assert abs(m1 - m2) < 1e-15
    perm = rng.permutation(60)
    m3 = dm.mmd_rbf(x, y[perm], 0.7)
    assert abs(m1 - m3) < 1e-12


def test_mmd_matches_direct_double_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((12, 2))
    y = rng.standard_normal((9, 2)) + 1.0
    h = 0.8
    gamma = 1.0 / (2 * h * h)

    def k(a, b):
        return np.exp(-gamma * np.sum((a - b) ** 2))

    n, m = len(x), len(y)
    kxx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j)
    kyy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j)
    kxy = sum(k(x[i], y[j]) for i in range(n) for j in range(m))
    direct = kxx / (n * (n - 1)) + kyy / (m * (m - 1)) - 2 * kxy / (n * m)
    assert abs(dm.mmd_rbf(x, y, h) - direct) < 1e-12


def test_mmd_separates_shifted_distributions():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((500, 2))
    y = rng.standard_normal((500, 2))
    z = rng.standard_normal((500, 2)) + np.array([3.0, 0.0])
    bw = dm.median_heuristic_bandwidth(x, y)
    near = dm.mmd_rbf(x, y, bw)
    far = dm.mmd_rbf(x, z, bw)
    assert far > 50 * abs(near)
    assert far > 0.1


def test_mmd_requires_two_points_per_set():
    with pytest.raises(ValueError):
        dm.mmd_rbf(np.zeros((1, 2)), np.zeros((5, 2)), 1.0)


def test_median_bandwidth_symmetric_and_positive():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((300, 2))
    y = rng.standard_normal((200, 2)) * 2.0
    assert dm.median_heuristic_bandwidth(x, y) == dm.median_heuristic_bandwidth(y, x)
    assert dm.median_heuristic_bandwidth(x) > 0
    with pytest.raises(ValueError):
        dm.median_heuristic_bandwidth(np.zeros((10, 2)))


# ---------------------------------------------------------------------------
# sliced wasserstein
# ---------------------------------------------------------------------------

def test_w1_equal_sizes_matches_sorted_mean():
    rng = np.random.default_rng(5)
    u = rng.standard_normal(64)
    v = rng.standard_normal(64) + 0.7
    direct = np.mean(np.abs(np.sort(u) - np.sort(v)))
    assert abs(dm._wasserstein_1d(u, v) - direct) < 1e-12


def test_w1_unequal_sizes_matches_quantile_grid():
    rng = np.random.default_rng(6)
    u = rng.standard_normal(37)
    v = 0.5 * rng.standard_normal(53) - 0.2
    got = dm._wasserstein_1d(u, v)
    # fine midpoint quantile grid converges to the exact integral
    q = (np.arange(2_000_000) + 0.5) / 2_000_000
    us = np.sort(u)[np.minimum((q * 37).astype(int), 36)]
    vs = np.sort(v)[np.minimum((q * 53).astype(int), 52)]
    approx = np.mean(np.abs(us - vs))
    assert abs(got - approx) < 1e-4


def test_sliced_wasserstein_separated_gaussians():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2000, 2))
    y = rng.standard_normal((2000, 2)) + np.array([10.0, 0.0])
    sw = dm.sliced_wasserstein(x, y, n_proj=128, seed=0)
    assert sw > 4.0  # mean projected distance of a length-10 shift is 2/pi*10


def test_sliced_wasserstein_symmetry_and_permutation():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((100, 2))
    y = rng.standard_normal((80, 2)) + 0.3
    a = dm.sliced_wasserstein(x, y, 64, seed=5)
    b = dm.sliced_wasserstein(y, x, 64, seed=5)
    assert abs(a - b) < 1e-12
    c = dm.sliced_wasserstein(x, y[rng.permutation(80)], 64, seed=5)
    assert abs(a - c) < 1e-12


def test_sliced_wasserstein_zero_for_identical():
    x = np.random.default_rng(9).standard_normal((64, 2))
    assert dm.sliced_wasserstein(x, x.copy(), 32, seed=1) < 1e-14
