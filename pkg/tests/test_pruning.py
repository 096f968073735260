import numpy as np
import pytest

from lyapdistill import pruning as pr
from lyapdistill import scorenet as sn


def _flat(pairs):
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in pairs])


def _two_unit_net():
    """hidden [2], no time embedding; incoming weights (1,1) and (3,3),
    all outgoing weights zero, so magnitude scores are exactly (2, 6)."""
    net = sn.init_network(2, [2], 0, "tanh", seed=0)
    W1 = np.array([[1.0, 3.0], [1.0, 3.0]])
    b1 = np.zeros(2)
    W2 = np.zeros((2, 2))
    b2 = np.zeros(2)
    return net.with_params(_flat([(W1, b1), (W2, b2)]))


def _scaled_scores(scores, c):
    return pr.ImportanceScores(scores.method, scores.layer_idx,
                               scores.unit_idx, scores.scores * c,
                               seed=scores.seed)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def test_magnitude_scores_hand_example():
    net = _two_unit_net()
    s = pr.importance_scores("magnitude", net)
    assert np.array_equal(s.scores, [2.0, 6.0])
    assert list(s.layer_idx) == [0, 0]
    assert list(s.unit_idx) == [0, 1]


def test_magnitude_low_score_unit_pruned_first():
    net = sn.init_network(2, [3], 0, "tanh", seed=0)
    W1 = np.array([[1.0, 3.0, 5.0], [1.0, 3.0, 5.0]])
    net = net.with_params(_flat([(W1, np.zeros(3)), (np.zeros((3, 2)),
                                                     np.zeros(2))]))
    s = pr.importance_scores("magnitude", net)
    assert np.array_equal(s.scores, [2.0, 6.0, 10.0])
    pruned = pr.prune_to_ratio(net, s, 0.35)
    assert np.array_equal(pruned.masks[0], [0.0, 1.0, 1.0])


def test_magnitude_counts_outgoing_weights():
    net = sn.init_network(1, [3], 0, "tanh", seed=1)
    W1 = np.array([[1.0, 1.0, 1.0]])
    b1 = np.zeros(3)
    W2 = np.array([[0.5], [0.0], [2.0]])
    b2 = np.zeros(1)
    net = net.with_params(_flat([(W1, b1), (W2, b2)]))
    s = pr.importance_scores("magnitude", net)
    assert np.allclose(s.scores, [1.5, 1.0, 3.0])


def test_random_scores_deterministic():
    net = sn.init_network(2, [4, 4], 4, "silu", seed=2)
    a = pr.importance_scores("random", net, seed=7)
    b = pr.importance_scores("random", net, seed=7)
    c = pr.importance_scores("random", net, seed=8)
    assert np.array_equal(a.scores, b.scores)
    assert not np.array_equal(a.scores, c.scores)


def test_taylor_zero_outgoing_unit_scores_zero():
    net = sn.init_network(2, [3], 4, "tanh", seed=3)
    pairs = [(w.copy(), b.copy()) for w, b in sn.unpack_params(net, net.params)]
    pairs[1][0][1, :] = 0.0  # cut unit 1's only path to the output
    net = net.with_params(_flat(pairs))
    rng = np.random.default_rng(4)
    calib = (rng.standard_normal((16, 2)), 5, rng.standard_normal((16, 2)))
    s = pr.importance_scores("taylor", net, calib=calib)
    assert s.scores[1] == 0.0
    assert s.scores[0] > 0.0 and s.scores[2] > 0.0


def test_taylor_requires_calibration_batch():
    net = sn.init_network(2, [3], 4, "tanh", seed=3)
    with pytest.raises(ValueError):
        pr.importance_scores("taylor", net)
    with pytest.raises(ValueError):
        pr.importance_scores("taylor", net,
                             calib=(np.zeros((0, 2)), 0, np.zeros((0, 2))))


def test_lamp_hand_example():
    """Unit magnitudes (1,2,3): squared (1,4,9), each divided by the sum of
    squares of units at least as large: (1/14, 4/13, 1)."""
    net = sn.init_network(1, [3], 0, "tanh", seed=5)
    W1 = np.array([[1.0, 2.0, 3.0]])
    b1 = np.zeros(3)
    W2 = np.zeros((3, 1))
    b2 = np.zeros(1)
    net = net.with_params(_flat([(W1, b1), (W2, b2)]))
    s = pr.importance_scores("lamp", net)
    assert np.allclose(s.scores, [1 / 14, 4 / 13, 1.0], atol=1e-12)


def test_lamp_preserves_within_layer_ordering():
    net = sn.init_network(2, [6, 5], 4, "silu", seed=6)
    mag = pr.importance_scores("magnitude", net)
    lamp = pr.importance_scores("lamp", net)
    for li in (0, 1):
        sel = mag.layer_idx == li
        assert np.array_equal(np.argsort(mag.scores[sel]),
                              np.argsort(lamp.scores[sel]))


def test_unknown_method_rejected():
    net = sn.init_network(2, [3], 4, "tanh", seed=0)
    with pytest.raises(ValueError):
        pr.importance_scores("weight_rewiring", net)


def test_scores_validation():
    with pytest.raises(ValueError):
        pr.ImportanceScores("magnitude", np.array([0]), np.array([0]),
                            np.array([-1.0]))
    with pytest.raises(ValueError):
        pr.ImportanceScores("magnitude", np.array([0]), np.array([0]),
                            np.array([np.nan]))
    with pytest.raises(ValueError):
        pr.ImportanceScores("magnitude", np.array([0, 0]), np.array([0]),
                            np.array([1.0]))


def test_scoring_sees_only_active_units():
    net = sn.init_network(2, [6, 6], 4, "silu", seed=7)
    s = pr.importance_scores("magnitude", net)
    pruned = pr.prune_to_ratio(net, s, 0.3)
    s2 = pr.importance_scores("magnitude", pruned)
    n_active = sum(int(m.sum()) for m in pruned.masks)
    assert len(s2.scores) == n_active < len(s.scores)


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def test_tiny_target_is_identity():
    net = sn.init_network(2, [4], 4, "tanh", seed=8)
    s = pr.importance_scores("magnitude", net)
    pruned = pr.prune_to_ratio(net, s, 1e-9)
    assert all(np.all(m == 1.0) for m in pruned.masks)


def test_tie_break_by_layer_then_unit():
    net = sn.init_network(2, [3, 3], 0, "tanh", seed=9)
    n = len(pr.importance_scores("magnitude", net).scores)
    uniform = pr.ImportanceScores(
        "magnitude",
        np.repeat([0, 1], 3), np.tile([0, 1, 2], 2),
        np.ones(n))
    pruned = pr.prune_to_ratio(net, uniform, 0.5)
    assert np.array_equal(pruned.masks[0], [0.0, 0.0, 1.0])
    assert np.array_equal(pruned.masks[1], [1.0, 1.0, 1.0])


def test_target_bounds_and_floor():
    net = sn.init_network(2, [2], 0, "tanh", seed=10)
    s = pr.importance_scores("magnitude", net)
    with pytest.raises(ValueError):
        pr.prune_to_ratio(net, s, 0.0)
    with pytest.raises(ValueError):
        pr.prune_to_ratio(net, s, 1.0)
    # dense 12 params; the floor keeps one of two units, capping removal at 5/12
    with pytest.raises(ValueError):
        pr.prune_to_ratio(net, s, 0.9)


def test_every_layer_keeps_a_unit():
    net = sn.init_network(2, [4, 4], 4, "silu", seed=11)
    s = pr.importance_scores("random", net, seed=0)
    dense = sn.param_count(net)
    floor = pr.prune_to_ratio(net, s, 0.7)
    assert all(m.sum() >= 1 for m in floor.masks)
    assert sn.param_count(floor) < dense


def test_monotone_in_target_ratio():
    net = sn.init_network(2, [8, 8], 4, "silu", seed=12)
    s = pr.importance_scores("magnitude", net)
    prev = None
    for ratio in (0.1, 0.25, 0.4, 0.55, 0.7):
        masks = pr.prune_to_ratio(net, s, ratio).masks
        if prev is not None:
            for a, b in zip(prev, masks):
                assert np.all(b <= a)  # pruned set only grows
        prev = masks


def test_selection_invariant_to_score_scale():
    net = sn.init_network(2, [8, 8], 4, "silu", seed=13)
    s = pr.importance_scores("magnitude", net)
    a = pr.prune_to_ratio(net, s, 0.4).masks
    b = pr.prune_to_ratio(net, _scaled_scores(s, 17.3), 0.4).masks
    for ma, mb in zip(a, b):
        assert np.array_equal(ma, mb)


def test_same_inputs_same_plan():
    net = sn.init_network(2, [8, 8], 4, "silu", seed=14)
    _, p1 = pr.prune(net, "lamp", 0.44)
    _, p2 = pr.prune(net, "lamp", 0.44)
    assert p1.to_record() == p2.to_record()
    for ma, mb in zip(p1.masks, p2.masks):
        assert np.array_equal(ma, mb)


def test_achieved_ratio_tracks_target_over_random_nets():
    """Greedy removal stops just under the target, so the gap is bounded by
    the largest single unit's parameter share."""
    rng = np.random.default_rng(15)
    for trial in range(100):
        widths = list(rng.integers(3, 9, size=int(rng.integers(1, 3))))
        net = sn.init_network(int(rng.integers(1, 4)), widths,
                              int(rng.integers(0, 3)) * 2, "tanh",
                              seed=int(rng.integers(1 << 20)))
        dense = sn.param_count(net)
        # parameter share of each unit if removed from the dense net
        shares = []
        from dataclasses import replace
        for li, w in enumerate(widths):
            masks = [np.ones(ww) for ww in widths]
            masks[li][0] = 0.0
            shares.append(1.0 - sn.param_count(replace(net, masks=masks)) / dense)
        max_share = max(shares)
        target = float(rng.uniform(0.08, 0.5))
        s = pr.importance_scores("random", net, seed=trial)
        pruned = pr.prune_to_ratio(net, s, target)
        achieved = 1.0 - sn.param_count(pruned) / dense
        assert achieved <= target + 1e-12
        assert target - achieved <= max_share + 1e-12


# ---------------------------------------------------------------------------
# end-to-end plans
# ---------------------------------------------------------------------------

def test_prune_returns_consistent_plan():
    net = sn.init_network(2, [16, 16], 8, "silu", seed=16)
    rng = np.random.default_rng(17)
    calib = (rng.standard_normal((32, 2)), 9, rng.standard_normal((32, 2)))
    for method in pr.METHODS:
        pruned, plan = pr.prune(net, method, 0.44, calib=calib, seed=3)
        dense = sn.param_count(net)
        assert plan.method == method
        assert plan.target_ratio == 0.44
        assert abs(plan.achieved_ratio
                   - (1.0 - sn.param_count(pruned) / dense)) < 1e-15
        assert plan.surviving_widths == [int(m.sum()) for m in pruned.masks]
        rec = plan.to_record()
        assert set(rec) == {"method", "target_ratio", "seed",
                            "achieved_ratio", "surviving_widths"}


def test_pruned_net_still_runs_and_materializes():
    net = sn.init_network(2, [12, 12], 4, "tanh", seed=18)
    pruned, _ = pr.prune(net, "magnitude", 0.5)
    x = np.random.default_rng(19).standard_normal((8, 2))
    y_masked = sn.forward(pruned, x, 3)
    compact = sn.materialize_pruned(pruned)
    y_compact = sn.forward(compact, x, 3)
    assert np.allclose(y_masked, y_compact, rtol=1e-12, atol=1e-14)
    assert sn.param_count(compact) == sn.param_count(pruned)
