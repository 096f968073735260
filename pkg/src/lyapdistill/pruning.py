"""Structured pruning of hidden units: importance scoring and mask selection.

Scoring produces one non-negative number per active hidden unit; selection
removes the lowest-scoring units globally until just before the removed
parameter fraction would cross the target, never dropping a layer below one
surviving unit. Everything is deterministic given (network, scores, ratio).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import scorenet as sn

METHODS = ("random", "magnitude", "lamp", "taylor")


@dataclass
class ImportanceScores:
    """Flat parallel arrays over active hidden units."""

    method: str
    layer_idx: np.ndarray
    unit_idx: np.ndarray
    scores: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("scores must be finite and non-negative")
        if not (len(self.layer_idx) == len(self.unit_idx) == len(self.scores)):
            raise ValueError("score arrays must be parallel")


@dataclass
class PruningPlan:
    method: str
    target_ratio: float
    seed: int
    masks: list
    achieved_ratio: float
    surviving_widths: list

    def to_record(self):
        return {"method": self.method, "target_ratio": self.target_ratio,
                "seed": self.seed, "achieved_ratio": self.achieved_ratio,
                "surviving_widths": list(self.surviving_widths)}


def _active_units(net):
    """(layer, unit) pairs of units the current masks keep."""
    pairs = []
    for li, w in enumerate(net.hidden_widths):
        alive = np.arange(w) if net.masks is None \
            else np.flatnonzero(net.masks[li] > 0.5)
        pairs.extend((li, int(u)) for u in alive)
    return pairs


def _magnitude_per_unit(net):
    """Sum of |w| over each unit's incoming and outgoing weights (no bias)."""
    layers = [(np.asarray(w), np.asarray(b))
              for w, b in sn.unpack_params(net, net.params)]
    per_layer = []
    for li in range(len(net.hidden_widths)):
        w_in = layers[li][0]
        w_out = layers[li + 1][0]
        incoming = np.abs(w_in).sum(axis=0)
        # outgoing rows of the next layer: this layer's units come first,
        # ahead of that layer's time-embedding rows
        outgoing = np.abs(w_out[: net.hidden_widths[li], :]).sum(axis=1)
        per_layer.append(incoming + outgoing)
    return per_layer


def _taylor_per_unit(net, calib):
    """|sum over the batch of gradient times activation| at each unit.

    Computed as the absolute gradient of the noise-prediction loss with
    respect to an all-ones mask inserted after each activation, which equals
    the summed gradient-activation product along that unit.
    """
    xt, t, eps = calib
    xt = np.asarray(xt, dtype=np.float64)
    if xt.ndim != 2 or xt.shape[0] < 1:
        raise ValueError("taylor scoring needs a nonempty calibration batch")
    widths = net.hidden_widths
    flat_ones = np.ones(sum(widths))

    def np_loss(flat_masks):
        offs = np.cumsum([0] + list(widths))
        masks = [ad.narrow(flat_masks, offs[i], offs[i + 1])
                 for i in range(len(widths))]
        if net.masks is not None:
            masks = [ad.mul(m, base) for m, base in zip(masks, net.masks)]
        out = sn.forward(net, xt, t, masks=masks)
        return ad.mean(ad.sum_(ad.square(ad.sub(out, eps)), axis=1))

    g = ad.grad(np_loss, flat_ones)
    offs = np.cumsum([0] + list(widths))
    return [np.abs(g[offs[i]:offs[i + 1]]) for i in range(len(widths))]


def _lamp_normalize(per_layer_mag):
    """Squared magnitudes, each divided by the within-layer sum of squares of
    all units at least as large (suffix of the ascending sort)."""
    out = []
    for m in per_layer_mag:
        sq = m * m
        order = np.argsort(sq, kind="stable")
        suffix = np.cumsum(sq[order][::-1])[::-1]  # sum over ranks >= own
        denom = np.empty_like(sq)
        denom[order] = suffix
        out.append(np.where(denom > 0, sq / np.maximum(denom, 1e-300), 0.0))
    return out


def importance_scores(method, net, calib=None, seed=0):
    """Score every active hidden unit by the named criterion."""
    if method not in METHODS:
        raise ValueError(f"unknown pruning method {method!r}")
    pairs = _active_units(net)
    if method == "random":
        rng = np.random.default_rng(seed)
        flat = rng.uniform(size=len(pairs))
    else:
        if method == "taylor":
            if calib is None:
                raise ValueError("taylor scoring needs a calibration batch")
            per_layer = _taylor_per_unit(net, calib)
        else:
            per_layer = _magnitude_per_unit(net)
            if method == "lamp":
                per_layer = _lamp_normalize(per_layer)
        flat = np.array([per_layer[li][u] for li, u in pairs])
    return ImportanceScores(method,
                            np.array([p[0] for p in pairs]),
                            np.array([p[1] for p in pairs]),
                            flat, seed=seed)


def _removed_ratio(net, masks, dense_count):
    return 1.0 - sn.param_count(replace(net, masks=masks)) / dense_count


def prune_to_ratio(net, scores, target_ratio):
    """Mask out low-importance units until just below the target removed
    parameter fraction.

    Candidates are taken in ascending (score, layer, unit) order; a removal
    that would cross the target stops the scan, and a layer is never left
    empty. Raises when the target exceeds what per-layer floors allow.
    """
    if not 0.0 < target_ratio < 1.0:
        raise ValueError("target_ratio must lie in (0, 1)")
    dense_count = sn.param_count(replace(net, masks=None))
    floor_masks = [np.zeros(w) for w in net.hidden_widths]
    for m in floor_masks:
        m[0] = 1.0
    max_ratio = _removed_ratio(net, floor_masks, dense_count)
    if target_ratio > max_ratio:
        raise ValueError(
            f"target ratio {target_ratio} unachievable: per-layer floors cap "
            f"removal at {max_ratio:.4f}")
    masks = [np.ones(w) if net.masks is None else net.masks[li].copy()
             for li, w in enumerate(net.hidden_widths)]
    order = np.lexsort((scores.unit_idx, scores.layer_idx, scores.scores))
    for i in order:
        li, u = int(scores.layer_idx[i]), int(scores.unit_idx[i])
        if masks[li].sum() <= 1:  # floor: keep at least one unit per layer
            continue
        trial = [m.copy() for m in masks]
        trial[li][u] = 0.0
        if _removed_ratio(net, trial, dense_count) > target_ratio:
            break
        masks = trial
    return replace(net, masks=masks)


def prune(net, method, target_ratio, calib=None, seed=0):
    """Score, select, and describe in one call; returns (masked net, plan)."""
    scores = importance_scores(method, net, calib=calib, seed=seed)
    pruned = prune_to_ratio(net, scores, target_ratio)
    dense_count = sn.param_count(replace(net, masks=None))
    achieved = 1.0 - sn.param_count(pruned) / dense_count
    plan = PruningPlan(method, target_ratio, seed,
                       [m.copy() for m in pruned.masks],
                       achieved, sn.active_units(pruned))
    return pruned, plan
