"""Masked MLP noise predictor with sinusoidal time conditioning.

The network maps a state x and an integer timestep t to a predicted noise
vector of the same shape as x. The timestep enters through a sinusoidal
embedding concatenated to the input of every hidden layer. Hidden units can
be switched off by per-layer binary masks (structured pruning); a masked
network can be materialized into a physically smaller dense one.

Parameters live in a single flat float64 vector so gradient-based training
and checkpointing stay trivial; layers are views into it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"SNCK"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {"tanh": ad.tanh, "silu": ad.silu}


@dataclass
class TimeEmbedding:
    """Sinusoidal embedding on a geometric frequency ladder."""

    dim: int
    frequencies: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.dim % 2 != 0 or self.dim < 0:
            raise ValueError("time embedding dim must be a non-negative even integer")
        half = self.dim // 2
        if half == 0:
            self.frequencies = np.zeros(0)
            return
        k = np.arange(half, dtype=np.float64)
        self.frequencies = np.exp(-np.log(10000.0) * k / max(half - 1, 1))

    def __call__(self, t, batch):
        """Embedding rows for timestep(s) t, shape (batch, dim)."""
        if self.dim == 0:
            return np.zeros((batch, 0))
        tv = np.asarray(t, dtype=np.float64)
        if tv.ndim == 0:
            tv = np.full(batch, float(tv))
        elif tv.shape != (batch,):
            raise ValueError(f"t has shape {tv.shape}, expected scalar or ({batch},)")
        phase = tv[:, None] * self.frequencies[None, :]
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


@dataclass
class ScoreNetwork:
    input_dim: int
    hidden_widths: list
    time_embed_dim: int
    activation: str
    params: np.ndarray
    masks: list | None = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        expected = flat_param_size(self.input_dim, self.hidden_widths,
                                   self.time_embed_dim)
        if self.params.shape != (expected,):
            raise ValueError(
                f"params has shape {self.params.shape}, architecture needs ({expected},)")
        if self.masks is not None:
            if len(self.masks) != len(self.hidden_widths):
                raise ValueError("one mask per hidden layer required")
            for m, w in zip(self.masks, self.hidden_widths):
                if m.shape != (w,):
                    raise ValueError(f"mask shape {m.shape} != layer width ({w},)")

    def with_params(self, params):
        return replace(self, params=params)

    @property
    def time_embedding(self):
        return TimeEmbedding(self.time_embed_dim)


def layer_shapes(input_dim, hidden_widths, time_embed_dim):
    """(fan_in, fan_out) of every affine layer, output layer last."""
    shapes = []
    prev = input_dim
    for w in hidden_widths:
        shapes.append((prev + time_embed_dim, w))
        prev = w
    shapes.append((prev, input_dim))
    return shapes


def flat_param_size(input_dim, hidden_widths, time_embed_dim):
    return sum(fi * fo + fo for fi, fo in
               layer_shapes(input_dim, hidden_widths, time_embed_dim))


def init_network(input_dim, hidden_widths, time_embed_dim, activation, seed):
    """Fresh dense network; weights ~ N(0, 1/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fi, fo in layer_shapes(input_dim, hidden_widths, time_embed_dim):
        chunks.append(rng.standard_normal(fi * fo) / np.sqrt(fi))
        chunks.append(np.zeros(fo))
    return ScoreNetwork(input_dim, list(hidden_widths), time_embed_dim,
                        activation, np.concatenate(chunks))


def unpack_params(net, params):
    """Split a flat parameter vector into (W, b) pairs, tracked if params is."""
    layers = []
    off = 0
    for fi, fo in layer_shapes(net.input_dim, net.hidden_widths, net.time_embed_dim):
        w = ad.reshape(ad.narrow(params, off, off + fi * fo), (fi, fo))
        off += fi * fo
        b = ad.narrow(params, off, off + fo)
        off += fo
        layers.append((w, b))
    return layers


def forward(net, x, t, params=None, masks=None):
    """Predicted noise for state x at timestep t.

    x may be a raw array (plain evaluation), a Var (reverse mode) or a
    DualBatch (forward mode); likewise params, which defaults to the
    network's own. t is an int or a per-sample integer array.
    """
    if params is None:
        params = net.params
    if masks is None:
        masks = net.masks
    single = np.ndim(ad.value_of(x)) == 1
    if single:
        x = ad.reshape(x, (1, net.input_dim))
    batch = np.shape(ad.value_of(x))[0]
    layers = unpack_params(net, params)
    act = _ACTIVATIONS[net.activation]
    temb = net.time_embedding(t, batch)

    h = x
    for i, (w, b) in enumerate(layers[:-1]):
        inp = ad.concat([h, temb], axis=1) if net.time_embed_dim > 0 else h
        h = act(ad.add(ad.matmul(inp, w), b))
        if masks is not None:
            h = ad.mul(h, masks[i])
    w, b = layers[-1]
    out = ad.add(ad.matmul(h, w), b)
    if single:
        out = ad.reshape(out, (net.input_dim,))
    ad.check_finite(out, "network output")
    return out


def predictor(net):
    """The network as a plain (x, t) -> noise callable."""
    return lambda x, t: forward(net, x, t)


def active_units(net):
    """Surviving units per hidden layer under the masks."""
    if net.masks is None:
        return [int(w) for w in net.hidden_widths]
    return [int(round(float(m.sum()))) for m in net.masks]


def param_count(net):
    """Parameters that survive the masks (equals the materialized count)."""
    widths = active_units(net)
    prev = net.input_dim
    total = 0
    for w in widths:
        total += (prev + net.time_embed_dim) * w + w
        prev = w
    total += prev * net.input_dim + net.input_dim
    return total


def mac_count(net, batch=1):
    """Multiply-accumulates of one forward pass over the active units."""
    widths = active_units(net)
    prev = net.input_dim
    total = 0
    for w in widths:
        total += (prev + net.time_embed_dim) * w
        prev = w
    total += prev * net.input_dim
    return total * batch


def materialize_pruned(net):
    """Convert masks into a physically smaller dense network."""
    if net.masks is None:
        return replace(net, params=net.params.copy())
    keep = [np.flatnonzero(m > 0.5) for m in net.masks]
    layers = unpack_params(net, net.params)
    new_chunks = []
    prev_keep = None  # None means the raw input block (never pruned)
    for i, (w, b) in enumerate(layers[:-1]):
        w = np.asarray(w)
        # rows of w: previous layer's units first, then the time embedding
        if prev_keep is None:
            row_idx = np.arange(w.shape[0])
        else:
            n_prev = net.hidden_widths[i - 1]
            row_idx = np.concatenate([prev_keep, np.arange(n_prev, w.shape[0])])
        new_w = w[np.ix_(row_idx, keep[i])]
        new_b = np.asarray(b)[keep[i]]
        new_chunks.append(new_w.ravel())
        new_chunks.append(new_b)
        prev_keep = keep[i]
    w, b = layers[-1]
    new_chunks.append(np.asarray(w)[prev_keep, :].ravel())
    new_chunks.append(np.asarray(b))
    new_widths = [len(k) for k in keep]
    return ScoreNetwork(net.input_dim, new_widths, net.time_embed_dim,
                        net.activation, np.concatenate(new_chunks))


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, length-prefixed JSON header,
# little-endian float64 params, per-layer mask bytes
# ---------------------------------------------------------------------------

def save_checkpoint(path, net, schedule_meta):
    """Write a network plus its diffusion-schedule metadata.

    schedule_meta: dict with keys T, kind, beta_min, beta_max.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "input_dim": net.input_dim,
        "hidden_widths": list(net.hidden_widths),
        "time_embed_dim": net.time_embed_dim,
        "activation": net.activation,
        "T": int(schedule_meta["T"]),
        "schedule_kind": schedule_meta["kind"],
        "beta_min": float(schedule_meta["beta_min"]),
        "beta_max": float(schedule_meta["beta_max"]),
        "has_masks": net.masks is not None,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        p = np.ascontiguousarray(net.params, dtype="<f8")
        f.write(struct.pack("<Q", p.size))
        f.write(p.tobytes())
        if net.masks is not None:
            for m in net.masks:
                mb = (m > 0.5).astype(np.uint8).tobytes()
                f.write(struct.pack("<I", len(mb)))
                f.write(mb)


def load_checkpoint(path):
    """Read a checkpoint; returns (ScoreNetwork, schedule_meta dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode())
        (n,) = struct.unpack("<Q", f.read(8))
        params = np.frombuffer(f.read(8 * n), dtype="<f8").astype(np.float64)
        masks = None
        if header["has_masks"]:
            masks = []
            for _ in header["hidden_widths"]:
                (ln,) = struct.unpack("<I", f.read(4))
                masks.append(np.frombuffer(f.read(ln), dtype=np.uint8)
                             .astype(np.float64))
    net = ScoreNetwork(header["input_dim"], list(header["hidden_widths"]),
                       header["time_embed_dim"], header["activation"],
                       params, masks)
    meta = {"T": header["T"], "kind": header["schedule_kind"],
            "beta_min": header["beta_min"], "beta_max": header["beta_max"]}
    return net, meta
