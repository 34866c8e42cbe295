"""Backbone network and prediction heads over ragged batches of states.

Set mode is a deep-set: a per-component MLP, a mean-pooled context, and a
second per-component MLP conditioned on that context, which makes the noise
prediction permutation-equivariant and every pooled head invariant. Ordered
mode adds a normalized position feature to each component and scores the
``n + 1`` insertion slots from the features on either side of each slot.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .state import RaggedBatch, TransState

LOGSTD_MIN, LOGSTD_MAX = -5.0, 2.0
TIME_FEATURES = 16
# added to the count logits below the current count; exp() of it is exactly 0
IMPOSSIBLE_LOGIT = -1e4
# 1 / sqrt(E[silu(z)^2]) for z ~ N(0, 1): keeps hidden activations at unit scale
SILU_GAIN = 1.6765
HIDDEN_PREFIXES = ("enc", "dec", "glob", "slot0")
MODES = ("set", "ordered")
RATE_MODES = ("prop3", "direct")


@dataclass(frozen=True)
class ArchConfig:
    N: int
    d: int
    hidden: int = 64
    depth: int = 2
    mode: str = "set"
    rate_mode: str = "prop3"
    T: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.hidden < 1 or self.N < 1 or self.d < 1:
            raise ValueError("hidden, N and d must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.rate_mode not in RATE_MODES:
            raise ValueError(f"rate_mode must be one of {RATE_MODES}")

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelParams:
    arch: ArchConfig
    flat: np.ndarray
    layout: dict

    def copy(self):
        return ModelParams(self.arch, self.flat.copy(), dict(self.layout))

    def block(self, name):
        start, stop, shape = self.layout[name]
        return self.flat[start:stop].reshape(shape)

    def prefix_slice(self, prefix):
        """Boolean mask over ``flat`` covering every layer named ``prefix*``."""
        m = np.zeros(self.flat.size, dtype=bool)
        for name, (start, stop, _) in self.layout.items():
            if name.startswith(prefix):
                m[start:stop] = True
        return m


def _layer_shapes(arch):
    H, d, N = arch.hidden, arch.d, arch.N
    comp_in = d + TIME_FEATURES + 1 + (1 if arch.mode == "ordered" else 0)
    shapes = []

    def mlp(prefix, n_in):
        for k in range(arch.depth):
            shapes.append((f"{prefix}{k}.W", (n_in if k == 0 else H, H)))
            shapes.append((f"{prefix}{k}.b", (H,)))

    mlp("enc", comp_in)
    mlp("dec", 2 * H + TIME_FEATURES)
    shapes += [("eps_out.W", (H, d)), ("eps_out.b", (d,))]
    mlp("glob", H + TIME_FEATURES + 1)
    shapes += [("n0_out.W", (H, N)), ("n0_out.b", (N,)),
               ("ins_mean.W", (H, d)), ("ins_mean.b", (d,)),
               ("ins_logstd.W", (H, d)), ("ins_logstd.b", (d,))]
    if arch.rate_mode == "direct":
        shapes += [("rate_out.W", (H, 1)), ("rate_out.b", (1,))]
    if arch.mode == "ordered":
        shapes += [("slot0.W", (3 * H, H)), ("slot0.b", (H,)),
                   ("slot_out.W", (H, 1)), ("slot_out.b", (1,))]
    return shapes


def init_params(arch, rng):
    layout, pieces, start = {}, [], 0
    for name, shape in _layer_shapes(arch):
        size = int(np.prod(shape))
        layout[name] = (start, start + size, shape)
        start += size
        if name.endswith(".W"):
            gain = SILU_GAIN if name.startswith(HIDDEN_PREFIXES) else 1.0
            pieces.append(rng.standard_normal(size) * gain / np.sqrt(shape[0]))
        elif name == "ins_logstd.b":
            pieces.append(np.full(size, np.log(0.5)))
        else:
            pieces.append(np.zeros(size))
    return ModelParams(arch, np.concatenate(pieces), layout)


def time_features(t, T):
    """Sinusoidal features of ``t / T``; shape ``(len(t), 16)``."""
    s = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    freq = np.pi * 2.0 ** (np.arange(TIME_FEATURES // 2) / 2.0)
    return np.concatenate([np.sin(s * freq), np.cos(s * freq)], axis=1)


@dataclass
class HeadsOutput:
    """Head outputs for a single state (plain arrays)."""

    eps_pred: np.ndarray
    n0_logits: np.ndarray
    ins_index_logits: np.ndarray | None
    ins_mean: np.ndarray
    ins_logstd: np.ndarray
    rate_log: float | None = None


class _Weights:
    def __init__(self, params, flat_node):
        self.layout = params.layout
        self.flat = flat_node
        self._cache = {}

    def __getitem__(self, name):
        if name not in self._cache:
            start, stop, shape = self.layout[name]
            self._cache[name] = ad.take_slice(self.flat, start, stop, shape)
        return self._cache[name]


def _dense(W, name, h):
    return ad.add(ad.matmul(h, W[name + ".W"]), W[name + ".b"])


def _mlp(W, prefix, depth, h):
    for k in range(depth):
        h = ad.silu(_dense(W, f"{prefix}{k}", h))
    return h


def forward_batch(params, batch, t, flat=None, x=None):
    """Run every head on a :class:`RaggedBatch`.

    ``t`` holds one time per item. ``flat`` may be a tape node standing in for
    the parameters and ``x`` one standing in for ``batch.values``, so the
    caller can differentiate with respect to either. Returns a dict of tape
    nodes: ``eps_pred (R, d)``, ``n0_logits (B, N)``, ``ins_mean (B, d)``,
    ``ins_logstd (B, d)`` (clamped), and, when present, ``rate_log (B,)`` and
    ``slot_logits`` over ``R + B`` slots with ``slot_seg`` mapping each slot
    to its item.
    """
    arch = params.arch
    W = _Weights(params, ad.TapeNode(params.flat) if flat is None else flat)
    B = batch.size
    seg = batch.segment_ids
    counts = batch.counts
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    temb = time_features(t, arch.T)
    nfeat = (counts / arch.N).reshape(-1, 1)
    x = ad.TapeNode(batch.values) if x is None else x

    comp_feats = [x, temb[seg], nfeat[seg]]
    if arch.mode == "ordered":
        comp_feats.append((batch.positions / (counts[seg] + 1.0)).reshape(-1, 1))
    h = _mlp(W, "enc", arch.depth, ad.concat(comp_feats, axis=1))
    ctx = ad.segment_mean(h, seg, counts)

    hd = ad.concat([h, ad.take_rows(ctx, seg), temb[seg]], axis=1)
    eps = _dense(W, "eps_out", _mlp(W, "dec", arch.depth, hd))

    g = _mlp(W, "glob", arch.depth, ad.concat([ctx, temb, nfeat], axis=1))
    out = {
        "eps_pred": eps,
        # the forward process only deletes, so n0 >= n always
        "n0_logits": ad.add(_dense(W, "n0_out", g), count_mask(counts, arch.N)),
        "ins_mean": _dense(W, "ins_mean", g),
        "ins_logstd": ad.clip(_dense(W, "ins_logstd", g), LOGSTD_MIN, LOGSTD_MAX),
    }
    if arch.rate_mode == "direct":
        out["rate_log"] = ad.reshape(_dense(W, "rate_out", g), (B,))
    if arch.mode == "ordered":
        out["slot_logits"], out["slot_seg"] = _slot_logits(W, batch, h, g)
    return out


def count_mask(counts, N):
    return np.where(np.arange(1, N + 1)[None, :] < np.asarray(counts)[:, None], IMPOSSIBLE_LOGIT, 0.0)


def _slot_logits(W, batch, h, g):
    # slot j of item b sits between components j-1 and j; missing sides read a zero row
    R, B = batch.values.shape[0], batch.size
    counts = batch.counts
    slot_seg = np.repeat(np.arange(B), counts + 1)
    slot_pos = np.arange(R + B) - np.repeat(np.concatenate([[0], np.cumsum(counts + 1)[:-1]]), counts + 1)
    base = batch.offsets[:-1][slot_seg]
    left = np.where(slot_pos > 0, base + slot_pos - 1, R)
    right = np.where(slot_pos < counts[slot_seg], base + slot_pos, R)
    hz = ad.concat([h, np.zeros((1, h.shape[1]))], axis=0)
    feats = ad.concat([ad.take_rows(hz, left), ad.take_rows(hz, right), ad.take_rows(g, slot_seg)], axis=1)
    s = ad.silu(_dense(W, "slot0", feats))
    return ad.reshape(_dense(W, "slot_out", s), (R + B,)), slot_seg


def forward_heads(params, Xt, t):
    """Evaluate all heads on a single :class:`TransState`."""
    if Xt.N != params.arch.N or Xt.d != params.arch.d:
        raise ValueError(f"state has (N={Xt.N}, d={Xt.d}), model expects "
                         f"(N={params.arch.N}, d={params.arch.d})")
    out = forward_batch(params, RaggedBatch.from_states([Xt]), np.array([t]))
    return HeadsOutput(
        eps_pred=out["eps_pred"].value.ravel(),
        n0_logits=out["n0_logits"].value[0],
        ins_index_logits=out["slot_logits"].value if "slot_logits" in out else None,
        ins_mean=out["ins_mean"].value[0],
        ins_logstd=out["ins_logstd"].value[0],
        rate_log=float(out["rate_log"].value[0]) if "rate_log" in out else None,
    )


def score_from_eps(eps_pred, alpha):
    """Score ``-eps / sqrt(1 - alpha)`` implied by a noise prediction."""
    return -np.asarray(eps_pred) / np.sqrt(1.0 - alpha)


def grad(params, loss_builder):
    """Gradient of ``loss_builder(flat_node)`` with the layout of ``params``."""
    return ad.grad(params.flat, loss_builder)


def check_state(X, arch):
    if not isinstance(X, TransState):
        raise TypeError("expected a TransState")
    if X.N != arch.N or X.d != arch.d:
        raise ValueError("state shape does not match the model")
