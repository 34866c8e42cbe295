"""Training objective (negated evidence lower bound plus a count cross-entropy)
and the Adam/EMA training loop."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .forward import sample_noised
from .network import ArchConfig, ModelParams, forward_batch
from .sampler import rate_node
from .schedule import ScheduleConfig
from .state import RaggedBatch, TransState, delete

RATE_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class MinibatchItem:
    t: float
    X0: TransState
    mask: object
    Xt: TransState
    eps: np.ndarray
    index: int | None
    Y: TransState | None
    x_add: np.ndarray | None

    @property
    def valid_jump_terms(self):
        return self.Y is not None


def build_minibatch(rng, dataset, B, schedule, t_min_frac=1e-3):
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if B < 1:
        raise ValueError("batch size must be at least 1")
    picks = rng.integers(len(dataset), size=B)
    ts = rng.uniform(t_min_frac * schedule.T, schedule.T, size=B)
    items = []
    for k, t in zip(picks, ts):
        s = sample_noised(rng, float(t), dataset[k], schedule)
        idx = Y = x_add = None
        if s.Xt.n >= 2:
            idx = int(rng.integers(1, s.Xt.n + 1))
            Y = delete(s.Xt, idx)
            x_add = s.Xt.component(idx).copy()
        items.append(MinibatchItem(s.t, s.X0, s.mask, s.Xt, s.eps, idx, Y, x_add))
    return items


class Collated:
    """Array view of a minibatch: the ``Xt`` states followed by the ``Y``
    states of valid items share a single network pass."""

    def __init__(self, items, schedule):
        self.items = items
        self.schedule = schedule
        self.B = len(items)
        self.t = np.array([it.t for it in items])
        self.n0 = np.array([it.X0.n for it in items])
        self.nt = np.array([it.Xt.n for it in items])
        self.eps = np.concatenate([it.eps for it in items]).reshape(-1, items[0].Xt.d)
        self.valid = np.array([it.valid_jump_terms for it in items])
        vi = np.flatnonzero(self.valid)
        self.valid_idx = vi
        self.fwd_rate = np.asarray(schedule.forward_rate(self.t, self.nt), dtype=np.float64).reshape(-1)
        states = [it.Xt for it in items] + [items[k].Y for k in vi]
        self.joint = RaggedBatch.from_states(states)
        self.t_joint = np.concatenate([self.t, self.t[vi]])
        self.R = int(self.nt.sum())
        if vi.size:
            self.x_add = np.stack([items[k].x_add for k in vi])
            self.index = np.array([items[k].index for k in vi])
        else:
            self.x_add = np.zeros((0, self.joint.d))
            self.index = np.zeros(0, dtype=np.int64)


def collate(items, schedule):
    return items if isinstance(items, Collated) else Collated(items, schedule)


@dataclass
class LossBreakdown:
    score_term: float
    rate_neg_term: float
    rate_log_term: float
    ins_loglik_term: float
    ce_term: float
    total: float
    clamp_count: int = 0

    def row(self, step):
        return [step, self.score_term, self.rate_neg_term, self.rate_log_term,
                self.ins_loglik_term, self.ce_term, self.total, self.clamp_count]


METRIC_COLUMNS = ["step", "score_term", "rate_neg_term", "rate_log_term",
                  "ins_loglik_term", "ce_term", "total", "clamp_count"]


def rate_terms(rate, neg_weight, log_weight):
    """``neg_weight * rate - log_weight * log(max(rate, floor))`` elementwise."""
    return ad.sub(ad.mul(rate, neg_weight), ad.mul(ad.log(ad.maximum(rate, RATE_FLOOR)), log_weight))


class _Heads:
    def __init__(self, params, col, flat):
        self.out = forward_batch(params, col.joint, col.t_joint, flat=flat)
        self.col = col
        B, V = col.B, col.valid_idx.size
        self.x_rows = np.arange(col.R)
        self.x_items = np.arange(B)
        self.y_items = B + np.arange(V)

    def rates(self, schedule, items, t, n):
        out = self.out
        logits = ad.take_rows(out["n0_logits"], items)
        rl = ad.take_rows(out["rate_log"], items) if "rate_log" in out else None
        return rate_node(schedule, t, n, logits, rl)


def _heads(params, col, flat):
    return _Heads(params, col, ad.TapeNode(params.flat) if flat is None else flat)


def score_loss(col, params, flat=None, heads=None):
    heads = heads or _heads(params, col, flat)
    eps_pred = ad.take_rows(heads.out["eps_pred"], heads.x_rows)
    sq = ad.sum(ad.square(ad.sub(eps_pred, col.eps)), axis=1)
    per_item = ad.segment_sum(sq, col.joint.segment_ids[:col.R], col.B)
    return ad.mean(per_item)


def jump_loss(col, params, schedule, flat=None, heads=None):
    """Jump part of the loss; returns ``(rate_neg, rate_log, ins, clamp_count)``."""
    heads = heads or _heads(params, col, flat)
    T, B = schedule.T, col.B
    rate_x = heads.rates(schedule, heads.x_items, col.t, col.nt)
    rate_neg = ad.mul(ad.mean(rate_x), T)
    vi = col.valid_idx
    if vi.size == 0:
        zero = ad.TapeNode(0.0)
        return rate_neg, zero, zero, 0
    w = col.fwd_rate[vi]
    rate_y = heads.rates(schedule, heads.y_items, col.t[vi], col.nt[vi] - 1)
    clamps = int(np.sum((rate_y.value < RATE_FLOOR) & (w > 0)))
    # log terms of invalid items are zero, but they still count in the batch mean
    rate_log = ad.mul(ad.sum(rate_terms(rate_y, 0.0, w)), T / B)
    ins = ad.mul(ad.sum(ad.mul(insertion_log_density(heads, col), w)), -T / B)
    return rate_neg, rate_log, ins, clamps


def insertion_log_density(heads, col):
    """``log A(x_add, i | Y)`` for every valid item."""
    out = heads.out
    mean = ad.take_rows(out["ins_mean"], heads.y_items)
    logstd = ad.take_rows(out["ins_logstd"], heads.y_items)
    z = ad.mul(ad.sub(col.x_add, mean), ad.exp(ad.mul(logstd, -1.0)))
    d = col.x_add.shape[1]
    logpdf = ad.sub(ad.mul(ad.sum(ad.square(z), axis=1), -0.5),
                    ad.sum(logstd, axis=1))
    logpdf = ad.add(logpdf, -0.5 * d * np.log(2.0 * np.pi))
    if "slot_logits" in out:
        seg = out["slot_seg"]
        logp = ad.segment_log_softmax(out["slot_logits"], seg, col.joint.size)
        slot_start = np.concatenate([[0], np.cumsum(col.joint.counts + 1)])[heads.y_items]
        logpdf = ad.add(logpdf, ad.take_rows(logp, slot_start + col.index - 1))
    return logpdf


def ce_loss(col, params, flat=None, heads=None):
    heads = heads or _heads(params, col, flat)
    logits = ad.take_rows(heads.out["n0_logits"], heads.x_items)
    return ad.mul(ad.mean(ad.take_along_rows(ad.log_softmax(logits), col.n0 - 1)), -1.0)


def total_loss(col, params, schedule, gamma=1.0, flat=None):
    """Returns ``(LossBreakdown, total_node)``; the node is differentiable
    when ``flat`` is a gradient-tracking tape node."""
    col = collate(col, schedule)
    heads = _heads(params, col, flat)
    score = score_loss(col, params, heads=heads)
    rate_neg, rate_log, ins, clamps = jump_loss(col, params, schedule, heads=heads)
    ce = ad.mul(ce_loss(col, params, heads=heads), gamma)
    total = score + rate_neg + rate_log + ins + ce
    parts = [float(n.value) for n in (score, rate_neg, rate_log, ins, ce)]
    return LossBreakdown(*parts, float(total.value), clamps), total


def loss_and_grad(col, params, schedule, gamma=1.0):
    box = {}

    def build(flat):
        box["lb"], total = total_loss(col, params, schedule, gamma, flat=flat)
        return total

    g = ad.grad(params.flat, build)
    return box["lb"], g


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    ema_decay: float = 0.999
    gamma: float = 1.0
    t_min_frac: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr < 0 or not 0 <= self.ema_decay < 1:
            raise ValueError("need lr >= 0 and ema_decay in [0, 1)")
        if self.gamma < 0 or not 0 < self.t_min_frac < 1:
            raise ValueError("need gamma >= 0 and t_min_frac in (0, 1)")


class Adam:
    def __init__(self, size, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step = 0

    def update(self, params, g):
        self.step += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.step)
        vhat = self.v / (1 - self.b2 ** self.step)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Checkpoint:
    arch: ArchConfig
    schedule: ScheduleConfig
    params: np.ndarray
    ema: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int
    layout: dict = field(default=None, repr=False)

    def model_params(self, use_ema=True):
        return ModelParams(self.arch, np.array(self.ema if use_ema else self.params), self.layout)

    def to_json(self):
        doc = {
            "version": CHECKPOINT_VERSION,
            "arch": self.arch.to_dict(),
            "schedule": {**self.schedule.to_dict(), "enforce_terminal": self.schedule.enforce_terminal},
            "step": self.step,
            "params": self.params.tolist(),
            "ema": self.ema.tolist(),
            "adam_m": self.adam_m.tolist(),
            "adam_v": self.adam_v.tolist(),
        }
        return json.dumps(doc)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text):
        from .network import init_params  # layout only; weights are overwritten
        doc = json.loads(text)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        arch = ArchConfig(**doc["arch"])
        sched = dict(doc["schedule"])
        enforce = sched.pop("enforce_terminal", True)
        schedule = ScheduleConfig.from_dict(sched).replace(enforce_terminal=enforce)
        layout = init_params(arch, np.random.default_rng(0)).layout
        arrays = {k: np.array(doc[k], dtype=np.float64) for k in ("params", "ema", "adam_m", "adam_v")}
        size = max(stop for _, stop, _ in layout.values())
        if any(a.size != size for a in arrays.values()):
            raise ValueError("checkpoint parameter vectors do not match the architecture")
        return cls(arch, schedule, step=int(doc["step"]), layout=layout, **arrays)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def train(dataset, params, schedule, config, rng=None, on_step=None):
    """Run ``config.steps`` Adam updates; returns ``(Checkpoint, metrics)``.

    ``metrics`` is the list of per-step :class:`LossBreakdown` evaluated at
    the pre-update parameters.
    """
    if params.arch.N != schedule.N or params.arch.d != schedule.d:
        raise ValueError("model and schedule disagree on (N, d)")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    flat = params.flat.copy()
    ema = flat.copy()
    opt = Adam(flat.size, config.lr)
    metrics = []
    for step in range(config.steps):
        items = build_minibatch(rng, dataset, config.batch_size, schedule, config.t_min_frac)
        cur = ModelParams(params.arch, flat, params.layout)
        lb, g = loss_and_grad(items, cur, schedule, config.gamma)
        if not np.isfinite(lb.total) or not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        if config.lr > 0:
            flat = opt.update(flat, g)
        else:
            opt.step += 1
        ema = config.ema_decay * ema + (1.0 - config.ema_decay) * flat
        metrics.append(lb)
        if on_step is not None:
            on_step(step, lb)
    ckpt = Checkpoint(params.arch, schedule, flat, ema, opt.m, opt.v, opt.step, params.layout)
    return ckpt, metrics


def fit_scalar_rate(neg_weight, log_weight, steps=3000, lr=0.05, init=1.0):
    """Minimize ``neg_weight * a - log_weight * log a`` over a single rate ``a``.

    The rate is a tabular log-parameter trained with Adam and a decaying step;
    the minimizer is ``log_weight / neg_weight``.
    """
    theta = np.array([np.log(init)])
    # short second-moment memory so early large gradients do not stall the approach
    opt = Adam(1, lr, b2=0.99)
    for k in range(steps):
        g = ad.grad(theta, lambda p: ad.sum(rate_terms(ad.exp(p), neg_weight, log_weight)))
        opt.lr = lr / (1.0 + k / 200.0)
        theta = opt.update(theta, g)
    return float(np.exp(theta[0]))


def metrics_rows(metrics):
    return [lb.row(k) for k, lb in enumerate(metrics)]


def breakdown_dict(lb):
    return asdict(lb)
