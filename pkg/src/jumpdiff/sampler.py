"""The learned backward process: rate conversion, predictor and corrector
steps, reconstruction guidance, and the batched chain driver.

Anything with ``evaluate(batch, t) -> Evaluation`` and ``score(batch, t)``
can drive the integrator; :class:`NetworkModel` wraps trained weights and the
oracle module supplies exact grid-based stand-ins.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .network import ModelParams, forward_batch
from .state import InsertionEvent, RaggedBatch, TransState
from .trace import SampleTrace

THINNING_MODES = ("raise", "clip")
STEP_NORMS = ("pooled", "per_state")
# the guided preset runs the dimension corrector down to the edge of the
# zero-rate window, where a learned rate can exceed 1 / dt
GUIDED_DEFAULTS = dict(C=3, corrector_start_frac=1.0, use_dim_corrector=True, thinning="clip")


class ThinningError(ValueError):
    pass


def rate_node(schedule, t, n, n0_logits, rate_log=None):
    """Backward insertion rate for each item as a tape node.

    With ``rate_log`` absent the rate is the forward rate of the state above
    times the model's posterior-weighted count ratio; otherwise it is
    ``exp(rate_log)`` masked to where an insertion is possible at all.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    n = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if rate_log is None:
        w = schedule.rate_weights(t, n)
        return ad.sum(ad.mul(ad.softmax(n0_logits), w), axis=1)
    t, n = np.broadcast_arrays(t, n)
    active = (np.atleast_1d(schedule.integrated_rate(t)) > 0) & (n < schedule.N)
    return ad.mul(ad.exp(rate_log), active.astype(np.float64))


@dataclass(frozen=True)
class SamplerConfig:
    dt: float = 1e-3
    dt_coarse: float | None = None
    coarse_above_frac: float = 0.5
    C: int = 5
    corrector_snr: float = 0.1
    corrector_start_frac: float = 0.1
    use_dim_corrector: bool = False
    rate_mode: str = "prop3"
    seed: int = 0
    thinning: str = "raise"
    literal_drift: bool = False
    block_size: int = 256
    step_norm: str = "pooled"

    def __post_init__(self):
        if not self.dt > 0 or (self.dt_coarse is not None and not self.dt_coarse > 0):
            raise ValueError("step sizes must be positive")
        if self.C < 0:
            raise ValueError("C must be non-negative")
        if not self.corrector_snr > 0:
            raise ValueError("corrector_snr must be positive")
        if not 0 <= self.corrector_start_frac <= 1 or not 0 < self.coarse_above_frac <= 1:
            raise ValueError("fractions must lie in [0, 1]")
        if self.rate_mode not in ("prop3", "direct"):
            raise ValueError("rate_mode must be 'prop3' or 'direct'")
        if self.thinning not in THINNING_MODES:
            raise ValueError(f"thinning must be one of {THINNING_MODES}")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")
        if self.step_norm not in STEP_NORMS:
            raise ValueError(f"step_norm must be one of {STEP_NORMS}")

    @classmethod
    def guided(cls, **kw):
        return cls(**{**GUIDED_DEFAULTS, **kw})


@dataclass
class GuidanceSpec:
    """Observed component values and where they sit.

    ``slots`` is ``None`` in set mode (observations occupy the first
    components) or a 1-based position per observation in ordered mode;
    negative positions count from the end.
    """

    observed: np.ndarray
    slots: np.ndarray | None = None
    weight: float = 1.0

    def __post_init__(self):
        self.observed = np.atleast_2d(np.asarray(self.observed, dtype=np.float64))
        if self.slots is not None:
            self.slots = np.asarray(self.slots, dtype=np.int64).reshape(-1)
            if self.slots.size != self.observed.shape[0] or np.any(self.slots == 0):
                raise ValueError("need one nonzero slot per observation")

    @property
    def empty(self):
        return self.observed.shape[0] == 0

    def rows(self, batch):
        """Global rows of ``batch`` holding observed components and their targets."""
        counts, off = batch.counts, batch.offsets
        rows, which = [], []
        for k in range(self.observed.shape[0]):
            if self.slots is None:
                pos = np.full(batch.size, k + 1)
            else:
                s = self.slots[k]
                pos = np.full(batch.size, s) if s > 0 else counts + 1 + s
            ok = (pos >= 1) & (pos <= counts)
            rows.append(off[:-1][ok] + pos[ok] - 1)
            which.append(np.full(int(ok.sum()), k))
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        which = np.concatenate(which) if which else np.zeros(0, dtype=np.int64)
        return rows, self.observed[which]


@dataclass
class Evaluation:
    score: np.ndarray
    rate: np.ndarray
    ins_mean: np.ndarray | None = None
    ins_std: np.ndarray | None = None
    slot_logits: np.ndarray | None = None
    slot_seg: np.ndarray | None = None
    drawer: object = field(default=None, repr=False)

    def draw_insertion(self, rng, batch, items):
        """Values and 1-based indices for inserting into ``items``."""
        if self.drawer is not None:
            return self.drawer(rng, batch, items)
        y = self.ins_mean[items] + self.ins_std[items] * rng.standard_normal(self.ins_mean[items].shape)
        if self.slot_logits is None:
            return y, batch.counts[items] + 1
        starts = np.concatenate([[0], np.cumsum(batch.counts + 1)])
        idx = np.empty(items.size, dtype=np.int64)
        u = rng.random(items.size)
        for k, b in enumerate(items):
            p = _softmax(self.slot_logits[starts[b]:starts[b + 1]])
            idx[k] = min(int(np.searchsorted(np.cumsum(p), u[k], side="right")), p.size - 1) + 1
        return y, idx


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


class NetworkModel:
    """Backward-process quantities read off trained heads."""

    def __init__(self, params: ModelParams, schedule, rate_mode="prop3", guidance=None):
        if rate_mode == "direct" and params.arch.rate_mode != "direct":
            raise ValueError("direct rate mode needs a model trained with a rate head")
        if params.arch.N != schedule.N or params.arch.d != schedule.d:
            raise ValueError("model and schedule disagree on (N, d)")
        self.params = params
        self.schedule = schedule
        self.rate_mode = rate_mode
        self.guidance = None if guidance is None or guidance.empty else guidance

    def _forward(self, batch, t, x=None):
        return forward_batch(self.params, batch, np.full(batch.size, t), x=x)

    def score(self, batch, t):
        if self.guidance is not None:
            return guided_score_batch(self.params, self.schedule, batch, t, self.guidance)[0]
        out = self._forward(batch, t)
        return -out["eps_pred"].value / np.sqrt(1.0 - float(self.schedule.alpha(t)))

    def evaluate(self, batch, t, with_score=True):
        if self.guidance is not None and with_score:
            score, out = guided_score_batch(self.params, self.schedule, batch, t, self.guidance)
        else:
            out = self._forward(batch, t)
            score = None
            if with_score:
                score = -out["eps_pred"].value / np.sqrt(1.0 - float(self.schedule.alpha(t)))
        rl = out.get("rate_log") if self.rate_mode == "direct" else None
        rate = rate_node(self.schedule, np.full(batch.size, t), batch.counts, out["n0_logits"], rl).value
        return Evaluation(
            score=score, rate=rate,
            ins_mean=out["ins_mean"].value, ins_std=np.exp(out["ins_logstd"].value),
            slot_logits=out["slot_logits"].value if "slot_logits" in out else None,
            slot_seg=out.get("slot_seg"))


def as_model(model, schedule=None, rate_mode="prop3", guidance=None):
    if isinstance(model, ModelParams):
        if schedule is None:
            raise ValueError("a schedule is needed to sample from raw parameters")
        return NetworkModel(model, schedule, rate_mode, guidance)
    if guidance is not None and not guidance.empty:
        raise ValueError("guidance needs a network-backed model")
    return model


def guided_score_batch(params, schedule, batch, t, guidance):
    """Reconstruction-guided score for every row of ``batch``.

    Observed rows get the analytic forward score toward their targets; the
    rest get the network score plus ``weight`` times the gradient of the
    Gaussian reconstruction log-likelihood, differentiated through the
    network. Returns ``(score, head_outputs)``.
    """
    a = float(schedule.alpha(t))
    if a >= 1.0:
        raise ValueError("guidance is singular at alpha = 1")
    x = ad.TapeNode(batch.values.copy(), requires_grad=True)
    out = forward_batch(params, batch, np.full(batch.size, t), x=x)
    s_node = ad.mul(out["eps_pred"], -1.0 / np.sqrt(1.0 - a))
    score = s_node.value.copy()
    rows, x0a = guidance.rows(batch)
    if rows.size == 0:
        return score, out
    # point estimate of the clean observed block from the noisy state
    xhat = ad.mul(ad.add(ad.take_rows(x, rows), ad.mul(ad.take_rows(s_node, rows), 1.0 - a)), 1.0 / np.sqrt(a))
    recon = ad.mul(ad.sum(ad.square(ad.sub(x0a, xhat))), a / (2.0 * (1.0 - a)))
    recon.backward()
    g = np.zeros_like(score) if x.grad is None else x.grad
    score = score - guidance.weight * g
    score[rows] = (np.sqrt(a) * x0a - batch.values[rows]) / (1.0 - a)
    return score, out


def guided_score(params, schedule, Xt, t, guidance):
    """Guided score of a single state, flattened like ``Xt.x``."""
    if guidance is None or guidance.empty:
        out = forward_batch(params, RaggedBatch.from_states([Xt]), np.array([t]))
        return -out["eps_pred"].value.ravel() / np.sqrt(1.0 - float(schedule.alpha(t)))
    return guided_score_batch(params, schedule, RaggedBatch.from_states([Xt]), t, guidance)[0].ravel()


def backward_rate(params, schedule, Xt, t, rate_mode="prop3"):
    model = NetworkModel(params, schedule, rate_mode)
    return float(model.evaluate(RaggedBatch.from_states([Xt]), t).rate[0])


def sample_insertion(rng, params, schedule, Xt, t):
    if Xt.n >= Xt.N:
        from .state import CapacityError
        raise CapacityError("state already holds N components")
    batch = RaggedBatch.from_states([Xt])
    ev = NetworkModel(params, schedule).evaluate(batch, t)
    y, idx = ev.draw_insertion(rng, batch, np.array([0]))
    return InsertionEvent(y[0], int(idx[0]))


def _jump_probs(rate, dt, thinning):
    p = rate * dt
    if thinning == "raise" and np.any(p >= 1.0):
        worst = float(p.max())
        raise ThinningError(f"insertion rate * dt = {worst:.3g} >= 1; use dt < {dt / worst:.3g}, "
                            "or thinning='clip' if this happens just above the zero-rate window")
    return np.minimum(p, 1.0)


def _insert(rng, ev, batch, p, trace_cb=None, t=None):
    jumped = np.flatnonzero((rng.random(batch.size) < p) & (batch.counts < batch.N))
    if jumped.size:
        y, idx = ev.draw_insertion(rng, batch, jumped)
        batch.insert_many(jumped, y, idx)
        if trace_cb is not None:
            for b, i in zip(jumped, idx):
                trace_cb(b, t, "insert", i)
    return jumped


def _drift_update(schedule, batch, score, t, dt, z, literal):
    beta = float(schedule.beta(t))
    x = batch.values
    pull = score if literal else beta * score
    batch.values = x + (0.5 * beta * x + pull) * dt + np.sqrt(beta * dt) * z


def predictor_step(rng, model, batch, t, dt, thinning="raise", literal_drift=False, trace_cb=None):
    """One jump check, possible insertion and Euler step from ``t`` to ``t - dt``.

    ``batch`` is mutated in place. A :class:`TransState` is also accepted, in
    which case the new state is returned together with the new time.
    """
    if isinstance(batch, TransState):
        rb = RaggedBatch.from_states([batch])
        predictor_step(rng, model, rb, t, dt, thinning, literal_drift)
        return rb.state(0), t - dt
    schedule = model.schedule
    ev = model.evaluate(batch, t)
    p = _jump_probs(ev.rate, dt, thinning)
    old_counts = batch.counts.copy()
    jumped = _insert(rng, ev, batch, p, trace_cb, t)
    score = ev.score
    if jumped.size:
        # the drift acts on the post-insertion state
        moved = np.zeros(batch.size, dtype=bool)
        moved[jumped] = True
        score = np.empty_like(batch.values)
        keep_new = ~moved[batch.segment_ids]
        keep_old = ~moved[np.repeat(np.arange(batch.size), old_counts)]
        score[keep_new] = ev.score[keep_old]
        off = batch.offsets
        sub = RaggedBatch(np.concatenate([batch.values[off[b]:off[b + 1]] for b in jumped]),
                          batch.counts[jumped], batch.N)
        score[~keep_new] = model.score(sub, t)
    z = rng.standard_normal(batch.values.shape)
    _drift_update(schedule, batch, score, t, dt, z, literal_drift)
    return batch, t - dt


def langevin_step_size(score, noise, snr, seg, n_items, cap=None, pooled=False):
    """Langevin step ``2 (snr * |noise| / |score|)^2``, with norms taken per item.

    ``pooled`` replaces both norms by their means over the items, giving one
    step for the whole batch. The step is ``0`` where the score vanishes.
    """
    s2 = np.zeros(n_items)
    e2 = np.zeros(n_items)
    np.add.at(s2, seg, np.sum(score * score, axis=1))
    np.add.at(e2, seg, np.sum(noise * noise, axis=1))
    if pooled:
        s2 = np.full(n_items, np.mean(np.sqrt(s2)) ** 2)
        e2 = np.full(n_items, np.mean(np.sqrt(e2)) ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        zeta = np.where(s2 > 0, 2.0 * snr * snr * e2 / s2, 0.0)
    if cap is not None:
        zeta = np.minimum(zeta, cap)
    return zeta


def corrector_step(rng, model, batch, t, config, dt=None, trace_cb=None):
    """Langevin move at fixed ``t`` plus, optionally, an insert-then-delete
    dimension move. Mutates ``batch`` (or returns a new state when given a
    :class:`TransState`)."""
    if isinstance(batch, TransState):
        rb = RaggedBatch.from_states([batch])
        corrector_step(rng, model, rb, t, config, dt)
        return rb.state(0)
    schedule = model.schedule
    dt = config.dt if dt is None else dt
    a = float(schedule.alpha(t))
    score = model.score(batch, t)
    eps = rng.standard_normal(batch.values.shape)
    zeta = langevin_step_size(score, eps, config.corrector_snr, batch.segment_ids, batch.size,
                              cap=0.5 * (1.0 - a), pooled=config.step_norm == "pooled")
    zr = zeta[batch.segment_ids][:, None]
    batch.values = batch.values + zr * score + np.sqrt(2.0 * zr) * eps
    if config.use_dim_corrector:
        ev = model.evaluate(batch, t, with_score=False)
        _insert(rng, ev, batch, _jump_probs(ev.rate, dt, config.thinning), trace_cb, t)
        lam = schedule.forward_rate(t, batch.counts)
        hit = np.flatnonzero(rng.random(batch.size) < np.asarray(lam) * dt)
        if hit.size:
            idx = np.floor(rng.random(hit.size) * batch.counts[hit]).astype(np.int64) + 1
            batch.delete_many(hit, idx)
            if trace_cb is not None:
                for b, i in zip(hit, idx):
                    trace_cb(b, t, "delete", i)
    return batch


def time_grid(T, dt, dt_coarse=None, coarse_above_frac=0.5, anchors=()):
    """Descending time knots from ``T`` to ``0``.

    ``anchors`` (for example the end of the zero-rate window) are always
    knots, so no step straddles them.
    """
    split = coarse_above_frac * T if dt_coarse is not None else T
    knots = sorted({0.0, T, split, *[a for a in anchors if 0 < a < T]})
    pts = [0.0]
    for lo, hi in zip(knots[:-1], knots[1:]):
        h = dt_coarse if (dt_coarse is not None and lo >= split) else dt
        k = max(1, int(np.ceil((hi - lo) / h - 1e-9)))
        pts.extend(lo + (hi - lo) * np.arange(1, k + 1) / k)
    pts[-1] = T
    return np.array(pts[::-1])


def reference_batch(rng, n_chains, d, N):
    return RaggedBatch(rng.standard_normal((n_chains, d)), np.ones(n_chains, dtype=np.int64), N)


def run_chains(rng, model, config, n_chains, keep_traces=False):
    """Integrate ``n_chains`` chains from the reference law at ``T`` to ``0``."""
    schedule = model.schedule
    batch = reference_batch(rng, n_chains, schedule.d, schedule.N)
    grid = time_grid(schedule.T, config.dt, config.dt_coarse, config.coarse_above_frac,
                     anchors=(schedule.rate_start,))
    traces = [SampleTrace() for _ in range(n_chains)] if keep_traces else None
    cb = (lambda b, t, kind, i: traces[b].jump(t, kind, i)) if keep_traces else None

    def snap(t):
        if keep_traces:
            for tr, st in zip(traces, batch.states()):
                tr.record(t, st)

    snap(grid[0])
    c_until = config.corrector_start_frac * schedule.T
    for t, t_next in zip(grid[:-1], grid[1:]):
        h = t - t_next
        predictor_step(rng, model, batch, t, h, config.thinning, config.literal_drift, cb)
        if config.C and t_next > 0 and t_next < c_until:
            for _ in range(config.C):
                corrector_step(rng, model, batch, t_next, config, dt=h, trace_cb=cb)
        snap(t_next)
    return batch.states(), traces


def worker_count():
    try:
        n = int(os.environ.get("JUMPDIFF_THREADS", "1"))
    except ValueError:
        raise ValueError("JUMPDIFF_THREADS must be an integer") from None
    return max(1, n)


def sample(model, config, n_samples, guidance=None, schedule=None, keep_traces=False):
    """Draw ``n_samples`` states; returns ``(states, traces)``.

    Chains are split into fixed-size blocks with their own spawned RNG
    streams, so the output does not depend on the worker count.
    """
    model = as_model(model, schedule, config.rate_mode, guidance)
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    sizes = [min(config.block_size, n_samples - s) for s in range(0, n_samples, config.block_size)]
    seeds = np.random.SeedSequence(config.seed).spawn(len(sizes))

    def block(k):
        return run_chains(np.random.default_rng(seeds[k]), model, config, sizes[k], keep_traces)

    workers = min(worker_count(), max(1, len(sizes)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(block, range(len(sizes))))
    else:
        results = [block(k) for k in range(len(sizes))]
    states = [s for r in results for s in r[0]]
    traces = [tr for r in results for tr in (r[1] or [])] if keep_traces else None
    return states, traces


def with_config(config, **changes):
    return replace(config, **changes)
