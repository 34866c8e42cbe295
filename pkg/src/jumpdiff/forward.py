"""Sampling the forward noising process.

Training minibatches use the analytic marginals: a truncated Poisson count
of deletions, a uniformly random surviving subset, then Gaussian noise on
the survivors. :func:`simulate_forward_paths` integrates the jump diffusion
step by step and exists to check the analytic route.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .state import DeletionMask, RaggedBatch, TransState, apply_mask
from .trace import SampleTrace


@dataclass(frozen=True, eq=False)
class NoisedSample:
    t: float
    X0: TransState
    mask: DeletionMask
    Xt: TransState
    eps: np.ndarray


def sample_count_and_mask(rng, t, X0, schedule):
    n0 = X0.n
    deletions = min(int(rng.poisson(schedule.integrated_rate(t))), n0 - 1)
    n_t = n0 - deletions
    # permute then drop the tail: uniform over subsets of size n_t
    keep = rng.permutation(n0)[:n_t]
    bits = np.zeros(n0, dtype=bool)
    bits[keep] = True
    return n_t, DeletionMask(bits)


def sample_noisy_values(rng, t, X0, mask, schedule):
    a = float(schedule.alpha(t))
    masked = apply_mask(X0.x, mask, X0.d)
    eps = rng.standard_normal(masked.size)
    x_t = np.sqrt(a) * masked + np.sqrt(1.0 - a) * eps
    return x_t, eps


def sample_noised(rng, t, X0, schedule):
    n_t, mask = sample_count_and_mask(rng, t, X0, schedule)
    x_t, eps = sample_noisy_values(rng, t, X0, mask, schedule)
    return NoisedSample(t, X0, mask, TransState(n_t, x_t, X0.d, X0.N), eps)


def score_target(t, x_t, masked_x0, schedule):
    """Denoising score target ``(sqrt(a) * x0 - x_t) / (1 - a)``."""
    a = float(schedule.alpha(t))
    if a >= 1.0:
        raise ValueError("score target is singular at t = 0")
    return (np.sqrt(a) * np.asarray(masked_x0) - np.asarray(x_t)) / (1.0 - a)


def check_thinning_step(schedule, dt):
    if not dt > 0:
        raise ValueError("dt must be positive")
    if schedule.rate_const * dt >= 0.1:
        raise ValueError(
            f"rate_const*dt = {schedule.rate_const * dt:.3g} >= 0.1; "
            f"use dt < {0.1 / max(schedule.rate_const, 1e-300):.3g}")


def simulate_forward_paths(rng, X0s, dt, schedule, snapshot_times=(), keep_traces=False):
    """Euler-Maruyama plus Bernoulli deletion thinning for many paths at once.

    Returns ``(final_states, snapshots, traces)`` where ``snapshots`` maps
    each requested time to the list of states at the first grid time at or
    past it. Traces are only built when ``keep_traces`` is set.
    """
    check_thinning_step(schedule, dt)
    batch = RaggedBatch.from_states(X0s)
    n_steps = int(round(schedule.T / dt))
    dt = schedule.T / n_steps
    snap_at = {}
    for s in snapshot_times:
        snap_at.setdefault(int(np.ceil(s / dt - 1e-9)), []).append(s)
    traces = [SampleTrace() for _ in range(batch.size)] if keep_traces else None
    snapshots = {}

    def take(k):
        states = batch.states()
        for s in snap_at.get(k, []):
            snapshots[s] = states
        if keep_traces:
            for tr, st in zip(traces, states):
                tr.record(k * dt, st)

    if keep_traces or 0 in snap_at:
        take(0)
    for k in range(n_steps):
        t = k * dt
        rate = schedule.forward_rate(t, np.minimum(batch.counts, schedule.N))
        hit = np.flatnonzero(rng.random(batch.size) < rate * dt)
        if hit.size:
            idx = np.floor(rng.random(hit.size) * batch.counts[hit]).astype(np.int64) + 1
            batch.delete_many(hit, idx)
            if keep_traces:
                for b, i in zip(hit, idx):
                    traces[b].jump(t, "delete", i)
        beta = float(schedule.beta(t))
        z = rng.standard_normal(batch.values.shape)
        batch.values = batch.values - 0.5 * beta * batch.values * dt + np.sqrt(beta * dt) * z
        if keep_traces or (k + 1) in snap_at:
            take(k + 1)
    return batch.states(), snapshots, traces


def simulate_forward_path(rng, X0, dt, schedule):
    _, _, traces = simulate_forward_paths(rng, [X0], dt, schedule, keep_traces=True)
    return traces[0]
