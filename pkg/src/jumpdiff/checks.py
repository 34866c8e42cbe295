"""Oracle check suites behind ``jumpdiff check``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datasets import DatasetSpec
from .metrics import total_variation, w1_to_density
from .network import ArchConfig, ModelParams, init_params
from .objective import Collated, build_minibatch, total_loss
from .oracle import (GridToy, evolve_grid, finite_diff, grid_rate_comparison, mc_dim_marginal,
                     simulate_exact_reversal)
from .schedule import ScheduleConfig

SUITES = ("dims", "grads", "reversal")


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.4g} (limit {self.threshold:.4g})"


def check_dims(seed=0, trials=100_000, n0s=(1, 3, 8), fracs=(0.25, 0.5, 1.0), tol=0.01):
    schedule = ScheduleConfig(N=max(n0s), d=1)
    rng = np.random.default_rng(seed)
    out = []
    for n0 in n0s:
        for f in fracs:
            t = f * schedule.T
            tv = total_variation(mc_dim_marginal(rng, schedule, n0, t, trials), schedule.dim_marginal(t, n0))
            out.append(CheckResult(f"dims n0={n0} t={f:g}T", tv, tol, tv <= tol))
    return out


def gradient_rel_err(analytic, numeric, floor=1e-6):
    """Per-coordinate relative error with an absolute floor on the scale."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def frozen_loss(params, items, schedule, gamma=1.0):
    """Total loss as a function of the flat parameters on a fixed minibatch."""
    col = Collated(items, schedule)

    def f(flat):
        p = ModelParams(params.arch, flat, params.layout)
        return total_loss(col, p, schedule, gamma, flat=ad.TapeNode(flat))[0].total

    def f_node(flat_node):
        return total_loss(col, params, schedule, gamma, flat=flat_node)[1]

    return f, f_node


GRAD_CASES = (
    ("set/prop3", "toy2", dict(mode="set", rate_mode="prop3")),
    ("ordered/direct", "sequences", dict(mode="ordered", rate_mode="direct")),
)


def check_grads(seed=0, n_batches=3, batch_size=8, hidden=6, h=1e-4, tol=1e-4):
    rng = np.random.default_rng(seed)
    out = []
    for label, kind, arch_kw in GRAD_CASES:
        spec = DatasetSpec(kind, size=64, seed=seed)
        data = spec.generate()
        schedule = ScheduleConfig(N=spec.N, d=spec.d)
        arch = ArchConfig(N=spec.N, d=spec.d, hidden=hidden, depth=2, **arch_kw)
        params = init_params(arch, rng)
        for b in range(n_batches):
            items = build_minibatch(rng, data, batch_size, schedule)
            f, f_node = frozen_loss(params, items, schedule)
            g = ad.grad(params.flat, f_node)
            fd = finite_diff(f, params.flat, h)
            err = float(gradient_rel_err(g, fd).max())
            out.append(CheckResult(f"grads {label} batch {b}", err, tol, err <= tol))
    return out


def check_reversal(seed=0, n_times=10, n_paths=10_000, rate_tol=0.02, tv_tol=0.02, w1_tol=0.05, toy=None):
    toy = GridToy() if toy is None else toy
    schedule = ScheduleConfig(N=2, d=1)
    grids = evolve_grid(toy, schedule)
    out = []
    start = schedule.rate_start + 0.05 * schedule.T
    times = grids.times[np.searchsorted(grids.times, np.linspace(start, schedule.T, n_times) - 1e-12)]
    for t in times:
        _, _, _, rel = grid_rate_comparison(grids, t)
        err = float(rel.max())
        out.append(CheckResult(f"reversal rate identity t={t:.3f}", err, rate_tol, err <= rate_tol))
    states = simulate_exact_reversal(np.random.default_rng(seed), grids, n_paths)
    out.extend(reversal_law_checks(states, toy, tv_tol, w1_tol))
    return out


def reversal_law_checks(states, toy, tv_tol=0.02, w1_tol=0.05):
    n = np.array([s.n for s in states])
    p1 = float(np.mean(n == 1))
    tv = abs(p1 - toy.w1)
    res = [CheckResult("reversal dimension TV", tv, tv_tol, tv <= tv_tol)]
    x1 = np.array([s.x[0] for s in states if s.n == 1])
    w = w1_to_density(x1, toy.x, toy.level1())
    res.append(CheckResult("reversal W1 level 1", w, w1_tol, w <= w1_tol))
    x2 = np.array([s.x for s in states if s.n == 2]).reshape(-1, 2)
    c, U, V = toy.level2_factors()
    for j, marg in enumerate((c @ U, c @ V)):
        w = w1_to_density(x2[:, j], toy.x, marg)
        res.append(CheckResult(f"reversal W1 level 2 coord {j + 1}", w, w1_tol, w <= w1_tol))
    return res


def run_suite(name, seed=0):
    if name == "dims":
        return check_dims(seed)
    if name == "grads":
        return check_grads(seed)
    if name == "reversal":
        return check_reversal(seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES} or 'all'")
