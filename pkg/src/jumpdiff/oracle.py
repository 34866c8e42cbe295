"""Ground-truth machinery for verification.

The grid toy has ``d = 1`` and ``N = 2``. Level 1 is a density on an
``m``-point grid, tracked separately for mass that started with one
component and mass that arrived by deletion, which makes the posterior over
the starting count exact on the grid. Level 2 is kept as a low-rank sum of
products ``sum_k c_k u_k(x1) v_k(x2)``: the two coordinates diffuse
independently under the same one-dimensional operator, and deletions only
rescale the level's mass, so every factor evolves on its own and the 2-D
grid is never formed.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .sampler import Evaluation

DENSITY_FLOOR = 1e-9
MASS_TOL = 1e-4


@dataclass(frozen=True)
class GridToy:
    """Mixture law over one- and two-component states on ``[-L, L]``.

    ``q1`` is a list of ``(weight, mean, std)`` and ``q2`` a list of
    ``(weight, (mean1, std1), (mean2, std2))`` product components.
    """

    w1: float = 0.5
    q1: tuple = ((1.0, -1.0, 0.1),)
    q2: tuple = ((1.0, (1.0, 0.1), (1.0, 0.1)),)
    L: float = 7.0
    m: int = 1024
    d: int = field(default=1, init=False)
    N: int = field(default=2, init=False)

    def __post_init__(self):
        if not 0 <= self.w1 <= 1:
            raise ValueError("w1 must lie in [0, 1]")
        if self.m < 16 or not self.L > 0:
            raise ValueError("grid too small")

    @property
    def w2(self):
        return 1.0 - self.w1

    @property
    def h(self):
        return 2.0 * self.L / self.m

    @property
    def x(self):
        return -self.L + self.h * (np.arange(self.m) + 0.5)

    def _normal(self, mean, std):
        p = np.exp(-0.5 * ((self.x - mean) / std) ** 2)
        return p / (p.sum() * self.h)

    def level1(self):
        p = sum(w * self._normal(mu, s) for w, mu, s in self.q1)
        return p / (p.sum() * self.h)

    def level2_factors(self):
        c = np.array([w for w, _, _ in self.q2], dtype=np.float64)
        c = c / c.sum()
        U = np.stack([self._normal(*a) for _, a, _ in self.q2])
        V = np.stack([self._normal(*b) for _, _, b in self.q2])
        return c, U, V

    def sample(self, rng, size):
        """Exact draws from the data law (for Monte-Carlo cross-checks)."""
        n = np.where(rng.random(size) < self.w1, 1, 2)
        out = []
        w1s = np.array([w for w, _, _ in self.q1]) / sum(w for w, _, _ in self.q1)
        w2s = np.array([w for w, _, _ in self.q2]) / sum(w for w, _, _ in self.q2)
        for k in n:
            if k == 1:
                _, mu, s = self.q1[rng.choice(len(w1s), p=w1s)]
                out.append(np.array([mu + s * rng.standard_normal()]))
            else:
                _, a, b = self.q2[rng.choice(len(w2s), p=w2s)]
                out.append(np.array([a[0] + a[1] * rng.standard_normal(), b[0] + b[1] * rng.standard_normal()]))
        return out


@dataclass
class GridMarginals:
    toy: GridToy
    schedule: object
    times: np.ndarray
    p1_from1: np.ndarray  # (K, m)
    p1_from2: np.ndarray  # (K, m)
    mass2: np.ndarray  # (K,)
    coef: np.ndarray  # (r,)
    U: np.ndarray  # (K, r, m)
    V: np.ndarray  # (K, r, m)

    def index(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, self.schedule.T):
            raise ValueError(f"no snapshot at t={t}")
        return k

    def level1(self, k):
        return self.p1_from1[k] + self.p1_from2[k]

    def level2_marginal(self, k):
        """Density of the surviving coordinate after a uniform deletion, times the level-2 mass."""
        h = self.toy.h
        a = self.coef @ (self.U[k] * (self.V[k].sum(axis=1) * h)[:, None])
        b = self.coef @ (self.V[k] * (self.U[k].sum(axis=1) * h)[:, None])
        return self.mass2[k] * 0.5 * (a + b)

    def level2_density(self, k):
        return self.mass2[k] * np.einsum("r,ri,rj->ij", self.coef, self.U[k], self.V[k])

    def total_mass(self, k):
        return float(self.level1(k).sum() * self.toy.h + self.mass2[k])

    def posterior_n0(self, k):
        """``p(n0 | n = 1, x)`` on the grid, shape ``(2, m)``; NaN below the floor."""
        p1 = self.level1(k)
        with np.errstate(invalid="ignore", divide="ignore"):
            post = np.stack([self.p1_from1[k] / p1, self.p1_from2[k] / p1])
        post[:, p1 < DENSITY_FLOOR] = np.nan
        return post


def fd_operator_step(P, beta, x, h, dt):
    """One explicit conservative step of ``dp/dt = d/dx[beta/2 (x p + dp/dx)]``
    on every row of ``P`` with zero-flux ends."""
    xm = 0.5 * (x[:-1] + x[1:])
    J = 0.5 * beta * (xm * 0.5 * (P[:, :-1] + P[:, 1:]) + (P[:, 1:] - P[:, :-1]) / h)
    out = P.copy()
    out[:, :-1] += dt * J / h
    out[:, 1:] -= dt * J / h
    return out


def max_stable_dt(toy, schedule):
    gmax = max(float(schedule.beta(0.0)), float(schedule.beta(schedule.T)))
    return np.inf if gmax == 0 else 0.5 * toy.h ** 2 / gmax


def evolve_grid(toy, schedule, dt=None, snapshot_dt=None):
    """Evolve both levels from the data law to ``T``.

    Each step diffuses every row with the explicit operator, then moves
    ``lambda dt`` of the level-2 mass to level 1 (the deleted coordinate is
    marginalized out, averaging the two index choices). Snapshots are kept
    every ``snapshot_dt`` (default ``T / 1000``).
    """
    if schedule.N != 2 or schedule.d != 1:
        raise ValueError("grid oracle needs N = 2 and d = 1")
    if toy.m < 512:
        raise ValueError("grid oracle needs m >= 512")
    T = schedule.T
    snapshot_dt = T / 1000 if snapshot_dt is None else snapshot_dt
    n_snap = int(round(T / snapshot_dt))
    snapshot_dt = T / n_snap
    bound = max_stable_dt(toy, schedule)
    if dt is None:
        sub = max(1, int(np.ceil(snapshot_dt / (0.95 * bound)))) if np.isfinite(bound) else 1
    else:
        if dt > bound:
            raise ValueError(f"dt={dt:.3g} exceeds the stability bound {bound:.3g}")
        sub = max(1, int(np.ceil(snapshot_dt / dt - 1e-9)))
    h_t = snapshot_dt / sub
    x, h = toy.x, toy.h
    c, U0, V0 = toy.level2_factors()
    r = c.size
    rows = np.concatenate([toy.w1 * toy.level1()[None], np.zeros((1, toy.m)), U0, V0])
    mass2 = toy.w2
    K = n_snap + 1
    P1a, P1b = np.zeros((K, toy.m)), np.zeros((K, toy.m))
    U, V = np.zeros((K, r, toy.m)), np.zeros((K, r, toy.m))
    M2 = np.zeros(K)

    def store(k):
        P1a[k], P1b[k] = rows[0], rows[1]
        U[k], V[k] = rows[2:2 + r], rows[2 + r:]
        M2[k] = mass2

    store(0)
    for k in range(n_snap):
        for j in range(sub):
            t = k * snapshot_dt + j * h_t
            rows = fd_operator_step(rows, float(schedule.beta(t)), x, h, h_t)
            lam = schedule.forward_rate(t, 2)
            if lam > 0:
                moved = lam * h_t * mass2
                Ub, Vb = rows[2:2 + r], rows[2 + r:]
                marg = 0.5 * (c @ (Ub * (Vb.sum(axis=1) * h)[:, None]) + c @ (Vb * (Ub.sum(axis=1) * h)[:, None]))
                rows[1] += moved * marg
                mass2 -= moved
        store(k + 1)
        total = (rows[0].sum() + rows[1].sum()) * h + mass2
        if abs(total - 1.0) > MASS_TOL:
            raise FloatingPointError(f"mass leak {total - 1.0:.3g} at t={(k + 1) * snapshot_dt:.4g}")
    times = np.arange(K) * snapshot_dt
    return GridMarginals(toy, schedule, times, P1a, P1b, M2, c, U, V)


def _at_grid(grids, x):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    toy = grids.toy
    pos = (x - toy.x[0]) / toy.h
    i = np.clip(np.floor(pos).astype(np.int64), 0, toy.m - 2)
    f = np.clip(pos - i, 0.0, 1.0)
    return i, f


def _interp(table, i, f):
    return table[..., i] * (1.0 - f) + table[..., i + 1] * f


def exact_backward_rate(grids, t, x):
    """Time-reversal insertion rate out of level-1 states at ``x``.

    Forward deletion rate of two-component states times the deletion-averaged
    level-2 marginal over the level-1 density; NaN where that density is
    below the floor.
    """
    k = grids.index(t)
    lam = grids.schedule.forward_rate(t, 2)
    i, f = _at_grid(grids, x)
    num = _interp(grids.level2_marginal(k), i, f)
    den = _interp(grids.level1(k), i, f)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = lam * num / den
    return np.where(den >= DENSITY_FLOOR, out if lam > 0 else 0.0, np.nan)


def prop3_backward_rate(grids, t, x=None):
    """Rate from the count-ratio conversion with grid-exact ``p(n0 | x)``.

    With ``x`` omitted, evaluates at every grid node.
    """
    k = grids.index(t)
    post = grids.posterior_n0(k)
    if x is not None:
        i, f = _at_grid(grids, x)
        post = _interp(post, i, f)
    w = grids.schedule.rate_weights(np.array([t]), np.array([1]))[0]
    return w @ post


def grid_rate_comparison(grids, t):
    """``(x, exact, prop3, rel_err)`` on grid nodes above the density floor."""
    k = grids.index(t)
    p1 = grids.level1(k)
    keep = p1 >= DENSITY_FLOOR
    lam = grids.schedule.forward_rate(t, 2)
    exact = lam * grids.level2_marginal(k)[keep] / p1[keep]
    conv = prop3_backward_rate(grids, t)[keep]
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(exact > 0, np.abs(conv - exact) / exact, np.abs(conv - exact))
    return grids.toy.x[keep], exact, conv, rel


def exact_insertion_kernel(grids, t, x):
    """Density over ``(y, i)`` on the grid for inserting into the level-1 state ``x``.

    Returns ``(y_grid, probs)`` with ``probs[i-1, j]`` such that
    ``probs.sum() * h == 1``.
    """
    k = grids.index(t)
    i, f = _at_grid(grids, x)
    c = grids.coef
    u_x = _interp(grids.U[k], i, f)[:, 0]
    v_x = _interp(grids.V[k], i, f)[:, 0]
    # index 1: new value goes first, state (y, x); index 2: state (x, y)
    first = 0.5 * (c * v_x) @ grids.U[k]
    second = 0.5 * (c * u_x) @ grids.V[k]
    probs = np.stack([first, second])
    total = probs.sum() * grids.toy.h
    if not total > 0:
        raise FloatingPointError("insertion kernel has no mass at this point")
    return grids.toy.x, probs / total


class OracleModel:
    """Exact backward-process quantities read off the grid snapshots."""

    def __init__(self, grids):
        self.grids = grids
        self.schedule = grids.schedule
        self._cache_k = None

    def _tables(self, t):
        k = self.grids.index(t)
        if self._cache_k != k:
            g, h = self.grids, self.grids.toy.h
            p1 = g.level1(k)
            self._tab = {
                "p1": p1,
                "dp1": np.gradient(p1, h),
                "marg": g.level2_marginal(k),
                "U": g.U[k], "dU": np.gradient(g.U[k], h, axis=1),
                "V": g.V[k], "dV": np.gradient(g.V[k], h, axis=1),
            }
            self._cache_k = k
        return self._tab

    def score(self, batch, t):
        tab = self._tables(t)
        c = self.grids.coef
        out = np.zeros_like(batch.values)
        seg = batch.segment_ids
        one = np.flatnonzero(batch.counts[seg] == 1)
        if one.size:
            i, f = _at_grid(self.grids, batch.values[one, 0])
            p, dp = _interp(tab["p1"], i, f), _interp(tab["dp1"], i, f)
            out[one, 0] = np.where(p > 0, dp / np.where(p > 0, p, 1.0), 0.0)
        two = np.flatnonzero(batch.counts == 2)
        if two.size:
            r0 = batch.offsets[two]
            i1, f1 = _at_grid(self.grids, batch.values[r0, 0])
            i2, f2 = _at_grid(self.grids, batch.values[r0 + 1, 0])
            u, du = _interp(tab["U"], i1, f1), _interp(tab["dU"], i1, f1)
            v, dv = _interp(tab["V"], i2, f2), _interp(tab["dV"], i2, f2)
            den = c @ (u * v)
            ok = den > 0
            safe = np.where(ok, den, 1.0)
            out[r0, 0] = np.where(ok, (c @ (du * v)) / safe, 0.0)
            out[r0 + 1, 0] = np.where(ok, (c @ (u * dv)) / safe, 0.0)
        return out

    def evaluate(self, batch, t, with_score=True):
        tab = self._tables(t)
        lam = self.schedule.forward_rate(t, 2)
        rate = np.zeros(batch.size)
        one = np.flatnonzero(batch.counts == 1)
        if one.size and lam > 0:
            i, f = _at_grid(self.grids, batch.values[batch.offsets[one], 0])
            p = _interp(tab["p1"], i, f)
            num = _interp(tab["marg"], i, f)
            rate[one] = np.where(p > 0, lam * num / np.where(p > 0, p, 1.0), 0.0)
        return Evaluation(score=self.score(batch, t) if with_score else None, rate=rate,
                          drawer=lambda rng, b, items: self._draw(rng, b, items, t))

    def _draw(self, rng, batch, items, t):
        h = self.grids.toy.h
        ys = np.empty((items.size, 1))
        idx = np.empty(items.size, dtype=np.int64)
        for k, b in enumerate(items):
            xg, probs = exact_insertion_kernel(self.grids, t, batch.values[batch.offsets[b], 0])
            flat = probs.ravel() * h
            j = min(int(np.searchsorted(np.cumsum(flat), rng.random() * flat.sum(), side="right")), flat.size - 1)
            idx[k] = j // xg.size + 1
            ys[k, 0] = xg[j % xg.size] + h * (rng.random() - 0.5)
        return ys, idx


def simulate_exact_reversal(rng, grids, n_paths, dt=None, thinning="clip"):
    """Backward simulation driven entirely by grid quantities."""
    from .sampler import SamplerConfig, run_chains
    cfg = SamplerConfig(dt=grids.schedule.T / 1000 if dt is None else dt, C=0, thinning=thinning)
    states, _ = run_chains(rng, OracleModel(grids), cfg, n_paths)
    return states


def analytic_gaussian_score(mixture, schedule, t, x):
    """Score of the VP-noised law of a diagonal Gaussian mixture.

    ``mixture`` is a list of ``(weight, mean, std)`` with vector or scalar
    ``mean``/``std``; ``x`` has shape ``(..., dim)``.
    """
    a = float(schedule.alpha(t))
    x = np.asarray(x, dtype=np.float64)
    logs, grads = [], []
    for w, mu, sd in mixture:
        mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), x.shape[-1:])
        var = a * np.asarray(sd, dtype=np.float64) ** 2 + (1.0 - a)
        var = np.broadcast_to(var, x.shape[-1:])
        diff = x - np.sqrt(a) * mu
        logs.append(np.log(w) - 0.5 * np.sum(diff ** 2 / var + np.log(var), axis=-1))
        grads.append(-diff / var)
    logs = np.stack(logs)
    resp = np.exp(logs - logs.max(axis=0))
    resp /= resp.sum(axis=0)
    return np.einsum("k...,k...d->...d", resp, np.stack(grads))


class AnalyticScoreModel:
    """Fixed-dimension model whose score is a Gaussian-mixture closed form
    and whose insertion rate is zero."""

    def __init__(self, mixture, schedule):
        self.mixture = mixture
        self.schedule = schedule

    def score(self, batch, t):
        off = batch.offsets
        out = np.empty_like(batch.values)
        for n in np.unique(batch.counts):
            items = np.flatnonzero(batch.counts == n)
            rows = (off[items][:, None] + np.arange(n)[None, :]).ravel()
            flat = batch.values[rows].reshape(items.size, n * batch.d)
            out[rows] = analytic_gaussian_score(self.mixture, self.schedule, t, flat).reshape(-1, batch.d)
        return out

    def evaluate(self, batch, t, with_score=True):
        return Evaluation(score=self.score(batch, t) if with_score else None, rate=np.zeros(batch.size))


class ClustersExactModel:
    """Closed-form backward process for the clusters dataset.

    Components of a count-``n0`` state are iid ``N(mu_n0, std^2)`` per
    coordinate and deletions are uniform, so the noised law at ``t`` is a
    mixture over ``n0`` of iid Gaussians weighted by ``p(n0) p_t(n | n0)``.
    Score, posterior over ``n0``, insertion rate and insertion kernel are all
    exact. ``guidance`` applies reconstruction guidance with the
    reconstruction gradient taken analytically instead of through a network.
    """

    def __init__(self, spec, schedule, guidance=None):
        if spec.kind != "clusters":
            raise ValueError("needs a clusters dataset spec")
        if spec.N != schedule.N or spec.d != schedule.d:
            raise ValueError("dataset and schedule disagree on (N, d)")
        self.spec = spec
        self.schedule = schedule
        self.mu = spec.level_means()
        self.std = float(spec.resolved()["std"])
        self.log_prior = np.log(np.maximum(spec.count_law(), 1e-300))
        self.guidance = None if guidance is None or guidance.empty else guidance

    def _posterior(self, batch, t):
        a = float(self.schedule.alpha(t))
        m = np.sqrt(a) * self.mu
        v = a * self.std ** 2 + 1.0 - a
        N = self.schedule.N
        sq = (batch.values[:, :, None] - m[None, None, :]) ** 2
        ll = np.zeros((batch.size, N))
        np.add.at(ll, batch.segment_ids, -0.5 * sq.sum(axis=1) / v)
        trans = np.zeros((N, N))
        for n0 in range(1, N + 1):
            trans[:n0, n0 - 1] = self.schedule.dim_marginal(t, n0)
        with np.errstate(divide="ignore"):
            lw = self.log_prior[None, :] + np.log(trans[batch.counts - 1]) + ll
        lw -= lw.max(axis=1, keepdims=True)
        w = np.exp(lw)
        return a, m, v, w / w.sum(axis=1, keepdims=True)

    def posterior_n0(self, batch, t):
        return self._posterior(batch, t)[3]

    def score(self, batch, t):
        a, m, v, w = self._posterior(batch, t)
        seg = batch.segment_ids
        s = ((w @ m)[seg][:, None] - batch.values) / v
        if self.guidance is None:
            return s
        rows, x0a = self.guidance.rows(batch)
        if rows.size == 0:
            return s
        xhat = (batch.values[rows] + (1.0 - a) * s[rows]) / np.sqrt(a)
        resid = np.zeros(batch.size)
        np.add.at(resid, seg[rows], np.sum(x0a - xhat, axis=1))
        # d s_j / d x_k is Var_w(m) / v^2 for every pair of coordinates in an item
        var_m = w @ m ** 2 - (w @ m) ** 2
        g = -np.sqrt(a) * resid * var_m / v ** 2
        s = s - self.guidance.weight * g[seg][:, None]
        s[rows] = (np.sqrt(a) * x0a - batch.values[rows]) / (1.0 - a)
        return s

    def evaluate(self, batch, t, with_score=True):
        a, m, v, w = self._posterior(batch, t)
        q = w * self.schedule.rate_weights(np.full(batch.size, t), batch.counts)
        rate = q.sum(axis=1)

        def draw(rng, b, items):
            qi = q[items]
            u = rng.random(items.size)[:, None] * qi.sum(axis=1, keepdims=True)
            k = np.minimum((np.cumsum(qi, axis=1) < u).sum(axis=1), m.size - 1)
            y = m[k][:, None] + np.sqrt(v) * rng.standard_normal((items.size, b.d))
            return y, b.counts[items] + 1

        return Evaluation(score=self.score(batch, t) if with_score else None, rate=rate, drawer=draw)


def mc_dim_marginal(rng, schedule, n0, t, trials):
    """Histogram of ``n_t`` from exponential-clock simulation of the deletion chain."""
    if not 1 <= n0 <= schedule.N:
        raise ValueError("n0 out of range")
    n = np.full(trials, n0)
    clock = np.full(trials, schedule.rate_start, dtype=np.float64)
    lam = schedule.rate_const
    if lam > 0:
        for _ in range(n0 - 1):
            clock = clock + rng.exponential(1.0 / lam, size=trials)
            n = n - ((clock <= t) & (n > 1))
    return np.bincount(n - 1, minlength=n0)[:n0] / trials


def mc_dim_marginal_from(rng, schedule, counts, t0, t1):
    """Advance given counts from ``t0`` to ``t1`` with exponential clocks."""
    n = np.array(counts, dtype=np.int64)
    lam = schedule.rate_const
    start = max(t0, schedule.rate_start)
    if lam == 0 or t1 <= start:
        return n
    clock = np.full(n.size, start)
    for _ in range(int(n.max()) - 1):
        clock = clock + rng.exponential(1.0 / lam, size=n.size)
        n = n - ((clock <= t1) & (n > 1))
    return n


def finite_diff(f, params, h=1e-4):
    """Central-difference gradient of the scalar ``f`` at ``params``."""
    if h < 1e-7:
        warnings.warn(f"finite-difference step {h:g} risks cancellation", RuntimeWarning, stacklevel=2)
    params = np.array(params, dtype=np.float64)
    g = np.zeros_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        g[i] = (f(params + e) - f(params - e)) / (2.0 * h)
    return g


def write_rate_report(path, rows):
    """CSV of ``(t, x, exact, prop3, rel_err)`` rows."""
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "lambda_exact", "lambda_prop3", "rel_err"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
