"""Closed-form time-dependent quantities of the forward process.

The diffusion part is the variance-preserving SDE with a linear ``beta``
schedule. Deletions happen at a constant rate ``rate_const`` once
``t >= rate_zero_until_frac * T`` and never from a single-component state,
so the number of deleted components is a Poisson count truncated at
``n0 - 1``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammainc, gammaln

TERMINAL_MASS = 0.999

_TOML_KEYS = {
    "T": "T",
    "beta_min": "beta_min",
    "beta_max": "beta_max",
    "rate_const": "rate_const",
    "rate_zero_until_frac": "rate_zero_until_frac",
    "max_components": "N",
    "component_dim": "d",
}


def _poisson_terminal_mass(Lam, N):
    # P(n_T = 1 | n_0 = N) = P(Poisson(Lam) >= N - 1)
    return 1.0 if N <= 1 else float(gammainc(N - 1, Lam))


def min_rate_const(N, T=1.0, rate_zero_until_frac=0.0, target=TERMINAL_MASS):
    """Smallest constant deletion rate reaching ``target`` terminal mass on n=1."""
    if N <= 1:
        return 0.0
    span = T * (1.0 - rate_zero_until_frac)
    Lam = brentq(lambda L: _poisson_terminal_mass(L, N) - target, 1e-9, 1e4)
    return Lam / span


@dataclass(frozen=True)
class ScheduleConfig:
    N: int = 2
    d: int = 1
    T: float = 1.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    rate_const: float | None = None
    rate_zero_until_frac: float = 0.1
    enforce_terminal: bool = True

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1 or int(self.d) != self.d or self.d < 1:
            raise ValueError(f"N and d must be positive integers, got N={self.N}, d={self.d}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not 0 <= self.beta_min <= self.beta_max:
            raise ValueError("need 0 <= beta_min <= beta_max")
        if not 0 <= self.rate_zero_until_frac < 1:
            raise ValueError("rate_zero_until_frac must lie in [0, 1)")
        if self.rate_const is None:
            lam = min_rate_const(self.N, self.T, self.rate_zero_until_frac, target=0.9995)
            object.__setattr__(self, "rate_const", float(lam))
        if self.rate_const < 0:
            raise ValueError("rate_const must be non-negative")
        mass = self.dim_marginal(self.T, self.N)[0]
        # verification schedules (no deletions, frozen values) opt out
        if self.enforce_terminal and mass < TERMINAL_MASS:
            raise ValueError(
                f"schedule leaves P(n_T=1 | n_0=N)={mass:.6f} < {TERMINAL_MASS}; "
                f"raise rate_const above {min_rate_const(self.N, self.T, self.rate_zero_until_frac):.4g}")

    # -- serialization -------------------------------------------------
    def to_dict(self):
        own = asdict(self)
        return {key: own[attr] for key, attr in _TOML_KEYS.items()}

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(_TOML_KEYS)
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**{_TOML_KEYS[k]: v for k, v in data.items()})

    def replace(self, **changes):
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        if "N" in changes and "rate_const" not in changes:
            kw["rate_const"] = None
        kw.update(changes)
        return ScheduleConfig(**kw)

    # -- diffusion -----------------------------------------------------
    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T * (1 + 1e-12)):
            raise ValueError(f"time outside [0, {self.T}]")
        return t

    def beta(self, t):
        t = self._check_t(t)
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.T

    def integrated_beta(self, t):
        t = self._check_t(t)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.T

    def alpha(self, t):
        return np.exp(-self.integrated_beta(t))

    def g2(self, t):
        return self.beta(t)

    # -- jumps ---------------------------------------------------------
    @property
    def rate_start(self):
        return self.rate_zero_until_frac * self.T

    def forward_rate(self, t, n):
        """Deletion rate out of an ``n``-component state at time ``t``."""
        t = self._check_t(t)
        n = np.asarray(n)
        if np.any(n < 1) or np.any(n > self.N + 1):
            raise ValueError(f"component count outside [1, {self.N + 1}]")
        out = np.where((n >= 2) & (t >= self.rate_start), self.rate_const, 0.0)
        return float(out) if out.ndim == 0 else out

    def integrated_rate(self, t):
        t = self._check_t(t)
        out = self.rate_const * np.maximum(0.0, t - self.rate_start)
        return float(out) if out.ndim == 0 else out

    def deletion_index_dist(self, n):
        if n < 2:
            raise ValueError("deletion needs at least two components")
        return np.full(n, 1.0 / n)

    def dim_marginal(self, t, n0):
        """``p(n_t = n | n0)`` for ``n = 1..n0`` (index 0 holds n=1)."""
        if not 1 <= n0 <= self.N:
            raise ValueError(f"n0={n0} outside [1, {self.N}]")
        return dim_marginal_from_rate(self.integrated_rate(t), n0)

    def dim_transition_ratio(self, t, n, n0):
        """``p(n+1 | n0) / p(n | n0)``; ``inf`` when nothing can have been deleted yet."""
        return transition_ratio(self.integrated_rate(t), n, n0)

    def rate_weights(self, t, n):
        """Per-item weights ``w[b, n0-1]`` with backward rate ``= w @ p(n0 | X)``.

        Folds the forward rate ``lambda(t, n+1)`` into the ratio table. The
        product is defined as 0 wherever nothing has been deleted yet
        (``Lambda(t) = 0``), which swallows the infinite ratio of the
        zero-rate window, and for ``n = N``.
        """
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        n = np.atleast_1d(np.asarray(n, dtype=np.int64))
        t, n = np.broadcast_arrays(t, n)
        Lam = np.atleast_1d(self.integrated_rate(t)).astype(np.float64)
        w = np.zeros((t.size, self.N))
        active = (Lam > 0) & (n < self.N)
        if not active.any():
            return w
        La = Lam[active][:, None]
        na = n[active][:, None]
        n0 = np.arange(1, self.N + 1)[None, :]
        k = n0 - na
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            interior = k / La
            logpmf = np.where(n0 >= 2, (n0 - 2) * np.log(La), 0.0) - La - gammaln(np.maximum(n0 - 1, 1))
            tail = gammainc(np.maximum(n0 - 1, 1), La)
            edge = np.exp(logpmf) / tail
            r = np.where(na > 1, interior, edge)
            r = np.where(k > 0, r, 0.0)
        w[active] = self.rate_const * r
        return w


def _poisson_pmf(k, Lam):
    if Lam == 0.0:
        return 1.0 if k == 0 else 0.0
    return math.exp(k * math.log(Lam) - Lam - gammaln(k + 1))


def dim_marginal_from_rate(Lam, n0):
    p = np.zeros(n0)
    for n in range(2, n0 + 1):
        p[n - 1] = _poisson_pmf(n0 - n, Lam)
    # remainder mass: at least n0 - 1 deletions would have been attempted
    p[0] = 1.0 if n0 == 1 else float(gammainc(n0 - 1, Lam)) if Lam > 0 else 0.0
    return p


def transition_ratio(Lam, n, n0):
    if n >= n0:
        return 0.0
    if Lam == 0.0:
        return math.inf
    if n > 1:
        return (n0 - n) / Lam
    # n = 1: numerator is the Poisson term for n+1 = 2, denominator the tail mass
    num = _poisson_pmf(n0 - 2, Lam)
    den = float(gammainc(n0 - 1, Lam))
    if den == 0.0:
        return math.inf
    return num / den
