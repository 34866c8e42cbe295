"""Estimator front end in the scikit-learn style."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_random_state

from .network import ArchConfig, init_params
from .objective import TrainConfig, train
from .sampler import GuidanceSpec, SamplerConfig, sample
from .schedule import ScheduleConfig
from .state import TransState


def check_states(X, d=None, N=None):
    """Coerce ``X`` to a list of :class:`TransState`.

    Accepts states or array-likes of shape ``(n, d)`` (a 1-D array is one
    component per entry when ``d`` is 1). ``N`` defaults to the largest
    count seen.
    """
    if isinstance(X, TransState):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("need at least one state")
    if all(isinstance(s, TransState) for s in X):
        dims = {s.d for s in X}
        if len(dims) != 1 or (d is not None and dims != {d}):
            raise ValueError("states disagree on the component width")
        if N is not None and any(s.n > N for s in X):
            raise ValueError(f"state with more than N={N} components")
        return X if N is None else [TransState(s.n, s.x, s.d, N) for s in X]
    arrays = []
    for s in X:
        a = np.asarray(s, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(-1, 1 if d is None else d)
        if a.ndim != 2 or a.shape[0] < 1:
            raise ValueError("each state must be a non-empty (n, d) array")
        arrays.append(a)
    widths = {a.shape[1] for a in arrays}
    if len(widths) != 1 or (d is not None and widths != {d}):
        raise ValueError("states disagree on the component width")
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValueError("state values must be finite")
    N = max(a.shape[0] for a in arrays) if N is None else N
    return [TransState.from_components(a, N) for a in arrays]


class JumpDiffusionModel(BaseEstimator):
    """Generative model over variable-size collections of ``d``-vectors.

    ``fit`` trains the noise, count and insertion heads on the supplied
    states; ``sample`` runs the learned backward process.
    """

    def __init__(self, max_components=None, hidden=64, depth=2, mode="set", rate_mode="prop3",
                 T=1.0, beta_min=0.1, beta_max=20.0, rate_const=None, rate_zero_until_frac=0.1,
                 steps=2000, batch_size=64, lr=1e-3, ema_decay=0.999, gamma=1.0, t_min_frac=1e-3,
                 dt=1e-3, n_correctors=5, corrector_snr=0.1, corrector_start_frac=0.1,
                 random_state=None):
        self.max_components = max_components
        self.hidden = hidden
        self.depth = depth
        self.mode = mode
        self.rate_mode = rate_mode
        self.T = T
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.rate_const = rate_const
        self.rate_zero_until_frac = rate_zero_until_frac
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.ema_decay = ema_decay
        self.gamma = gamma
        self.t_min_frac = t_min_frac
        self.dt = dt
        self.n_correctors = n_correctors
        self.corrector_snr = corrector_snr
        self.corrector_start_frac = corrector_start_frac
        self.random_state = random_state

    def fit(self, X, y=None):
        states = check_states(X, N=self.max_components)
        N, d = states[0].N, states[0].d
        rng = check_random_state(self.random_state)
        seed = int(rng.randint(2 ** 31 - 1))
        self.schedule_ = ScheduleConfig(N=N, d=d, T=self.T, beta_min=self.beta_min, beta_max=self.beta_max,
                                        rate_const=self.rate_const,
                                        rate_zero_until_frac=self.rate_zero_until_frac)
        arch = ArchConfig(N=N, d=d, hidden=self.hidden, depth=self.depth, mode=self.mode,
                          rate_mode=self.rate_mode, T=self.T)
        gen = np.random.default_rng(seed)
        params = init_params(arch, gen)
        cfg = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                          ema_decay=self.ema_decay, gamma=self.gamma, t_min_frac=self.t_min_frac, seed=seed)
        self.checkpoint_, self.metrics_ = train(states, params, self.schedule_, cfg, gen)
        self.params_ = self.checkpoint_.model_params(use_ema=True)
        self.n_components_max_ = N
        self.component_dim_ = d
        return self

    def _sampler_config(self, seed, guided):
        kw = dict(dt=self.dt, corrector_snr=self.corrector_snr, seed=seed, rate_mode=self.rate_mode)
        if guided:
            return SamplerConfig.guided(**kw)
        return SamplerConfig(C=self.n_correctors, corrector_start_frac=self.corrector_start_frac, **kw)

    def sample(self, n_samples=1, random_state=None, observed=None, guidance_weight=1.0):
        """Draw ``n_samples`` states, returned as ``(n, d)`` arrays.

        ``observed`` optionally holds component values to condition on; they
        occupy the first generated slots.
        """
        check_is_fitted(self, "params_")
        seed = int(check_random_state(random_state).randint(2 ** 31 - 1))
        guidance = None
        if observed is not None:
            guidance = GuidanceSpec(np.asarray(observed, dtype=np.float64).reshape(-1, self.component_dim_),
                                    weight=guidance_weight)
        cfg = self._sampler_config(seed, guidance is not None)
        states, _ = sample(self.params_, cfg, n_samples, guidance=guidance, schedule=self.schedule_)
        return [s.components.copy() for s in states]

    def count_law(self, n_samples=1000, random_state=None):
        """Empirical law of the component count under the model."""
        counts = np.array([len(s) for s in self.sample(n_samples, random_state)])
        return np.bincount(counts - 1, minlength=self.n_components_max_) / n_samples
