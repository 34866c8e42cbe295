"""Synthetic trans-dimensional datasets and their line-delimited JSON files.

A file starts with a header object ``{d, N, kind, seed, version}`` followed
by one ``{n, x}`` record per state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .state import TransState

FORMAT_VERSION = 1
KINDS = ("toy2", "clusters", "sequences")

DEFAULTS = {
    "toy2": {"N": 2, "d": 1, "w1": 0.5, "mean1": -1.0, "std1": 0.1, "mean2": 1.0, "std2": 0.1},
    "clusters": {"N": 4, "d": 1, "count_probs": None, "first_mean": -3.0, "mean_step": 2.0, "std": 0.8},
    "sequences": {"N": 5, "d": 1, "start_mean": -1.0, "start_std": 0.1, "span": 2.0, "jitter": 0.05},
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "toy2"
    size: int = 1000
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.size < 0:
            raise ValueError("size must be non-negative")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        p = self.resolved()
        if p["N"] < 1 or p["d"] < 1:
            raise ValueError("N and d must be positive")
        if self.kind == "toy2":
            if p["N"] != 2 or not 0 <= p["w1"] <= 1:
                raise ValueError("toy2 needs N = 2 and w1 in [0, 1]")
        if self.kind == "clusters":
            probs = self.count_law()
            if probs.size != p["N"] or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
                raise ValueError("count_probs must be a distribution over 1..N")

    def resolved(self):
        return {**DEFAULTS[self.kind], **self.params}

    @property
    def N(self):
        return int(self.resolved()["N"])

    @property
    def d(self):
        return int(self.resolved()["d"])

    @property
    def ordered(self):
        return self.kind == "sequences"

    def count_law(self):
        """Probability of each count ``1..N`` in the generating law."""
        p = self.resolved()
        N = p["N"]
        if self.kind == "toy2":
            return np.array([p["w1"], 1.0 - p["w1"]])
        if self.kind == "clusters":
            cp = p["count_probs"]
            return np.full(N, 1.0 / N) if cp is None else np.asarray(cp, dtype=np.float64)
        return np.full(N, 1.0 / N)

    def level_means(self):
        """Per-count component mean for the clusters kind."""
        p = self.resolved()
        return p["first_mean"] + p["mean_step"] * np.arange(p["N"])

    def conditional_count_law(self, value):
        """``p(n | one component equals value)`` for the clusters kind.

        Components are exchangeable within a count, so the law is the prior
        count weight times that count's component density at ``value``.
        """
        if self.kind != "clusters":
            raise ValueError("conditional law is only defined for clusters")
        p = self.resolved()
        v = np.atleast_1d(np.asarray(value, dtype=np.float64))
        mu = self.level_means()
        logq = -0.5 * np.sum((v[None, :] - mu[:, None]) ** 2, axis=1) / p["std"] ** 2
        w = self.count_law() * np.exp(logq - logq.max())
        return w / w.sum()

    def generate(self):
        rng = np.random.default_rng(self.seed)
        p = self.resolved()
        N, d = p["N"], p["d"]
        counts = rng.choice(np.arange(1, N + 1), size=self.size, p=self.count_law())
        out = []
        for n in counts:
            z = rng.standard_normal((n, d))
            if self.kind == "toy2":
                x = (p["mean1"] + p["std1"] * z) if n == 1 else (p["mean2"] + p["std2"] * z)
            elif self.kind == "clusters":
                x = self.level_means()[n - 1] + p["std"] * z
            else:
                start = p["start_mean"] + p["start_std"] * rng.standard_normal(d)
                ramp = p["span"] * np.arange(n)[:, None] / max(N - 1, 1)
                x = start + ramp + p["jitter"] * z
            out.append(TransState(int(n), x.ravel(), d, N))
        return out

    def header(self):
        return {"d": self.d, "N": self.N, "kind": self.kind, "seed": self.seed, "version": FORMAT_VERSION}


@dataclass
class Dataset:
    states: list
    d: int
    N: int
    kind: str = "unknown"
    seed: int | None = None

    def __len__(self):
        return len(self.states)

    def __getitem__(self, k):
        return self.states[k]

    def __iter__(self):
        return iter(self.states)

    def count_histogram(self):
        h = np.zeros(self.N)
        for s in self.states:
            h[s.n - 1] += 1
        return h

    def level_values(self, n):
        """``(count, n*d)`` array of the values of every state with ``n`` components."""
        rows = [s.x for s in self.states if s.n == n]
        return np.array(rows).reshape(len(rows), n * self.d)


def write_states(path, states, d, N, kind, seed):
    header = {"d": int(d), "N": int(N), "kind": kind, "seed": seed, "version": FORMAT_VERSION}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in states:
            fh.write(json.dumps({"n": s.n, "x": [float(v) for v in s.x]}) + "\n")


def write_dataset(path, spec):
    write_states(path, spec.generate(), spec.d, spec.N, spec.kind, spec.seed)


def read_states(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.strip():
            raise ValueError(f"{path}: missing header line")
        head = json.loads(first)
        missing = {"d", "N", "kind", "version"} - set(head)
        if missing:
            raise ValueError(f"{path}: header lacks {sorted(missing)}")
        if head["version"] != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {head['version']}")
        d, N = int(head["d"]), int(head["N"])
        states = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                states.append(TransState(int(rec["n"]), np.array(rec["x"], dtype=np.float64), d, N))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from None
    return Dataset(states, d, N, head["kind"], head.get("seed"))
