"""Distances between dimension laws and per-level value statistics."""
from __future__ import annotations

import numpy as np
from scipy.stats import wasserstein_distance


def count_law(states, N):
    h = np.zeros(N)
    for s in states:
        h[s.n - 1] += 1
    total = h.sum()
    return h / total if total else h


def hellinger(p, q):
    """``(1/sqrt 2) * || sqrt p - sqrt q ||_2``."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions have different support sizes")
    return float(np.sqrt(0.5 * np.sum((np.sqrt(p) - np.sqrt(q)) ** 2)))


def total_variation(p, q):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions have different support sizes")
    return float(0.5 * np.abs(p - q).sum())


def level_values(states, n):
    rows = [s.x for s in states if s.n == n]
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows)


def moment_errors(samples, data, N):
    """Per-level absolute errors of coordinate means and standard deviations."""
    out = {}
    for n in range(1, N + 1):
        a, b = level_values(samples, n), level_values(data, n)
        if len(a) == 0 or len(b) == 0:
            continue
        out[str(n)] = {
            "mean_abs_err": np.abs(a.mean(axis=0) - b.mean(axis=0)).tolist(),
            "std_abs_err": np.abs(a.std(axis=0) - b.std(axis=0)).tolist(),
            "count_samples": int(len(a)),
            "count_data": int(len(b)),
        }
    return out


def coordinate_w1(samples, reference):
    """1-Wasserstein distance of each coordinate between two ``(rows, k)`` arrays."""
    samples, reference = np.atleast_2d(samples), np.atleast_2d(reference)
    return [float(wasserstein_distance(samples[:, j], reference[:, j])) for j in range(samples.shape[1])]


def w1_to_density(samples, grid, density):
    """1-Wasserstein distance between samples and a density tabulated on a grid."""
    return float(wasserstein_distance(np.ravel(samples), grid, u_weights=None, v_weights=density))


def empirical_conditional_law(data, observed, N, bandwidth=0.1):
    """Count law of ``data`` given its first components near ``observed``.

    Each record with at least ``k = len(observed)`` components is weighted by
    a Gaussian kernel on the distance between its first ``k`` components and
    the observations. For exchangeable records this estimates the count law
    conditional on ``k`` of the components taking the observed values.
    """
    obs = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    k, d = obs.shape
    w = np.zeros(N)
    for s in data:
        if s.n < k:
            continue
        diff = s.components[:k] - obs
        w[s.n - 1] += np.exp(-0.5 * np.sum(diff * diff) / bandwidth ** 2)
    if w.sum() == 0:
        raise ValueError("no data records near the observations; widen the bandwidth")
    return w / w.sum()


def evaluate(samples, data, N, observed=None, bandwidth=0.1):
    p = count_law(samples, N)
    q = count_law(data, N)
    report = {
        "n_samples": len(samples),
        "n_data": len(data),
        "dimension_histogram": p.tolist(),
        "data_dimension_histogram": q.tolist(),
        "hellinger": hellinger(p, q),
        "tv": total_variation(p, q),
        "moments": moment_errors(samples, data, N),
    }
    if observed is not None:
        cond = empirical_conditional_law(data, observed, N, bandwidth)
        report["conditional_dimension_histogram"] = cond.tolist()
        report["hellinger_conditional"] = hellinger(p, cond)
        report["hellinger_unconditional"] = report["hellinger"]
    return report
