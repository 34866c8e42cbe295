import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jumpdiff import autodiff as ad
from jumpdiff.network import (IMPOSSIBLE_LOGIT, LOGSTD_MIN, ArchConfig, forward_batch, forward_heads,
                              init_params, score_from_eps)
from jumpdiff.oracle import finite_diff
from jumpdiff.schedule import ScheduleConfig
from jumpdiff.state import RaggedBatch, TransState

finite = st.floats(-3, 3, allow_nan=False)


def fd_check(build, x):
    g = ad.grad(x, build)
    num = finite_diff(lambda v: float(build(ad.TapeNode(v)).value), x, h=1e-5)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-8)


OPS = {
    "exp": lambda p: ad.sum(ad.exp(p)),
    "log": lambda p: ad.sum(ad.log(ad.add(ad.square(p), 1.0))),
    "silu": lambda p: ad.sum(ad.silu(p)),
    "tanh": lambda p: ad.sum(ad.mul(ad.tanh(p), p)),
    "reciprocal": lambda p: ad.sum(ad.reciprocal(ad.add(ad.square(p), 0.5))),
    "log_softmax": lambda p: ad.sum(ad.mul(ad.log_softmax(ad.reshape(p, (2, 3))), np.arange(6.0).reshape(2, 3))),
    "matmul": lambda p: ad.sum(ad.square(ad.matmul(ad.reshape(p, (2, 3)), np.ones((3, 2)) * 0.3))),
    "segment": lambda p: ad.sum(ad.square(ad.segment_mean(ad.reshape(p, (6, 1)), np.array([0, 0, 1, 1, 1, 2]),
                                                       [2, 3, 1]))),
    "segment_log_softmax": lambda p: ad.sum(ad.mul(ad.segment_log_softmax(p, np.array([0, 0, 1, 1, 1, 1]), 2),
                                                   np.arange(6.0))),
    "take_rows": lambda p: ad.sum(ad.square(ad.take_rows(ad.reshape(p, (3, 2)), [0, 2, 2, 1]))),
    "concat": lambda p: ad.sum(ad.square(ad.concat([ad.reshape(p, (3, 2)), ad.reshape(p, (3, 2))], axis=1))),
}


@pytest.mark.parametrize("op", sorted(OPS))
@given(x=arrays(np.float64, 6, elements=finite))
def test_primitive_gradients(op, x):
    fd_check(OPS[op], x)


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_sum_of_squares(p):
    np.testing.assert_allclose(ad.grad(p, lambda q: ad.sum(ad.square(q))), 2 * p, rtol=0, atol=0)


def test_grad_rejects_non_scalar_and_nan():
    with pytest.raises(ValueError):
        ad.grad(np.ones(3), lambda q: ad.square(q))
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        ad.grad(np.ones(3), lambda q: ad.sum(ad.log(ad.sub(q, 1.0))))


def test_shared_subexpression_visited_once():
    # y = x^2 feeds two branches; reverse pass must not double-push y
    x = np.array([1.5])
    g = ad.grad(x, lambda q: (lambda y: ad.sum(ad.add(y, ad.mul(y, 3.0))))(ad.square(q)))
    np.testing.assert_allclose(g, 4 * 2 * x)


def test_finite_diff_quadratic_and_warning():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    p = np.array([0.3, -1.2])
    np.testing.assert_allclose(finite_diff(lambda v: v @ A @ v, p), 2 * A @ p, atol=1e-10)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        finite_diff(lambda v: float(v @ v), p, h=1e-9)
    assert any(issubclass(x.category, RuntimeWarning) for x in w)


@pytest.mark.parametrize("mode", ["set", "ordered"])
def test_shapes(mode, rng):
    arch = ArchConfig(N=5, d=3, hidden=8, mode=mode)
    params = init_params(arch, rng)
    X = TransState(4, rng.standard_normal(12), 3, 5)
    out = forward_heads(params, X, 0.4)
    assert out.eps_pred.shape == (12,)
    assert out.n0_logits.shape == (5,)
    assert out.ins_mean.shape == out.ins_logstd.shape == (3,)
    if mode == "ordered":
        assert out.ins_index_logits.shape == (5,)
    else:
        assert out.ins_index_logits is None


def test_layout_covers_vector(small_params):
    spans = sorted((a, b) for a, b, _ in small_params.layout.values())
    assert spans[0][0] == 0 and spans[-1][1] == small_params.flat.size
    assert all(b0 == a1 for (_, b0), (a1, _) in zip(spans, spans[1:]))
    np.testing.assert_array_equal(small_params.block("ins_logstd.b"), np.log(0.5))


def test_zero_depth_rejected():
    with pytest.raises(ValueError):
        ArchConfig(N=2, d=1, depth=0)


def test_init_determinism():
    arch = ArchConfig(N=3, d=2)
    a = init_params(arch, np.random.default_rng(5))
    b = init_params(arch, np.random.default_rng(5))
    np.testing.assert_array_equal(a.flat, b.flat)


def test_init_output_scale():
    arch = ArchConfig(N=4, d=2, hidden=64)
    params = init_params(arch, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    batch = RaggedBatch(rng.standard_normal((3000, 2)), np.full(1000, 3), 4)
    out = forward_batch(params, batch, rng.uniform(0, 1, 1000))
    for key in ("eps_pred", "ins_mean"):
        assert 0.1 <= out[key].value.std() <= 10


def test_count_logits_mask_impossible_counts(small_params, rng):
    X = TransState(3, rng.standard_normal(6), 2, 4)
    logits = forward_heads(small_params, X, 0.5).n0_logits
    assert np.all(logits[:2] < IMPOSSIBLE_LOGIT / 2)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert p[:2].sum() == 0.0 and p.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("d, N", [(1, 2), (1, 4), (2, 5), (3, 6)])
def test_set_mode_symmetry_is_exact(d, N):
    rng = np.random.default_rng(d * 10 + N)
    params = init_params(ArchConfig(N=N, d=d, hidden=16), rng)
    for _ in range(25):
        counts = rng.integers(1, N + 1, size=6)
        batch = RaggedBatch(rng.standard_normal((counts.sum(), d)), counts, N)
        t = rng.uniform(0, 1, size=6)
        perm = np.concatenate([off + rng.permutation(c) for off, c in zip(batch.offsets[:-1], counts)])
        shuffled = RaggedBatch(batch.values[perm], counts, N)
        a, b = forward_batch(params, batch, t), forward_batch(params, shuffled, t)
        np.testing.assert_array_equal(a["eps_pred"].value[perm], b["eps_pred"].value)
        for key in ("n0_logits", "ins_mean", "ins_logstd"):
            np.testing.assert_array_equal(a[key].value, b[key].value)


def test_forward_is_pure(small_params, rng):
    X = TransState(2, rng.standard_normal(4), 2, 4)
    a, b = forward_heads(small_params, X, 0.3), forward_heads(small_params, X, 0.3)
    np.testing.assert_array_equal(a.eps_pred, b.eps_pred)
    np.testing.assert_array_equal(a.n0_logits, b.n0_logits)


def test_batched_matches_single(small_params, rng):
    states = [TransState(n, rng.standard_normal(2 * n), 2, 4) for n in (1, 4, 2)]
    out = forward_batch(small_params, RaggedBatch.from_states(states), np.array([0.2, 0.5, 0.9]))
    rows = np.concatenate([[0], np.cumsum([s.n for s in states])])
    for k, (s, t) in enumerate(zip(states, (0.2, 0.5, 0.9))):
        single = forward_heads(small_params, s, t)
        np.testing.assert_allclose(out["eps_pred"].value[rows[k]:rows[k + 1]].ravel(), single.eps_pred,
                                   rtol=1e-12, atol=1e-14)


def test_score_from_eps_finite(small_params, rng):
    sched = ScheduleConfig(N=4, d=2)
    X = TransState(3, rng.standard_normal(6), 2, 4)
    for t in (1e-3, 0.3, 1.0):
        s = score_from_eps(forward_heads(small_params, X, t).eps_pred, float(sched.alpha(t)))
        assert np.all(np.isfinite(s))


def test_logstd_clamped(rng):
    params = init_params(ArchConfig(N=2, d=1, hidden=4), rng)
    params.flat[params.prefix_slice("ins_logstd.b")] = -50.0
    out = forward_heads(params, TransState(1, [0.0], 1, 2), 0.5)
    assert np.all(out.ins_logstd >= LOGSTD_MIN)


def test_unused_head_gets_zero_gradient(small_params, rng):
    batch = RaggedBatch(rng.standard_normal((5, 2)), [2, 3], 4)

    def eps_only(flat):
        return ad.sum(ad.square(forward_batch(small_params, batch, np.array([0.3, 0.6]), flat=flat)["eps_pred"]))

    g = ad.grad(small_params.flat, eps_only)
    for head in ("n0_out", "ins_mean", "ins_logstd", "glob"):
        assert np.all(g[small_params.prefix_slice(head)] == 0.0)
    assert np.any(g[small_params.prefix_slice("eps_out")] != 0.0)


def test_state_shape_checked(small_params):
    with pytest.raises(ValueError):
        forward_heads(small_params, TransState(1, [0.0], 1, 4), 0.5)
