import numpy as np
import pytest
from scipy import stats

from jumpdiff import autodiff as ad
from jumpdiff.checks import frozen_loss, gradient_rel_err
from jumpdiff.datasets import DatasetSpec
from jumpdiff.network import ArchConfig, forward_batch, init_params
from jumpdiff.objective import (Checkpoint, Collated, TrainConfig, build_minibatch, ce_loss, fit_scalar_rate,
                                insertion_log_density, jump_loss, score_loss, total_loss, train, _heads)
from jumpdiff.oracle import finite_diff
from jumpdiff.schedule import ScheduleConfig
from jumpdiff.state import TransState, insert


def test_single_component_data_has_no_jump_terms(rng):
    s = ScheduleConfig(N=3, d=1)
    data = [TransState(1, [v], 1, 3) for v in rng.standard_normal(20)]
    items = build_minibatch(rng, data, 50, s)
    assert not any(it.valid_jump_terms for it in items)


def test_reconstruction_identity(rng):
    spec = DatasetSpec("clusters", size=200, seed=1)
    s = ScheduleConfig(N=spec.N, d=spec.d)
    for it in build_minibatch(rng, spec.generate(), 500, s):
        if it.valid_jump_terms:
            assert insert(it.Y, it.x_add, it.index) == it.Xt
        else:
            assert it.Xt.n == 1


def test_time_draws_uniform(toy2_data):
    s = ScheduleConfig(N=2, d=1)
    items = build_minibatch(np.random.default_rng(0), toy2_data, 10_000, s)
    ts = np.array([it.t for it in items])
    counts, _ = np.histogram(ts, bins=20, range=(1e-3, 1.0))
    assert stats.chisquare(counts).pvalue > 0.01
    assert ts.min() >= 1e-3


def test_build_minibatch_errors(rng, toy2_data):
    s = ScheduleConfig(N=2, d=1)
    with pytest.raises(ValueError):
        build_minibatch(rng, [], 4, s)
    with pytest.raises(ValueError):
        build_minibatch(rng, toy2_data, 0, s)


class FixedEps:
    """Stand-in heads returning a fixed noise prediction."""

    def __init__(self, col, eps_pred):
        self.col = col
        self.out = {"eps_pred": ad.TapeNode(eps_pred)}
        self.x_rows = np.arange(col.R)


def test_score_loss_exact_and_zero_predictor(toy2_data):
    s = ScheduleConfig(N=2, d=1)
    items = build_minibatch(np.random.default_rng(3), toy2_data, 4000, s)
    col = Collated(items, s)
    exact = FixedEps(col, col.eps)
    assert float(score_loss(col, None, heads=exact).value) == 0.0
    zero = FixedEps(col, np.zeros_like(col.eps))
    loss = float(score_loss(col, None, heads=zero).value)
    per_item = col.nt * s.d
    # chi-square with n_t d degrees of freedom per item
    se = np.sqrt(2 * per_item.mean() / col.B) * 1.5
    assert abs(loss - per_item.mean()) <= 3 * se


def test_constant_predictor_minimizer(toy2_data):
    s = ScheduleConfig(N=2, d=1)
    col = Collated(build_minibatch(np.random.default_rng(4), toy2_data, 64, s), s)

    def loss_at(c):
        return float(score_loss(col, None, heads=FixedEps(col, np.full_like(col.eps, c))).value)

    best = col.eps.mean()
    g = finite_diff(lambda v: loss_at(v[0]), np.array([best]), h=1e-4)
    assert abs(g[0]) < 1e-8
    assert loss_at(best) < loss_at(best + 0.01) and loss_at(best) < loss_at(best - 0.01)


def test_jump_loss_without_forward_rate(rng):
    s = ScheduleConfig(N=2, d=1)
    data = DatasetSpec("toy2", size=50, seed=0).generate()
    params = init_params(ArchConfig(N=2, d=1, hidden=8), rng)
    # keep only items inside the zero-rate window
    items = [it for it in build_minibatch(rng, data, 400, s) if it.t < s.rate_start]
    col = Collated(items, s)
    assert col.B > 10 and np.all(col.fwd_rate == 0) and col.valid.any()
    neg, log_term, ins, _ = jump_loss(col, params, s)
    assert float(log_term.value) == 0.0 and float(ins.value) == 0.0
    heads = _heads(params, col, None)
    rate = heads.rates(s, heads.x_items, col.t, col.nt).value
    assert float(neg.value) == pytest.approx(s.T * rate.mean())


def test_insertion_term_is_gaussian_density(rng):
    spec = DatasetSpec("sequences", size=64, seed=2)
    s = ScheduleConfig(N=spec.N, d=spec.d)
    params = init_params(ArchConfig(N=spec.N, d=spec.d, hidden=8, mode="ordered"), rng)
    items = build_minibatch(rng, spec.generate(), 32, s)
    col = Collated(items, s)
    heads = _heads(params, col, None)
    got = insertion_log_density(heads, col).value
    for k, b in enumerate(col.valid_idx):
        it = items[b]
        out = forward_batch(params, col.joint, col.t_joint)
        row = col.B + k
        mean, logstd = out["ins_mean"].value[row], out["ins_logstd"].value[row]
        ref = stats.norm.logpdf(it.x_add, mean, np.exp(logstd)).sum()
        starts = np.concatenate([[0], np.cumsum(col.joint.counts + 1)])
        logits = out["slot_logits"].value[starts[row]:starts[row + 1]]
        ref += logits[it.index - 1] - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
        assert got[k] == pytest.approx(ref, rel=1e-10)


def test_uniform_logits_ce_is_log_n():
    s = ScheduleConfig(N=8, d=1)
    params = init_params(ArchConfig(N=8, d=1, hidden=4), np.random.default_rng(0))
    params.flat[params.prefix_slice("n0_out")] = 0.0
    data = [TransState(1, [0.0], 1, 8)]
    col = Collated(build_minibatch(np.random.default_rng(1), data, 16, s), s)
    assert float(ce_loss(col, params).value) == pytest.approx(np.log(8), abs=1e-12)


def test_confident_logits_ce_near_zero():
    s = ScheduleConfig(N=3, d=1)
    params = init_params(ArchConfig(N=3, d=1, hidden=4), np.random.default_rng(0))
    params.flat[params.prefix_slice("n0_out.W")] = 0.0
    params.flat[params.prefix_slice("n0_out.b")] = [0.0, 0.0, 60.0]
    data = [TransState(3, [0.0, 1.0, 2.0], 1, 3)]
    col = Collated(build_minibatch(np.random.default_rng(1), data, 16, s), s)
    assert float(ce_loss(col, params).value) < 1e-20


def test_breakdown_total_recombines(rng, toy2_data):
    s = ScheduleConfig(N=2, d=1)
    params = init_params(ArchConfig(N=2, d=1, hidden=8), rng)
    lb, node = total_loss(build_minibatch(rng, toy2_data, 16, s), params, s, gamma=0.7)
    again = lb.score_term + lb.rate_neg_term + lb.rate_log_term + lb.ins_loglik_term + lb.ce_term
    assert lb.total == again == float(node.value)


@pytest.mark.parametrize("kind, mode, rate_mode", [("toy2", "set", "prop3"), ("sequences", "ordered", "direct"),
                                                   ("clusters", "set", "direct")])
def test_full_loss_gradient(kind, mode, rate_mode):
    rng = np.random.default_rng(0)
    spec = DatasetSpec(kind, size=32, seed=0)
    s = ScheduleConfig(N=spec.N, d=spec.d)
    params = init_params(ArchConfig(N=spec.N, d=spec.d, hidden=5, mode=mode, rate_mode=rate_mode), rng)
    items = build_minibatch(rng, spec.generate(), 6, s)
    f, f_node = frozen_loss(params, items, s)
    g = ad.grad(params.flat, f_node)
    num = finite_diff(f, params.flat, 1e-4)
    assert gradient_rel_err(g, num).max() <= 1e-4


def test_zero_learning_rate_keeps_params(toy2_data):
    s = ScheduleConfig(N=2, d=1)
    params = init_params(ArchConfig(N=2, d=1, hidden=8), np.random.default_rng(0))
    ckpt, metrics = train(toy2_data, params, s, TrainConfig(steps=5, lr=0.0, batch_size=8))
    np.testing.assert_array_equal(ckpt.params, params.flat)
    np.testing.assert_array_equal(ckpt.ema, params.flat)
    assert len(metrics) == 5


def test_training_deterministic_and_lowers_loss(toy2_data):
    s = ScheduleConfig(N=2, d=1)
    cfg = TrainConfig(steps=150, lr=3e-3, batch_size=32, seed=5)

    def run():
        params = init_params(ArchConfig(N=2, d=1, hidden=16), np.random.default_rng(0))
        return train(toy2_data, params, s, cfg)

    (a, ma), (b, mb) = run(), run()
    np.testing.assert_array_equal(a.params, b.params)
    assert [m.total for m in ma] == [m.total for m in mb]
    early = np.mean([m.total for m in ma[:20]])
    late = np.mean([m.total for m in ma[-20:]])
    assert late < early


def test_checkpoint_round_trip(tmp_path, toy2_data):
    s = ScheduleConfig(N=2, d=1)
    params = init_params(ArchConfig(N=2, d=1, hidden=8, rate_mode="direct"), np.random.default_rng(0))
    ckpt, _ = train(toy2_data, params, s, TrainConfig(steps=3, batch_size=4))
    path = tmp_path / "model.json"
    ckpt.save(path)
    back = Checkpoint.load(path)
    for key in ("params", "ema", "adam_m", "adam_v"):
        np.testing.assert_array_equal(getattr(back, key), getattr(ckpt, key))
    assert back.arch == ckpt.arch and back.schedule == ckpt.schedule and back.step == 3
    assert back.to_json() == ckpt.to_json()


def test_checkpoint_rejects_mismatch(toy2_data):
    s = ScheduleConfig(N=2, d=1)
    params = init_params(ArchConfig(N=2, d=1, hidden=8), np.random.default_rng(0))
    ckpt, _ = train(toy2_data, params, s, TrainConfig(steps=1, batch_size=4))
    text = ckpt.to_json().replace('"hidden": 8', '"hidden": 9')
    with pytest.raises(ValueError):
        Checkpoint.from_json(text)


@pytest.mark.parametrize("b, c", [(1.0, 1.0), (2.0, 0.5), (0.3, 4.0), (5.0, 0.05), (1.0, 1e-3), (1e-3, 1.0)])
def test_scalar_rate_calibration(b, c):
    assert fit_scalar_rate(b, c) == pytest.approx(c / b, rel=1e-3)


@pytest.mark.parametrize("kw", [dict(steps=-1), dict(batch_size=0), dict(lr=-1.0), dict(ema_decay=1.0),
                                dict(t_min_frac=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
