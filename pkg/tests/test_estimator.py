import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from jumpdiff import JumpDiffusionModel, TransState, check_states

FAST = dict(hidden=8, steps=5, batch_size=8, dt=0.02, n_correctors=0)


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    X = [rng.normal(-1, 0.1, (1, 1)) if rng.random() < 0.5 else rng.normal(1, 0.1, (2, 1)) for _ in range(60)]
    return JumpDiffusionModel(random_state=0, **FAST).fit(X), X


def test_params_round_trip():
    est = JumpDiffusionModel(hidden=16, lr=3e-3)
    assert est.get_params()["hidden"] == 16
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    est.set_params(steps=7)
    assert est.steps == 7


def test_sample_before_fit():
    with pytest.raises(NotFittedError):
        JumpDiffusionModel().sample(2)


def test_fit_sets_attributes(fitted):
    est, _ = fitted
    assert est.n_components_max_ == 2 and est.component_dim_ == 1
    assert len(est.metrics_) == 5 and est.schedule_.N == 2


def test_sample_shapes(fitted):
    est, _ = fitted
    out = est.sample(5, random_state=1)
    assert len(out) == 5
    assert all(a.ndim == 2 and a.shape[1] == 1 and 1 <= a.shape[0] <= 2 for a in out)


def test_seeded_runs_repeat(fitted):
    est, X = fitted
    a = [x.tolist() for x in est.sample(4, random_state=3)]
    b = [x.tolist() for x in est.sample(4, random_state=3)]
    assert a == b
    again = JumpDiffusionModel(random_state=0, **FAST).fit(X)
    np.testing.assert_array_equal(again.params_.flat, est.params_.flat)


def test_guided_sample(fitted):
    est, _ = fitted
    out = est.sample(3, random_state=0, observed=[1.0])
    assert len(out) == 3


def test_count_law_is_distribution(fitted):
    est, _ = fitted
    p = est.count_law(20, random_state=0)
    assert p.shape == (2,) and p.sum() == pytest.approx(1.0)


def test_check_states_inputs():
    states = check_states([[1.0], [1.0, 2.0]])
    assert [s.n for s in states] == [1, 2] and states[0].N == 2
    assert check_states(TransState(1, [0.0], 1, 3))[0].N == 3
    assert check_states([np.zeros((2, 3))], N=4)[0].N == 4
    for bad in ([], [np.zeros((1, 2)), np.zeros((1, 3))], [[np.nan]], [np.zeros((0, 1))]):
        with pytest.raises(ValueError):
            check_states(bad)
    with pytest.raises(ValueError):
        check_states([TransState(3, np.zeros(3), 1, 3)], N=2)
