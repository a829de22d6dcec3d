import csv
import logging
import math

import numpy as np
import pytest

from pesmoc import acquisition, ep, gp
from pesmoc.problem import BoxDomain


def make_gps(X, K, C, seed=0, ls=0.3):
    rng = np.random.default_rng(seed)
    hp = gp.HyperParams(1.0, (ls,) * X.shape[1], 1e-4)
    return [gp.fit(X, gp.draw_prior_function(hp, 300, rng)(X), hp) for _ in range(K + C)]


@pytest.fixture(scope="module")
def ctx2d():
    dom = BoxDomain((0.0, 0.0), (1.0, 1.0))
    X = np.array([[0.2, 0.3], [0.7, 0.6], [0.4, 0.9], [0.9, 0.1]])
    gps_a = make_gps(X, 2, 1, seed=1)
    gps_b = make_gps(X, 2, 1, seed=2)
    return acquisition.build_context([gps_a, gps_b], dom, 2, X, M=4, rng=0, grid_size=300)


def test_predictive_entropy_examples():
    assert acquisition.predictive_entropy([1.0]) == pytest.approx(1.41894, abs=1e-5)
    assert acquisition.predictive_entropy([1.0, 1.0]) == pytest.approx(2.83788, abs=1e-5)
    diff = acquisition.predictive_entropy([math.e ** 2, 1.0]) - acquisition.predictive_entropy([1.0, 1.0])
    assert diff == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ValueError):
        acquisition.predictive_entropy([1.0, 0.0])


def test_m_is_dealt_over_hyper_samples(ctx2d):
    assert [len(m.states) + m.failed_draws for m in ctx2d.models] == [2, 2]
    assert ctx2d.n_states >= 1


def test_decomposition_identity(ctx2d):
    X = np.random.default_rng(0).uniform(size=(200, 2))
    total, parts = acquisition.evaluate_batch(ctx2d, X)
    np.testing.assert_array_equal(total, parts.sum(axis=1))
    val = acquisition.evaluate_acquisition(ctx2d, X[3])
    assert val.total == pytest.approx(val.per_objective.sum() + val.per_constraint.sum(), abs=1e-15)
    assert val.per_objective.shape == (2,) and val.per_constraint.shape == (1,)
    assert val.to_dict()["total"] == val.total


def test_pool_average_nonnegative(ctx2d):
    X = acquisition.candidate_pool(ctx2d, 300, 0)
    total, _ = acquisition.evaluate_batch(ctx2d, X)
    assert total.mean() >= -1e-3


def test_identical_hyper_samples_equal_single_sample():
    dom = BoxDomain((0.0,), (1.0,))
    X = np.array([[0.1], [0.5], [0.8]])
    gps = make_gps(X, 1, 1, seed=3)
    single = acquisition.build_context([gps], dom, 1, X, M=1, rng=0, grid_size=200)
    state = single.models[0]
    multi = acquisition.AcquisitionContext(dom, 1, 1, X, [state] * 10, 10)
    Xq = np.linspace(0, 1, 30)[:, None]
    np.testing.assert_allclose(acquisition.evaluate_batch(multi, Xq)[0],
                               acquisition.evaluate_batch(single, Xq)[0], rtol=1e-12)


def test_matches_from_scratch_oracle():
    # direct sum over functions of 0.5 log(PD) - 0.5 log(CPD), M = 1
    dom = BoxDomain((0.0,), (1.0,))
    X = np.array([[0.1], [0.45], [0.9]])
    gps = make_gps(X, 1, 1, seed=4)
    ctx = acquisition.build_context([gps], dom, 1, X, M=1, rng=5, grid_size=200, cap=2)
    st = ctx.models[0].states[0]
    for x in (0.05, 0.3, 0.62, 0.97):
        cpd = ep.condition_candidate(st, x=[x])
        expected = 0.0
        for g, post in enumerate(gps):
            _, v = gp.predict(post, [x])
            expected += 0.5 * math.log(v + post.hp.noise_var) - 0.5 * math.log(cpd.var[g])
        assert acquisition.evaluate_acquisition(ctx, [x]).total == pytest.approx(expected, abs=1e-6)


def test_infeasible_draws_give_zero_with_warning(caplog):
    dom = BoxDomain((0.0,), (1.0,))
    X = np.linspace(0, 1, 6)[:, None]
    hp = gp.HyperParams(1.0, (2.0,), 1e-8)
    gps = [gp.fit(X, np.zeros(6), hp), gp.fit(X, np.full(6, -20.0), hp)]
    with caplog.at_level(logging.WARNING):
        ctx = acquisition.build_context([gps], dom, 1, X, M=2, rng=0, grid_size=100)
        val = acquisition.evaluate_acquisition(ctx, [0.5])
    assert ctx.degenerate and val.total == 0.0
    assert any("infeasible" in r.message for r in caplog.records)


def test_constant_acquisition_returns_first_pool_point():
    dom = BoxDomain((0.0,), (1.0,))
    X = np.linspace(0, 1, 6)[:, None]
    hp = gp.HyperParams(1.0, (2.0,), 1e-8)
    gps = [gp.fit(X, np.zeros(6), hp), gp.fit(X, np.full(6, -20.0), hp)]
    ctx = acquisition.build_context([gps], dom, 1, X, M=1, rng=0, grid_size=50)
    x, _ = acquisition.maximize_acquisition(ctx, 20, rng=7)
    np.testing.assert_array_equal(x, acquisition.candidate_pool(ctx, 20, np.random.default_rng(7))[0])


def test_argmax_containment(ctx2d, monkeypatch):
    pool = acquisition.candidate_pool(ctx2d, 64, np.random.default_rng(11))
    target = pool[17]

    def fake(ctx, X):
        X = np.atleast_2d(X)
        val = -np.sum((X - target) ** 2, axis=1)
        return val, np.column_stack([val, np.zeros((len(X), 2))])

    monkeypatch.setattr(acquisition, "evaluate_batch", fake)
    x, _ = acquisition.maximize_acquisition(ctx2d, 64, rng=11, local_steps=0)
    np.testing.assert_array_equal(x, target)
    # the local search can only improve on the pool
    x, _ = acquisition.maximize_acquisition(ctx2d, 64, rng=11)
    assert fake(None, x)[0][0] >= fake(None, target)[0][0]


def test_pattern_search_finds_interior_max():
    dom = BoxDomain((0.0, 0.0), (1.0, 1.0))
    f = lambda P: -np.sum((P - np.array([0.33, 0.71])) ** 2, axis=1)
    x, val = acquisition.pattern_search(f, np.array([0.9, 0.1]), f(np.array([[0.9, 0.1]]))[0], dom, steps=50)
    np.testing.assert_allclose(x, [0.33, 0.71], atol=2e-3)


def test_maximize_is_deterministic(ctx2d):
    a = acquisition.maximize_acquisition(ctx2d, 100, rng=3, local_steps=5)
    b = acquisition.maximize_acquisition(ctx2d, 100, rng=3, local_steps=5)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        acquisition.maximize_acquisition(ctx2d, 0)


def test_decoupled_argmax(ctx2d):
    out = acquisition.decoupled_argmax(ctx2d, pool_size=100, local_steps=5)
    assert [g for g, _, _ in out] == [0, 1, 2]
    for g, x, value in out:
        total = acquisition.evaluate_acquisition(ctx2d, x)
        assert value == pytest.approx(total.parts[g])
        assert value <= total.total + 1e-12 or np.any(total.parts < 0)


def test_decoupled_argmax_single_function():
    dom = BoxDomain((0.0,), (1.0,))
    X = np.array([[0.2], [0.6]])
    ctx = acquisition.build_context([make_gps(X, 1, 0, seed=6)], dom, 1, X, M=2, rng=0, grid_size=100)
    (g, x, value), = acquisition.decoupled_argmax(ctx, pool_size=50, rng=1, local_steps=3)
    x2, v2 = acquisition.maximize_acquisition(ctx, 50, np.random.default_rng(1), local_steps=3)
    np.testing.assert_array_equal(x, x2)
    assert value == pytest.approx(v2.total)


def test_surface_csv(ctx2d, tmp_path):
    arr = acquisition.write_surface_csv(ctx2d, tmp_path / "s.csv", resolution=6)
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x1", "x2", "alpha"] and len(rows) == 37
    assert float(rows[1][2]) == arr[0, 2]
    one_d = acquisition.AcquisitionContext(BoxDomain((0.0,), (1.0,)), 1, 0, np.zeros((0, 1)), [], 1)
    with pytest.raises(ValueError):
        acquisition.write_surface_csv(one_d, tmp_path / "x.csv")
