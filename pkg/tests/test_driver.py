import json
import math

import numpy as np
import pytest

from pesmoc import acquisition, driver, gp
from pesmoc.pareto import hypervolume
from pesmoc.problem import BoxDomain, BlackBoxProblem, compute_ground_truth, make_toy_problem, sample_synthetic_problem

FAST = dict(M=2, hyper_samples=2, pool_size=60, pareto_grid=200, local_steps=4, recommend_grid=800,
            slice_burn=5, slice_thin=1)


def cfg(**kw):
    return driver.RunConfig(**{**FAST, **kw})


@pytest.fixture(scope="module")
def toy():
    return make_toy_problem()


@pytest.fixture(scope="module")
def toy_trace(toy):
    return driver.run(cfg(strategy="pesmoc", budget=6, seed=4), toy)


def test_config_validation():
    with pytest.raises(driver.ConfigError):
        driver.RunConfig(budget=2, n_initial=3).validate()
    with pytest.raises(driver.ConfigError):
        driver.RunConfig(strategy="grid").validate()
    with pytest.raises(driver.ConfigError):
        driver.RunConfig.from_dict({"bogus": 1})
    c = cfg(seed=3)
    assert driver.RunConfig.from_dict(c.to_dict()) == c


def test_trace_structure(toy, toy_trace):
    tr = toy_trace
    assert len(tr.records) == 6
    assert [r.iteration for r in tr.records] == list(range(1, 7))
    assert len(tr.metrics()) == 6 - 3 + 1
    assert all(r.acquisition is None for r in tr.records[:3])
    assert all(r.acquisition is not None for r in tr.records[3:])
    for r in tr.records:
        assert toy.domain.contains(np.array(r.x))
    assert len(tr.wall_times) == 6


def test_same_seed_same_trace_bytes(toy, toy_trace, tmp_path):
    again = driver.run(cfg(strategy="pesmoc", budget=6, seed=4), toy)
    driver.save_trace(toy_trace, tmp_path / "a.json")
    driver.save_trace(again, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.timing.json").exists()


def test_trace_replay_is_bitwise(toy, toy_trace, tmp_path):
    driver.save_trace(toy_trace, tmp_path / "t.json")
    loaded = driver.load_trace(tmp_path / "t.json")
    assert driver.score(loaded, toy) == toy_trace.metrics()
    driver.write_metrics_csv(driver.score(loaded, toy), tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "iteration,hv_rec,log_gap" and len(lines) == 5


def test_bad_trace_files(tmp_path):
    (tmp_path / "x.json").write_text("{]")
    with pytest.raises(driver.ConfigError):
        driver.load_trace(tmp_path / "x.json")
    (tmp_path / "y.json").write_text(json.dumps({"schema": "other"}))
    with pytest.raises(driver.ConfigError):
        driver.load_trace(tmp_path / "y.json")


def test_score_rejects_other_problem(toy_trace):
    other = sample_synthetic_problem(2, 2, 2, rng=3)
    with pytest.raises(driver.ConfigError):
        driver.score(toy_trace, other)


def test_context_at_reproduces_choice(toy, toy_trace):
    c = toy_trace.run_config
    ctx = driver.context_at(toy_trace, toy, 4)
    x, _ = acquisition.maximize_acquisition(ctx, c.pool_size, driver._rng(c.seed, driver._POOL, 4),
                                            local_steps=c.local_steps)
    assert x.tolist() == toy_trace.records[4].x
    with pytest.raises(driver.ConfigError):
        driver.context_at(toy_trace, toy, 2)


def test_budget_equal_to_initial(toy):
    tr = driver.run(cfg(strategy="pesmoc", budget=3, seed=0), toy)
    assert len(tr.records) == 3 and len(tr.metrics()) == 1
    assert all(r.acquisition is None for r in tr.records)


def test_paired_initial_designs(toy):
    a = driver.run(cfg(strategy="random", budget=5, seed=9), toy)
    b = driver.run(cfg(strategy="pesmoc", budget=4, seed=9), toy)
    assert [r.x for r in a.records[:3]] == [r.x for r in b.records[:3]]


def test_random_strategy_is_uniform(toy):
    tr = driver.run(cfg(strategy="random", budget=60, seed=1, hyper_samples=1, recommend_grid=200), toy)
    X = np.array([r.x for r in tr.records[3:]])
    assert abs(X.mean()) < 1.5 and X.min() >= -10 and X.max() <= 10


def test_noisy_observations_differ_from_truth():
    pr = make_toy_problem(noise_std=0.1)
    tr = driver.run(cfg(strategy="random", budget=5, seed=0, hyper_samples=1), pr)
    for r in tr.records:
        assert np.all(np.array(r.y) != pr.true_values([r.x])[0])


def test_output_scaling_keeps_constraint_sign():
    Y = np.array([[1.0, 5.0, -2.0], [3.0, 7.0, 4.0], [2.0, 9.0, 0.5]])
    sc = driver.OutputScaling.fit(Y, 2)
    Z = sc.forward(Y)
    np.testing.assert_array_equal(np.sign(Z[:, 2]), np.sign(Y[:, 2]))
    np.testing.assert_allclose(Z[:, :2].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(sc.inverse(Z), Y)


def test_recommend_unconstrained_front():
    X = np.linspace(0, 1, 8)[:, None]
    hp = gp.HyperParams(1.0, (0.3,), 1e-8)
    gps = [gp.fit(X, X[:, 0], hp), gp.fit(X, 1 - X[:, 0], hp)]
    grid = np.linspace(0, 1, 50)[:, None]
    idx, front = driver.recommend([gps], grid, 2)
    means = np.column_stack([g.mean(grid) for g in gps])
    from pesmoc.pareto import pareto_front
    assert idx.tolist() == pareto_front(means).tolist()


def test_recommend_empty_when_nothing_mean_feasible():
    X = np.linspace(0, 1, 5)[:, None]
    hp = gp.HyperParams(1.0, (1.0,), 1e-8)
    gps = [gp.fit(X, X[:, 0], hp), gp.fit(X, np.full(5, -3.0), hp)]
    idx, front = driver.recommend([gps], np.linspace(0, 1, 20)[:, None], 1)
    assert idx.size == 0 and front.shape == (0, 1)


def test_recommend_on_dense_toy_data(toy):
    truth = compute_ground_truth(toy, 2000)
    X = truth.grid[::10]
    Y = toy.true_values(X)
    sc = driver.OutputScaling.fit(Y, 2)
    Z = sc.forward(Y)
    hp = gp.HyperParams(1.0, (6.0, 6.0), 1e-6)
    gps = [gp.fit(X, Z[:, g], hp) for g in range(4)]
    idx, _ = driver.recommend([gps], truth.grid, 2)
    rec = truth.grid[idx]
    inside = np.all(rec >= -0.3, axis=1)
    assert inside.mean() > 0.95
    feasible = rec[np.all(rec >= 0, axis=1)]
    assert hypervolume(toy.true_values(feasible)[:, :2], truth.reference_point) > 0.9 * truth.hv_star


def test_scoring_rules(toy):
    truth = compute_ground_truth(toy, 1000)
    hv, gap = driver.score_recommendation(toy, truth, np.zeros((0, 2)))
    assert hv == 0.0 and gap == 0.0
    hv, gap = driver.score_recommendation(toy, truth, truth.pareto_x)
    assert gap == pytest.approx(math.log(1e-12))
    bad = np.vstack([truth.pareto_x, [[-1.0, 5.0]]])
    assert driver.score_recommendation(toy, truth, bad) == (0.0, 0.0)


def test_evaluation_error_carries_iteration():
    boom = BlackBoxProblem(BoxDomain((0.0,), (1.0,)), (lambda X: 1 / 0 * X[:, 0],))
    with pytest.raises(driver.EvaluationError) as err:
        driver.run(cfg(strategy="random", budget=3, seed=0), boom,
                   truth=compute_ground_truth(BlackBoxProblem(BoxDomain((0.0,), (1.0,)), (lambda X: X[:, 0],)), 10))
    assert err.value.iteration == 1


def test_benchmark_structure(tmp_path):
    base = cfg(n_initial=3)
    rep = driver.run_benchmark(2, "noisy", ("pesmoc", "random"), (0,), 5, base_config=base, out_dir=tmp_path,
                               problem_kw=dict(d=2, K=2, C=1))
    assert set(rep["curves"]) == {"pesmoc", "random"}
    assert rep["curves"]["random"]["iteration"] == [3, 4, 5]
    assert len(list((tmp_path / "traces").glob("*.json"))) >= 4
    assert (tmp_path / "pesmoc.csv").exists() and (tmp_path / "summary.json").exists()
    assert rep["vs_random"]["pesmoc"]["wins"] + rep["vs_random"]["pesmoc"]["losses"] \
        + rep["vs_random"]["pesmoc"]["ties"] == 2
    assert rep["failures"] == []
    with pytest.raises(driver.ConfigError):
        driver.run_benchmark(0, "noisy")
    with pytest.raises(driver.ConfigError):
        driver.benchmark_problem(0, "windy")


def test_benchmark_random_runs_repeat_exactly():
    base = cfg(hyper_samples=1)
    a = driver.run_benchmark(1, "noiseless", ("random",), (5,), 4, base_config=base, problem_kw=dict(d=2, K=2, C=1))
    b = driver.run_benchmark(1, "noiseless", ("random",), (5,), 4, base_config=base, problem_kw=dict(d=2, K=2, C=1))
    assert a["curves"] == b["curves"]
