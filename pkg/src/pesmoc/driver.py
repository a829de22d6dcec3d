"""Optimization campaigns: initial design, strategy loop, recommendation,
scoring, benchmark aggregation and the trace/report file formats."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, acquisition, gp
from .pareto import hypervolume, log_relative_hv_gap, pareto_front
from .problem import (
    BlackBoxProblem,
    Dataset,
    GroundTruth,
    compute_ground_truth,
    evaluate,
    quasi_random,
    sample_synthetic_problem,
)

log = logging.getLogger(__name__)

TRACE_SCHEMA = "pesmoc-trace/1"
STRATEGIES = ("pesmoc", "random")

# rng stream ids; every draw comes from default_rng([seed, stream, iteration])
_INIT, _HYPER, _PARETO, _POOL, _NOISE, _RANDOM = range(6)


class ConfigError(ValueError):
    """Invalid run or benchmark configuration."""


class EvaluationError(RuntimeError):
    def __init__(self, iteration: int, cause: BaseException):
        super().__init__(f"evaluation {iteration} failed: {cause}")
        self.iteration = iteration
        self.cause = cause


def _rng(seed: int, stream: int, iteration: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, int(iteration)])


@dataclass
class RunConfig:
    strategy: str = "pesmoc"
    budget: int = 40
    n_initial: int = 3
    seed: int = 0
    M: int = 10
    hyper_samples: int = 10
    pool_size: int = 1000
    pareto_grid: int = 1000
    pareto_cap: int = 50
    n_features: int = 500
    local_steps: int = 50
    noise: str = "auto"  # auto | fixed | sampled
    recommend_grid: int | None = None
    slice_burn: int = 20
    slice_thin: int = 2
    ep_max_iters: int = 200
    ep_tol: float = 1e-4

    def validate(self) -> "RunConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not self.budget >= self.n_initial >= 1:
            raise ConfigError("need budget >= n_initial >= 1")
        if self.M < 1 or self.hyper_samples < 1 or self.pool_size < 1:
            raise ConfigError("M, hyper_samples and pool_size must be >= 1")
        if self.noise not in ("auto", "fixed", "sampled"):
            raise ConfigError(f"unknown noise model {self.noise!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class IterationRecord:
    iteration: int  # 1-based evaluation index
    x: list
    y: list
    acquisition: float | None = None
    pool_mean: float | None = None  # acquisition averaged over the candidate pool
    recommendation_x: list | None = None
    recommendation_front: list | None = None
    hv_rec: float | None = None
    log_gap: float | None = None
    hyper_samples: list | None = None


@dataclass
class RunTrace:
    config: dict
    problem_id: str
    records: list = field(default_factory=list)
    hv_star: float = float("nan")
    reference_point: list = field(default_factory=list)
    versions: dict = field(default_factory=dict)
    problem: dict = field(default_factory=dict)  # problem.json payload, for self-contained replay
    wall_times: list = field(default_factory=list, compare=False)

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def metrics(self):
        return [(r.iteration, r.hv_rec, r.log_gap) for r in self.records if r.log_gap is not None]

    def to_dict(self) -> dict:
        return {
            "schema": TRACE_SCHEMA,
            "config": self.config,
            "problem_id": self.problem_id,
            "versions": self.versions,
            "hv_star": self.hv_star,
            "reference_point": self.reference_point,
            "problem": self.problem,
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunTrace":
        if d.get("schema") != TRACE_SCHEMA:
            raise ConfigError(f"unsupported trace schema {d.get('schema')!r}")
        recs = [IterationRecord(**r) for r in d["records"]]
        return cls(d["config"], d["problem_id"], recs, d["hv_star"], d["reference_point"],
                   d.get("versions", {}), d.get("problem", {}))


def _versions() -> dict:
    return {"pesmoc": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def save_trace(trace: RunTrace, path) -> None:
    """Write the trace; wall times go to a ``.timing.json`` sidecar so the
    trace itself is deterministic."""
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(trace.to_dict(), fh, indent=1)
        fh.write("\n")
    if trace.wall_times:
        with open(path.with_suffix(".timing.json"), "w") as fh:
            json.dump({"wall_times": trace.wall_times}, fh)


def load_trace(path) -> RunTrace:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not a trace file ({exc})") from exc
    return RunTrace.from_dict(d)


# --- modelling ------------------------------------------------------------------


@dataclass
class OutputScaling:
    """Objectives are standardized; constraints are only divided by their
    spread so the feasibility threshold stays at 0."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, Y: np.ndarray, K: int) -> "OutputScaling":
        G = Y.shape[1]
        shift = np.zeros(G)
        scale = np.ones(G)
        if Y.shape[0] >= 1:
            shift[:K] = Y[:, :K].mean(axis=0)
        if Y.shape[0] >= 2:
            sd = Y.std(axis=0)
            rms = np.sqrt((Y ** 2).mean(axis=0))
            spread = np.concatenate([sd[:K], rms[K:]])
            scale = np.where(spread > 1e-12, spread, 1.0)
        return cls(shift, scale)

    def forward(self, Y):
        return (np.asarray(Y) - self.shift) / self.scale

    def inverse(self, Z, cols=None):
        cols = slice(None) if cols is None else cols
        return np.asarray(Z) * self.scale[cols] + self.shift[cols]


def _uses_fixed_noise(config: RunConfig, problem: BlackBoxProblem) -> bool:
    if config.noise == "auto":
        return problem.noise_std == 0.0
    return config.noise == "fixed"


def sample_models(data: Dataset, problem: BlackBoxProblem, config: RunConfig, iteration: int,
                  init=None):
    """Hyperparameter samples and fitted posteriors for every function.

    Returns ``(gps_per_sample, scaling, hyper, states)`` where
    ``gps_per_sample[s][g]`` is the posterior of function g under sample s.
    """
    rng = _rng(config.seed, _HYPER, iteration)
    scaling = OutputScaling.fit(data.Y, problem.K)
    Z = scaling.forward(data.Y)
    fixed = gp.NOISE_FLOOR if _uses_fixed_noise(config, problem) else None
    priors = gp.Hyperpriors.default(problem.domain.widths, fixed_noise=fixed)
    hyper, states = [], []
    for g in range(problem.K + problem.C):
        start = None if init is None else init[g]
        hs = gp.slice_sample_hyperparams(data.X, Z[:, g], priors, config.hyper_samples, rng,
                                         init=start, burn=config.slice_burn, thin=config.slice_thin)
        hyper.append(list(hs))
        states.append(hs.state)
    gps = models_from_hyper(data.X, Z, hyper)
    return gps, scaling, hyper, states


def models_from_hyper(X, Z, hyper):
    S = len(hyper[0])
    return [[gp.fit(X, Z[:, g], hyper[g][s]) for g in range(len(hyper))] for s in range(S)]


def recommend(gps_per_sample, grid, K: int):
    """Mean-feasible, non-dominated grid points under hyper-averaged means.

    Returns ``(indices, mean_objectives)`` (in model units); both are empty
    when no grid point is mean-feasible.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    G = len(gps_per_sample[0])
    means = np.zeros((grid.shape[0], G))
    for gps in gps_per_sample:
        for g, post in enumerate(gps):
            means[:, g] += post.mean(grid)
    means /= len(gps_per_sample)
    feasible = np.all(means[:, K:] >= 0.0, axis=1) if G > K else np.ones(grid.shape[0], dtype=bool)
    idx = np.flatnonzero(feasible)
    if idx.size == 0:
        return idx, np.zeros((0, K))
    idx = idx[pareto_front(means[idx, :K])]
    return idx, means[idx, :K]


def true_hypervolume(problem: BlackBoxProblem, truth: GroundTruth, X_rec) -> float:
    """Hypervolume of the true objective values at the recommended inputs;
    zero if the recommendation is empty or any point is truly infeasible."""
    X_rec = np.asarray(X_rec, dtype=float).reshape(-1, problem.d)
    if X_rec.shape[0] == 0:
        return 0.0
    Y = problem.true_values(X_rec)
    if problem.C and np.any(Y[:, problem.K:] < 0.0):
        return 0.0
    return hypervolume(Y[:, : problem.K], truth.reference_point)


def score_recommendation(problem, truth, X_rec):
    hv = min(true_hypervolume(problem, truth, X_rec), truth.hv_star)
    return hv, log_relative_hv_gap(truth.hv_star, hv)


def score(trace: RunTrace, problem: BlackBoxProblem, truth: GroundTruth | None = None):
    """Recompute (iteration, hv_rec, log_gap) for every scored record."""
    if trace.problem_id != problem.problem_id:
        raise ConfigError("trace and problem refer to different problems")
    if truth is None:
        truth = truth_for(problem, trace.run_config)
    out = []
    for r in trace.records:
        if r.recommendation_x is None:
            continue
        hv, gap = score_recommendation(problem, truth, r.recommendation_x)
        out.append((r.iteration, hv, gap))
    return out


def write_metrics_csv(metrics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "hv_rec", "log_gap"])
        for it, hv, gap in metrics:
            w.writerow([it, repr(float(hv)), repr(float(gap))])


def truth_for(problem: BlackBoxProblem, config: RunConfig) -> GroundTruth:
    # the grid seed is fixed so every run on a problem shares it
    return compute_ground_truth(problem, config.recommend_grid, rng=0)


# --- the loop ---------------------------------------------------------------------


def _observe(problem, x, seed, i):
    try:
        return evaluate(problem, x, _rng(seed, _NOISE, i))
    except Exception as exc:
        raise EvaluationError(i + 1, exc) from exc


def build_acquisition(gps, data: Dataset, problem: BlackBoxProblem, config: RunConfig, iteration: int):
    return acquisition.build_context(
        gps, problem.domain, problem.K, data.X, M=config.M, rng=_rng(config.seed, _PARETO, iteration),
        grid_size=config.pareto_grid, n_features=config.n_features, cap=config.pareto_cap,
        max_iters=config.ep_max_iters, tol=config.ep_tol,
    )


def run(config: RunConfig, problem: BlackBoxProblem, truth: GroundTruth | None = None,
        callback=None) -> RunTrace:
    """One optimization campaign. ``callback(index, ctx)`` sees every
    acquisition context built (PESMOC only)."""
    config.validate()
    truth = truth_for(problem, config) if truth is None else truth
    data = Dataset(problem.K, problem.C, problem.d)
    trace = RunTrace(config.to_dict(), problem.problem_id, hv_star=float(truth.hv_star),
                     reference_point=[float(v) for v in truth.reference_point], versions=_versions(),
                     problem=dict(problem.spec))
    X0 = quasi_random(problem.domain, config.n_initial, _rng(config.seed, _INIT))
    chain = None
    t0 = time.perf_counter()
    for i in range(config.budget):
        acq_value = pool_mean = None
        if i < config.n_initial:
            x = X0[i]
        elif config.strategy == "random":
            x = problem.domain.from_unit(_rng(config.seed, _RANDOM, i).uniform(size=problem.d))
        else:
            ctx = build_acquisition(gps, data, problem, config, i)
            if callback is not None:
                callback(i, ctx)
            x, val, pool_mean = acquisition.maximize_acquisition(
                ctx, config.pool_size, _rng(config.seed, _POOL, i), local_steps=config.local_steps,
                return_pool_mean=True)
            acq_value = float(val.total)
        x = problem.domain.clip(np.asarray(x, dtype=float))
        y = _observe(problem, x, config.seed, i)
        data.add(x, y)
        rec = IterationRecord(i + 1, [float(v) for v in x], [float(v) for v in y], acq_value, pool_mean)
        if i + 1 >= config.n_initial:
            gps, scaling, hyper, chain = sample_models(data, problem, config, i + 1, init=chain)
            idx, front = recommend(gps, truth.grid, problem.K)
            rec.recommendation_x = truth.grid[idx].tolist()
            rec.recommendation_front = scaling.inverse(front, slice(0, problem.K)).tolist()
            rec.hv_rec, rec.log_gap = score_recommendation(problem, truth, truth.grid[idx])
            rec.hyper_samples = [[h.to_dict() for h in hs] for hs in hyper]
        trace.records.append(rec)
        trace.wall_times.append(time.perf_counter() - t0)
    return trace


def context_at(trace: RunTrace, problem: BlackBoxProblem, iteration: int):
    """Rebuild the acquisition context available after ``iteration``
    evaluations, from the hyperparameter samples stored in the trace."""
    config = trace.run_config
    if not config.n_initial <= iteration <= len(trace.records):
        raise ConfigError(f"iteration must lie in [{config.n_initial}, {len(trace.records)}]")
    recs = trace.records[:iteration]
    data = Dataset(problem.K, problem.C, problem.d)
    for r in recs:
        data.add(r.x, r.y)
    hyper = [[gp.HyperParams.from_dict(h) for h in hs] for hs in recs[-1].hyper_samples]
    Z = OutputScaling.fit(data.Y, problem.K).forward(data.Y)
    gps = models_from_hyper(data.X, Z, hyper)
    return build_acquisition(gps, data, problem, config, iteration)


# --- benchmark --------------------------------------------------------------------


SCENARIOS = {"noiseless": 0.0, "noisy": 0.1}


def benchmark_problem(index: int, scenario: str, d=3, K=2, C=2, base_seed: int = 1000) -> BlackBoxProblem:
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    return sample_synthetic_problem(d, K, C, rng=base_seed + index, noise_std=SCENARIOS[scenario])


def _run_job(job):
    problem, config, truth = job
    try:
        return run(config, problem, truth), None
    except Exception as exc:  # recorded and excluded from aggregates
        return None, f"{type(exc).__name__}: {exc}"


def run_benchmark(n_problems: int, scenario: str, strategies=STRATEGIES, seeds=(0,), budget: int = 40,
                  workers: int = 1, base_config: RunConfig | None = None, out_dir=None, problem_kw=None):
    """Every strategy on every generated problem for every seed.

    Returns a report dict; when ``out_dir`` is given, writes per-strategy
    curves, a summary JSON and the individual traces there.
    """
    if n_problems < 1 or not seeds or not strategies:
        raise ConfigError("need at least one problem, seed and strategy")
    base = base_config or RunConfig()
    problems = [benchmark_problem(p, scenario, **(problem_kw or {})) for p in range(n_problems)]
    truths = [truth_for(pr, base) for pr in problems]
    jobs, keys = [], []
    for p, pr in enumerate(problems):
        for s in seeds:
            for strat in strategies:
                cfg = RunConfig.from_dict({**base.to_dict(), "strategy": strat, "budget": budget, "seed": int(s)})
                jobs.append((pr, cfg, truths[p]))
                keys.append((p, int(s), strat))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    traces, failures = {}, []
    for key, (trace, err) in zip(keys, results):
        if err is not None:
            failures.append({"problem": key[0], "seed": key[1], "strategy": key[2], "error": err})
            log.error("run %s failed: %s", key, err)
        else:
            traces[key] = trace
    report = aggregate(traces, n_problems, seeds, strategies, budget, base.n_initial)
    report["scenario"] = scenario
    report["failures"] = failures
    if out_dir is not None:
        write_report(report, traces, out_dir)
    return report


def aggregate(traces, n_problems, seeds, strategies, budget, n_initial) -> dict:
    iterations = list(range(n_initial, budget + 1))
    curves = {}
    final = {}
    for strat in strategies:
        rows = []
        for p in range(n_problems):
            per_seed = [np.array([m[2] for m in traces[(p, int(s), strat)].metrics()])
                        for s in seeds if (p, int(s), strat) in traces]
            if per_seed:
                rows.append(np.mean(per_seed, axis=0))
                final.setdefault(strat, {})[p] = float(rows[-1][-1])
        A = np.array(rows) if rows else np.zeros((0, len(iterations)))
        n = A.shape[0]
        mean = A.mean(axis=0) if n else np.full(len(iterations), np.nan)
        se = A.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(iterations))
        curves[strat] = {"iteration": iterations, "mean": mean.tolist(), "stderr": se.tolist(), "n": n}
    wins = {}
    if "random" in strategies:
        for strat in strategies:
            if strat == "random":
                continue
            w = l = 0
            for p in range(n_problems):
                a, b = final.get(strat, {}).get(p), final.get("random", {}).get(p)
                if a is None or b is None:
                    continue
                if a < b:
                    w += 1
                elif a > b:
                    l += 1
            wins[strat] = {"wins": w, "losses": l, "ties": n_problems - w - l}
    return {
        "n_problems": n_problems,
        "seeds": [int(s) for s in seeds],
        "budget": budget,
        "curves": curves,
        "final_log_gap": {s: {str(p): v for p, v in d.items()} for s, d in final.items()},
        "vs_random": wins,
    }


def write_report(report: dict, traces: dict, out_dir) -> None:
    out = Path(out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    for strat, c in report["curves"].items():
        with open(out / f"{strat}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "mean_log_gap", "stderr"])
            for it, m, s in zip(c["iteration"], c["mean"], c["stderr"]):
                w.writerow([it, repr(float(m)), repr(float(s))])
    with open(out / "summary.json", "w") as fh:
        json.dump(report, fh, indent=1)
    for (p, s, strat), trace in traces.items():
        save_trace(trace, out / "traces" / f"p{p}_s{s}_{strat}.json")
