"""The PESMOC acquisition: entropy reduction of the feasible Pareto set.

For every hyperparameter sample and every Pareto-set sample the per-function
term is ``0.5 log v_PD(x) - 0.5 log v_CPD(x)``, noise included in both;
terms are averaged over Pareto samples, then over hyperparameter samples.
The total is the sum of the K + C terms, which is what allows a decoupled
reading of the acquisition.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ep, gp
from .pareto import InfeasibleSampleError, ParetoSample, extract_pareto_sample
from .problem import BoxDomain, quasi_random

log = logging.getLogger(__name__)

LOG_2PI_E = math.log(2.0 * math.pi * math.e)


def predictive_entropy(variances) -> float:
    """Entropy of a factorized Gaussian with the given marginal variances."""
    v = np.asarray(variances, dtype=float).ravel()
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    return 0.5 * v.size * LOG_2PI_E + 0.5 * float(np.sum(np.log(v)))


@dataclass
class AcquisitionValue:
    total: float
    per_objective: np.ndarray
    per_constraint: np.ndarray

    @property
    def parts(self) -> np.ndarray:
        return np.concatenate([self.per_objective, self.per_constraint])

    def to_dict(self) -> dict:
        return {
            "total": float(self.total),
            "per_objective": [float(v) for v in self.per_objective],
            "per_constraint": [float(v) for v in self.per_constraint],
        }


@dataclass
class HyperSampleModel:
    """GP posteriors for one hyperparameter sample and its EP states."""

    gps: list
    pareto: list = field(default_factory=list)
    states: list = field(default_factory=list)
    failed_draws: int = 0


@dataclass
class AcquisitionContext:
    domain: BoxDomain
    K: int
    C: int
    X_data: np.ndarray
    models: list
    M: int

    @property
    def n_states(self) -> int:
        return sum(len(m.states) for m in self.models)

    @property
    def degenerate(self) -> bool:
        """True when no Pareto sample survived for any hyperparameter sample."""
        return self.n_states == 0

    def pareto_points(self) -> np.ndarray:
        pts = [p.points for m in self.models for p in m.pareto]
        if not pts:
            return np.zeros((0, self.domain.d))
        return np.vstack(pts)


def sample_pareto_set(gps, K: int, grid, rng, n_features: int = 500, cap: int = 50,
                      max_tries: int = 4) -> ParetoSample | None:
    """Pareto set of one joint posterior function draw, or None when every
    attempt was infeasible on the grid."""
    for _ in range(max_tries):
        draws = [gp.draw_posterior_function(post, n_features, rng) for post in gps]
        try:
            return extract_pareto_sample(draws[:K], draws[K:], grid, cap=cap, rng=rng)
        except InfeasibleSampleError:
            continue
    return None


def build_context(gps_per_sample, domain: BoxDomain, K: int, X_data, M: int = 10, rng=None,
                  grid_size: int = 1000, n_features: int = 500, cap: int = 50,
                  max_iters: int = 200, tol: float = 1e-4) -> AcquisitionContext:
    """Sample M Pareto sets and run the fixed EP for each.

    ``gps_per_sample`` is a list (one entry per hyperparameter sample) of
    K + C fitted posteriors. The M draws are dealt round-robin over the
    hyperparameter samples, so M equal to the sample count gives one Pareto
    set per sample; samples dealt no draw are left out of the average.
    Infeasible draws are retried up to three times, then skipped.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(rng)
    X_data = np.atleast_2d(np.asarray(X_data, dtype=float)).reshape(-1, domain.d)
    C = len(gps_per_sample[0]) - K
    S = len(gps_per_sample)
    counts = [M // S + (1 if s < M % S else 0) for s in range(S)]
    models = []
    for gps, count in zip(gps_per_sample, counts):
        if count == 0:
            continue
        model = HyperSampleModel(list(gps))
        for _ in range(count):
            grid = quasi_random(domain, grid_size, rng)
            ps = sample_pareto_set(gps, K, grid, rng, n_features, cap)
            if ps is None:
                model.failed_draws += 1
                continue
            graph = ep.build_factor_graph(gps, ps, X_data, K=K)
            model.pareto.append(ps)
            model.states.append(ep.ep_converge_fixed(graph, max_iters=max_iters, tol=tol))
        if model.failed_draws:
            log.warning("%d of %d Pareto draws infeasible for one hyperparameter sample",
                        model.failed_draws, count)
        models.append(model)
    return AcquisitionContext(domain, K, C, X_data, models, M)


def evaluate_batch(ctx: AcquisitionContext, X) -> tuple[np.ndarray, np.ndarray]:
    """Acquisition totals (n,) and per-function terms (n, K+C) at ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    G = ctx.K + ctx.C
    parts = np.zeros((n, G))
    for model in ctx.models:
        if not model.states:
            continue  # contributes zero
        pd = np.empty((n, G))
        for g, post in enumerate(model.gps):
            _, v = post.predict_many(X)
            pd[:, g] = v + post.hp.noise_var
        log_pd = np.log(np.maximum(pd, 1e-300))
        acc = np.zeros((n, G))
        for state in model.states:
            _, cpd = ep.condition_candidates(state, X)
            acc += 0.5 * (log_pd - np.log(np.maximum(cpd, 1e-300)))
        parts += acc / len(model.states)
    parts /= len(ctx.models)
    return parts.sum(axis=1), parts


def evaluate_acquisition(ctx: AcquisitionContext, x) -> AcquisitionValue:
    total, parts = evaluate_batch(ctx, np.asarray(x, dtype=float).reshape(1, -1))
    if ctx.degenerate:
        log.warning("all Pareto samples infeasible; acquisition is zero")
    return AcquisitionValue(float(total[0]), parts[0, : ctx.K].copy(), parts[0, ctx.K:].copy())


def _score(ctx, X, term):
    total, parts = evaluate_batch(ctx, X)
    return (total if term is None else parts[:, term]), total, parts


def candidate_pool(ctx: AcquisitionContext, pool_size: int, rng, pareto_cap: int = 200) -> np.ndarray:
    """Quasi-random points plus (a seeded subset of) the Pareto-sample points."""
    rng = np.random.default_rng(rng)
    pool = quasi_random(ctx.domain, pool_size, rng)
    pp = ctx.pareto_points()
    if pp.shape[0] > pareto_cap:
        pp = pp[np.sort(rng.choice(pp.shape[0], size=pareto_cap, replace=False))]
    return np.vstack([pool, pp])


def pattern_search(batch, x0, f0, domain: BoxDomain, steps: int = 50, initial_step: float = 0.1):
    """Coordinate pattern search (maximization) inside the box.

    ``batch`` maps a stack of points to their scores. Each step polls the 2d
    coordinate neighbours and moves to the best improving one, otherwise
    halves the step.
    """
    x = np.asarray(x0, dtype=float).copy()
    best = float(f0)
    step = initial_step * domain.widths
    d = domain.d
    for _ in range(steps):
        polls = np.repeat(x[None], 2 * d, axis=0)
        for i in range(d):
            polls[2 * i, i] += step[i]
            polls[2 * i + 1, i] -= step[i]
        polls = domain.clip(polls)
        vals = batch(polls)
        j = int(np.argmax(vals))
        if vals[j] > best:
            best = float(vals[j])
            x = polls[j]
        else:
            step = step * 0.5
            if np.all(step < 1e-6 * domain.widths):
                break
    return x, best


def maximize_acquisition(ctx: AcquisitionContext, pool_size: int = 1000, rng=None, term: int | None = None,
                         local_steps: int = 50, pareto_cap: int = 200, return_pool_mean: bool = False):
    """Arg-max of the acquisition (or of one of its terms) over the domain.

    Scores a quasi-random pool plus Pareto-sample points, then refines the
    best pool point (first index on ties) with pattern search.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    rng = np.random.default_rng(rng)
    pool = candidate_pool(ctx, pool_size, rng, pareto_cap)
    score, total, parts = _score(ctx, pool, term)
    i = int(np.argmax(score))
    x, _ = pattern_search(lambda P: _score(ctx, P, term)[0], pool[i], score[i], ctx.domain, steps=local_steps)
    value = evaluate_acquisition(ctx, x)
    if return_pool_mean:
        return x, value, float(np.mean(total))
    return x, value


def decoupled_argmax(ctx: AcquisitionContext, pool_size: int = 1000, rng=0, local_steps: int = 50):
    """Per-function maximizers ``(function_id, x, value)`` of each term.

    Function ids follow the output ordering: objectives 0..K-1, constraints
    K..K+C-1. Every term is maximized with the same pool seed.
    """
    out = []
    for g in range(ctx.K + ctx.C):
        x, val = maximize_acquisition(ctx, pool_size, np.random.default_rng(rng), term=g,
                                      local_steps=local_steps)
        out.append((g, x, float(val.parts[g])))
    return out


def write_surface_csv(ctx: AcquisitionContext, path, resolution: int = 50) -> np.ndarray:
    """Acquisition on a regular 2-D grid, written as ``x1, x2, alpha``."""
    if ctx.domain.d != 2:
        raise ValueError("acquisition surfaces are only defined for d = 2")
    lo, hi = ctx.domain.lower, ctx.domain.upper
    g1 = np.linspace(lo[0], hi[0], resolution)
    g2 = np.linspace(lo[1], hi[1], resolution)
    X = np.array([[a, b] for a in g1 for b in g2])
    total, _ = evaluate_batch(ctx, X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "alpha"])
        for (a, b), v in zip(X, total):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(v))])
    return np.column_stack([X, total])
