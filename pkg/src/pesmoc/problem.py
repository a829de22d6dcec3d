"""Optimization problems, observation datasets and ground truth.

Output vectors are always ordered objectives first, then constraints.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from . import gp
from .pareto import hypervolume, pareto_front


class DomainError(ValueError):
    """A point lies outside the problem's box domain."""


class EmptyFeasibleSetError(RuntimeError):
    """No ground-truth grid point satisfies all constraints."""


@dataclass(frozen=True)
class BoxDomain:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) < 1 or len(lo) != len(hi):
            raise ValueError("bounds must be non-empty and of equal length")
        if any(l >= u for l, u in zip(lo, hi)):
            raise ValueError("lower bounds must be strictly below upper bounds")

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.upper) - np.asarray(self.lower)

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(
            x.shape == (self.d,)
            and np.all(x >= np.asarray(self.lower) - tol)
            and np.all(x <= np.asarray(self.upper) + tol)
        )

    def from_unit(self, U) -> np.ndarray:
        return np.asarray(self.lower) + np.asarray(U) * self.widths

    def clip(self, X) -> np.ndarray:
        return np.clip(X, self.lower, self.upper)


def quasi_random(domain: BoxDomain, n: int, seed) -> np.ndarray:
    """``n`` scrambled Halton points scaled to the domain."""
    if n <= 0:
        return np.zeros((0, domain.d))
    seq = qmc.Halton(d=domain.d, scramble=True, seed=np.random.default_rng(seed))
    return domain.from_unit(seq.random(n))


@dataclass(frozen=True)
class BlackBoxProblem:
    """Box-bounded problem with vectorized objective and constraint callables.

    Each evaluator maps an (n, d) array to n values and is deterministic;
    observation noise is added by :func:`evaluate`.
    """

    domain: BoxDomain
    objectives: tuple
    constraints: tuple = ()
    noise_std: float = 0.0
    name: str = "problem"
    spec: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(self.objectives) < 1:
            raise ValueError("a problem needs at least one objective")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def K(self) -> int:
        return len(self.objectives)

    @property
    def C(self) -> int:
        return len(self.constraints)

    @property
    def d(self) -> int:
        return self.domain.d

    def true_values(self, X) -> np.ndarray:
        """Noiseless (n, K+C) outputs at the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cols = [np.asarray(f(X), dtype=float).reshape(-1) for f in (*self.objectives, *self.constraints)]
        return np.column_stack(cols)

    def with_noise(self, noise_std: float) -> "BlackBoxProblem":
        spec = dict(self.spec)
        spec["noise_std"] = float(noise_std)
        return BlackBoxProblem(self.domain, self.objectives, self.constraints, float(noise_std), self.name, spec)

    @property
    def problem_id(self) -> str:
        # noise level is excluded so noisy and noiseless variants share ground truth
        spec = {k: v for k, v in self.spec.items() if k != "noise_std"}
        payload = json.dumps(spec, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class Observation:
    x: np.ndarray
    y: np.ndarray


@dataclass
class Dataset:
    K: int
    C: int
    d: int
    observations: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.observations)

    def add(self, x, y) -> None:
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        if x.shape[0] != self.d or y.shape[0] != self.K + self.C:
            raise ValueError("observation shape does not match the dataset")
        self.observations.append(Observation(x, y))

    @property
    def X(self) -> np.ndarray:
        if not self.observations:
            return np.zeros((0, self.d))
        return np.vstack([o.x for o in self.observations])

    @property
    def Y(self) -> np.ndarray:
        if not self.observations:
            return np.zeros((0, self.K + self.C))
        return np.vstack([o.y for o in self.observations])


def evaluate(problem: BlackBoxProblem, x, rng=None) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if not problem.domain.contains(x):
        raise DomainError(f"point {x.tolist()} is outside the domain")
    y = problem.true_values(x[None, :])[0]
    if problem.noise_std > 0.0:
        rng = np.random.default_rng(rng)
        y = y + problem.noise_std * rng.standard_normal(y.shape[0])
    return y


# --- concrete problems ---------------------------------------------------------


def _xy(X):
    return X[:, 0] * X[:, 1]


def _neg_xy(X):
    return -X[:, 1] * X[:, 0]


def _first(X):
    return X[:, 0].copy()


def _second(X):
    return X[:, 1].copy()


def make_toy_problem(noise_std: float = 0.0) -> BlackBoxProblem:
    """min xy, -yx  s.t.  x >= 0, y >= 0  over [-10, 10]^2."""
    domain = BoxDomain((-10.0, -10.0), (10.0, 10.0))
    spec = {"kind": "toy", "noise_std": float(noise_std)}
    return BlackBoxProblem(domain, (_xy, _neg_xy), (_first, _second), float(noise_std), "toy", spec)


# Defaults for the synthetic generator; not given by the source experiments.
DEFAULT_SYNTHETIC_HP = dict(amplitude=1.0, lengthscale=0.25)


def sample_synthetic_problem(d: int = 3, K: int = 2, C: int = 2, kernel_hp: gp.HyperParams | None = None,
                             n_features: int = 500, rng=0, noise_std: float = 0.0) -> BlackBoxProblem:
    """Problem on [0, 1]^d whose K+C functions are independent GP prior draws.

    ``rng`` should be an integer seed so the problem can be serialized and
    reloaded exactly.
    """
    if d < 1 or K < 1 or C < 0 or n_features < 1:
        raise ValueError("need d, K, n_features >= 1 and C >= 0")
    if kernel_hp is None:
        kernel_hp = gp.HyperParams(DEFAULT_SYNTHETIC_HP["amplitude"], (DEFAULT_SYNTHETIC_HP["lengthscale"],) * d)
    if kernel_hp.dims != d:
        raise ValueError("kernel_hp lengthscales must match d")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng)
    funcs = [gp.draw_prior_function(kernel_hp, n_features, gen) for _ in range(K + C)]
    spec = {
        "kind": "synthetic",
        "dims": d,
        "K": K,
        "C": C,
        "bounds": [[0.0] * d, [1.0] * d],
        "kernel_hp": kernel_hp.to_dict(),
        "n_features": n_features,
        "seed": None if seed is None else int(seed),
        "noise_std": float(noise_std),
        "functions": [f.to_dict() for f in funcs],
    }
    return problem_from_spec(spec)


def problem_to_json(problem: BlackBoxProblem) -> str:
    return json.dumps(problem.spec, sort_keys=True)


def problem_from_spec(spec: dict) -> BlackBoxProblem:
    kind = spec.get("kind")
    noise = float(spec.get("noise_std", 0.0))
    if kind == "toy":
        return make_toy_problem(noise)
    if kind == "synthetic":
        funcs = tuple(gp.FunctionSample.from_dict(f) for f in spec["functions"])
        K, C = int(spec["K"]), int(spec["C"])
        lo, hi = spec["bounds"]
        seed = spec.get("seed")
        name = f"synthetic-{seed}" if seed is not None else "synthetic"
        return BlackBoxProblem(BoxDomain(tuple(lo), tuple(hi)), funcs[:K], funcs[K:K + C], noise, name, dict(spec))
    raise ValueError(f"unknown problem kind {kind!r}")


def problem_from_json(text: str) -> BlackBoxProblem:
    return problem_from_spec(json.loads(text))


def save_problem(problem: BlackBoxProblem, path) -> None:
    with open(path, "w") as fh:
        fh.write(problem_to_json(problem))


def load_problem(path) -> BlackBoxProblem:
    with open(path) as fh:
        return problem_from_json(fh.read())


# --- ground truth ------------------------------------------------------------------


def default_grid_size(d: int) -> int:
    return 10_000 if d <= 3 else max(1000, int(10_000 * 3 / d))


@dataclass
class GroundTruth:
    grid: np.ndarray
    pareto_x: np.ndarray
    pareto_front: np.ndarray
    hv_star: float
    reference_point: np.ndarray
    problem_id: str = ""


def reference_from_values(F: np.ndarray, margin: float = 0.01) -> np.ndarray:
    hi = F.max(axis=0)
    span = hi - F.min(axis=0)
    span = np.where(span > 0, span, np.maximum(np.abs(hi), 1.0))
    return hi + margin * span


def compute_ground_truth(problem: BlackBoxProblem, grid_size: int | None = None, rng=0) -> GroundTruth:
    """True feasible front of ``problem`` on a quasi-random grid.

    The reference point is the per-objective maximum over feasible grid
    values plus 1% of the objective's range.
    """
    n = default_grid_size(problem.d) if grid_size is None else int(grid_size)
    grid = quasi_random(problem.domain, n, rng)
    Y = problem.true_values(grid)
    F, Cv = Y[:, : problem.K], Y[:, problem.K:]
    feasible = np.all(Cv >= 0.0, axis=1) if problem.C else np.ones(n, dtype=bool)
    idx = np.flatnonzero(feasible)
    if idx.size == 0:
        raise EmptyFeasibleSetError("no feasible point on the ground-truth grid")
    ref = reference_from_values(F[idx])
    front_idx = idx[pareto_front(F[idx])]
    front = F[front_idx]
    return GroundTruth(grid, grid[front_idx], front, hypervolume(front, ref), ref, problem.problem_id)
