"""Dominance, Pareto-set extraction, hypervolume and the gap metric.

All objectives are minimized. Constraint values are feasible when >= 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels


class InfeasibleSampleError(RuntimeError):
    """Raised when no grid point satisfies the sampled constraints."""


@dataclass
class ParetoSample:
    """One Monte Carlo sample of the feasible Pareto set."""

    points: np.ndarray  # (P, d)
    f_values: np.ndarray  # (P, K)
    c_values: np.ndarray  # (P, C)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class Front:
    objectives: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __len__(self) -> int:
        return self.objectives.shape[0]


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a <= b) and np.any(a < b))


def pareto_front(vectors) -> np.ndarray:
    """Indices (ascending) of the non-dominated rows of ``vectors``.

    Duplicated front vectors are all kept, since equal vectors do not
    dominate each other.
    """
    Y = np.asarray(vectors, dtype=float)
    if Y.size == 0:
        return np.zeros(0, dtype=int)
    if Y.ndim == 1:
        Y = Y[:, None]
    return np.flatnonzero(kernels.nondominated_mask(Y))


def extract_pareto_sample(f_samples, c_samples, grid, cap: int = 50, rng=None) -> ParetoSample:
    """Solve one sampled problem by grid search.

    Grid points with any sampled constraint strictly negative are discarded,
    the non-dominated remainder is returned, and a uniform random subset of
    size ``cap`` is kept when the front is larger.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise ValueError("grid must be non-empty")
    F = np.column_stack([f(grid) for f in f_samples])
    if len(c_samples):
        Cv = np.column_stack([c(grid) for c in c_samples])
        feasible = np.all(Cv >= 0.0, axis=1)
    else:
        Cv = np.zeros((grid.shape[0], 0))
        feasible = np.ones(grid.shape[0], dtype=bool)
    idx = np.flatnonzero(feasible)
    if idx.size == 0:
        raise InfeasibleSampleError("sampled constraints are negative on the whole grid")
    idx = idx[pareto_front(F[idx])]
    if idx.size > cap:
        rng = np.random.default_rng(rng)
        idx = np.sort(rng.choice(idx, size=cap, replace=False))
    return ParetoSample(points=grid[idx].copy(), f_values=F[idx], c_values=Cv[idx])


def _hypervolume_3d(P: np.ndarray, ref: np.ndarray) -> float:
    # sweep along the third objective; each slab has the 2-D area of the
    # points already passed
    P = P[np.argsort(P[:, 2], kind="stable")]
    vol = 0.0
    for i in range(P.shape[0]):
        top = P[i + 1, 2] if i + 1 < P.shape[0] else ref[2]
        depth = top - P[i, 2]
        if depth > 0.0:
            vol += kernels.hypervolume_2d(P[: i + 1, :2], ref[:2]) * depth
    return float(vol)


def hypervolume(front, reference) -> float:
    """Exact hypervolume dominated by ``front`` w.r.t. ``reference``.

    Points not strictly better than the reference in every objective add
    nothing and are dropped. Supports two or three objectives.
    """
    ref = np.asarray(reference, dtype=float)
    P = np.asarray(front.objectives if isinstance(front, Front) else front, dtype=float)
    if P.size == 0:
        return 0.0
    P = np.atleast_2d(P)
    K = P.shape[1]
    if ref.shape != (K,):
        raise ValueError(f"reference has shape {ref.shape}, expected ({K},)")
    if K == 1:
        return float(max(0.0, ref[0] - P[:, 0].min()))
    if K > 3:
        raise NotImplementedError("exact hypervolume is only implemented for K <= 3")
    P = P[np.all(P < ref, axis=1)]
    if P.shape[0] == 0:
        return 0.0
    if K == 2:
        return float(kernels.hypervolume_2d(P, ref))
    return _hypervolume_3d(P, ref)


def log_relative_hv_gap(hv_star: float, hv_rec: float, floor: float = 1e-12) -> float:
    """log of the relative hypervolume shortfall of a recommendation."""
    if not hv_star > 0.0:
        raise ValueError(f"hv_star must be positive, got {hv_star}")
    hv_rec = min(max(hv_rec, 0.0), hv_star)
    return math.log(max((hv_star - hv_rec) / hv_star, floor))


def write_front_csv(path, objectives) -> None:
    objectives = np.atleast_2d(np.asarray(objectives, dtype=float))
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{k + 1}" for k in range(objectives.shape[1])])
        for row in objectives:
            w.writerow([repr(float(v)) for v in row])


def read_front_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) <= 1:
        return np.zeros((0, len(rows[0]) if rows else 0))
    return np.array([[float(v) for v in r] for r in rows[1:]])
