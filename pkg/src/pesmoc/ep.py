"""Expectation propagation for the Pareto-conditioned predictive distribution.

Every non-Gaussian factor is approximated by Gaussian sites that act on a
single linear projection of one function's joint Gaussian:

* ``Phi_j(x*)``: a 1-D site on ``c_j(x*)``.
* ``Omega(x', x*)``: C 1-D sites on ``c_j(x')`` and K 2-D sites on
  ``(f_k(x'), f_k(x*))``. Moment matching a step on ``f_k(x*) - f_k(x')``
  only changes the 2-D Gaussian along ``u = (-1, 1)``, so each 2-D site has
  precision ``tau * u u^T`` and linear term ``nu * u``; they are stored in
  that rank-one form.

Fixed factors (those not involving the candidate) are refined with damped
parallel EP; the candidate's ``Omega(x, x*)`` factors get a single undamped
pass from the fixed posterior.

Covariances are never inverted directly: with site precision matrix ``Lam``
and linear term ``eta`` for one function, ``B = (I + Lam S0)^-1 Lam`` gives
``S = S0 - S0 B S0`` and ``mu = mu0 + S0 beta`` with
``beta = eta - B (mu0 + S0 eta)``; ``B`` and ``beta`` also extend the
posterior to new inputs through the GP cross-covariances.
"""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .gp import GPPosterior, NumericalError
from .pareto import ParetoSample

LOG_Z_MIN = math.log(1e-300)
DEDUP_TOL = 1e-10
PRIOR_JITTER = 1e-10
PD_JITTER = 1e-9


# --- factor-level computations ------------------------------------------------


def phi_partition(cavity_mean: float, cavity_var: float) -> float:
    """E[Theta(c)] under the cavity N(mean, var)."""
    if not cavity_var > 0:
        raise ValueError("cavity variance must be positive")
    lz, _, _ = kernels.phi_derivatives(np.array([cavity_mean]), np.array([cavity_var]))
    return float(np.exp(lz[0]))


def omega_partition(c_cavities, f_cavities) -> float:
    """E[Omega(x', x*)] under independent cavities.

    ``c_cavities`` is a sequence of C ``(mean, var)`` pairs for ``c_j(x')``;
    ``f_cavities`` a sequence of K ``(mean2, cov2)`` bivariate Gaussians over
    ``(f_k(x'), f_k(x*))``.
    """
    mc, vc = _c_arrays(c_cavities)
    md, vd = _d_arrays(f_cavities)
    log_z, *_ = kernels.omega_derivatives(mc[None], vc[None], md[None], vd[None])
    return float(np.exp(log_z[0]))


def _c_arrays(c_cavities):
    c = np.asarray(c_cavities, dtype=float).reshape(-1, 2)
    if np.any(c[:, 1] <= 0):
        raise ValueError("constraint cavity variances must be positive")
    return c[:, 0].copy(), c[:, 1].copy()


def _d_arrays(f_cavities):
    md, vd = [], []
    for mean, cov in f_cavities:
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        if cov[0, 0] < 0 or cov[1, 1] < 0 or cov[0, 0] * cov[1, 1] < cov[0, 1] ** 2 - 1e-15:
            raise ValueError("invalid bivariate cavity covariance")
        md.append(mean[1] - mean[0])
        vd.append(max(cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1], 0.0))
    return np.array(md), np.array(vd)


def _site_from_derivatives(m, v, g, H):
    """Natural parameters of the site matching the tilted moments.

    Returns ``(tau, nu, ok)``; ``ok`` is False where the tilted variance is
    not positive.
    """
    denom = 1.0 + v * H
    ok = denom > 0
    safe = np.where(ok, denom, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        tau = -H / safe
        nu = g + tau * (m + v * g)
    ok = ok & np.isfinite(tau) & np.isfinite(nu)
    return np.where(ok, tau, 0.0), np.where(ok, nu, 0.0), ok


@dataclass
class SiteUpdate:
    """Result of moment matching one factor against its cavity."""

    log_z: float
    tau: np.ndarray
    nu: np.ndarray
    tilted_mean: np.ndarray
    tilted_var: np.ndarray
    skipped: bool = False


def damp(old, new, damping: float = 0.5):
    return old + damping * (np.asarray(new) - old)


def phi_site_update(cavity_mean: float, cavity_var: float) -> SiteUpdate:
    if not cavity_var > 0:
        raise ValueError("cavity variance must be positive")
    m = np.array([cavity_mean], dtype=float)
    v = np.array([cavity_var], dtype=float)
    lz, g, H = kernels.phi_derivatives(m, v)
    tau, nu, ok = _site_from_derivatives(m, v, g, H)
    skipped = bool(lz[0] < LOG_Z_MIN or not ok[0])
    return SiteUpdate(float(lz[0]), tau, nu, m + v * g, v + v * v * H, skipped)


@dataclass
class OmegaSiteUpdate:
    log_z: float
    c_tau: np.ndarray  # (C,)
    c_nu: np.ndarray
    c_mean: np.ndarray  # tilted marginal moments of c_j(x')
    c_var: np.ndarray
    f_tau: np.ndarray  # (K,) rank-one precision along (-1, 1)
    f_nu: np.ndarray
    f_mean: list  # tilted 2-vector mean of (f_k(x'), f_k(x*))
    f_cov: list  # tilted 2x2 covariance
    skipped: bool = False

    def V_tilde(self, k: int) -> np.ndarray:
        u = np.array([-1.0, 1.0])
        return self.f_tau[k] * np.outer(u, u)

    def m_tilde(self, k: int) -> np.ndarray:
        return self.f_nu[k] * np.array([-1.0, 1.0])


def omega_site_update(c_cavities, f_cavities) -> OmegaSiteUpdate:
    """Moment-match one Omega factor; tilted moments per function block."""
    mc, vc = _c_arrays(c_cavities) if len(c_cavities) else (np.zeros(0), np.zeros(0))
    md, vd = _d_arrays(f_cavities)
    lz, gc, Hc, gd, Hd = kernels.omega_derivatives(
        mc.reshape(1, -1), vc.reshape(1, -1), md[None], vd[None]
    )
    gc, Hc, gd, Hd = gc[0], Hc[0], gd[0], Hd[0]
    c_tau, c_nu, ok_c = _site_from_derivatives(mc, vc, gc, Hc)
    f_tau, f_nu, ok_f = _site_from_derivatives(md, vd, gd, Hd)
    u = np.array([-1.0, 1.0])
    f_mean, f_cov = [], []
    for k, (mean, cov) in enumerate(f_cavities):
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        Su = cov @ u
        f_mean.append(mean + Su * gd[k])
        f_cov.append(cov + np.outer(Su, Su) * Hd[k])
    skipped = bool(lz[0] < LOG_Z_MIN or not (ok_c.all() and ok_f.all()))
    return OmegaSiteUpdate(
        float(lz[0]), c_tau, c_nu, mc + vc * gc, vc + vc * vc * Hc, f_tau, f_nu, f_mean, f_cov, skipped
    )


def site_update(factor: str, *cavity):
    """Dispatch to :func:`phi_site_update` or :func:`omega_site_update`."""
    if factor == "phi":
        return phi_site_update(*cavity)
    if factor == "omega":
        return omega_site_update(*cavity)
    raise ValueError(f"unknown factor type {factor!r}")


# --- factor graph --------------------------------------------------------------


@dataclass
class FactorGraph:
    """Joint GP Gaussians over {x_n} U X* (U {x}) for every function.

    ``points[:n_fixed]`` are the data and Pareto coordinates; when a
    candidate was supplied and does not coincide with an existing point it
    sits at index ``n_fixed``. Function order: K objectives then C
    constraints.
    """

    points: np.ndarray
    n_data: int
    n_fixed: int
    star_idx: np.ndarray
    gps: list
    K: int
    C: int
    means: np.ndarray  # (K+C, q)
    covs: np.ndarray  # (K+C, q, q)
    noise: np.ndarray  # (K+C,)
    candidate_index: int | None = None

    @property
    def q(self) -> int:
        return self.points.shape[0]

    @property
    def P(self) -> int:
        return self.star_idx.shape[0]


def _match(points, x, tol=DEDUP_TOL):
    if points.shape[0] == 0:
        return -1
    d = np.sqrt(((points - x) ** 2).sum(axis=1))
    i = int(np.argmin(d))
    return i if d[i] < tol else -1


def build_factor_graph(gps, pareto: ParetoSample | np.ndarray, X_data, x=None, K: int | None = None) -> FactorGraph:
    """Joint predictive Gaussians over the data, Pareto and candidate points.

    ``gps`` holds K+C posteriors (objectives first). ``K`` defaults to the
    Pareto sample's objective count.
    """
    if isinstance(pareto, ParetoSample):
        X_star = np.atleast_2d(pareto.points)
        K = pareto.f_values.shape[1] if K is None else K
    else:
        X_star = np.atleast_2d(np.asarray(pareto, dtype=float))
        if K is None:
            raise ValueError("K is required when pareto is a plain array")
    C = len(gps) - K
    X_data = np.atleast_2d(np.asarray(X_data, dtype=float)).reshape(-1, gps[0].dims)
    pts = [row for row in X_data]
    n_data = len(pts)
    star = []
    for xs in X_star:
        i = _match(np.array(pts) if pts else np.zeros((0, X_data.shape[1])), xs)
        if i < 0:
            pts.append(xs)
            i = len(pts) - 1
        if i not in star:
            star.append(i)
    n_fixed = len(pts)
    cand = None
    if x is not None:
        x = np.asarray(x, dtype=float).reshape(-1)
        cand = _match(np.array(pts), x)
        if cand < 0:
            pts.append(x)
            cand = len(pts) - 1
    points = np.array(pts)
    q = points.shape[0]
    G = len(gps)
    means = np.empty((G, q))
    covs = np.empty((G, q, q))
    for g, post in enumerate(gps):
        means[g] = post.mean(points)
        S = post.covariance(points)
        S = 0.5 * (S + S.T) + PRIOR_JITTER * post.hp.amplitude * np.eye(q)
        covs[g] = S
    noise = np.array([post.hp.noise_var for post in gps])
    return FactorGraph(points, n_data, n_fixed, np.array(star, dtype=int), list(gps), K, C, means, covs, noise, cand)


# --- EP state ----------------------------------------------------------------------


@dataclass
class PhiSite:
    v_tilde: float
    m_tilde: float
    target: tuple  # (constraint j, coordinate of x*)


@dataclass
class OmegaSite:
    V_tilde: list  # K 2x2 matrices over (f_k(x'), f_k(x*))
    m_tilde: list  # K 2-vectors
    v_tilde_c: np.ndarray  # C precisions on c_j(x')
    m_tilde_c: np.ndarray
    pair: tuple  # (coordinate of x', coordinate of x*)


@dataclass
class EPState:
    graph: FactorGraph  # restricted to the fixed coordinates
    phi_tau: np.ndarray  # (P, C)
    phi_nu: np.ndarray
    pairs: np.ndarray  # (F, 2): coordinate of x', coordinate of x*
    oc_tau: np.ndarray  # (F, C)
    oc_nu: np.ndarray
    of_tau: np.ndarray  # (F, K)
    of_nu: np.ndarray
    post_mean: np.ndarray  # (K+C, q)
    post_cov: np.ndarray  # (K+C, q, q)
    B: np.ndarray  # (K+C, q, q)
    beta: np.ndarray  # (K+C, q)
    converged: bool = False
    iterations: int = 0
    max_delta: float = 0.0
    history: list = field(default_factory=list)

    def phi_site(self, s: int, j: int) -> PhiSite:
        return PhiSite(float(self.phi_tau[s, j]), float(self.phi_nu[s, j]), (j, int(self.graph.star_idx[s])))

    def omega_site(self, f: int) -> OmegaSite:
        u = np.array([-1.0, 1.0])
        return OmegaSite(
            [self.of_tau[f, k] * np.outer(u, u) for k in range(self.graph.K)],
            [self.of_nu[f, k] * u for k in range(self.graph.K)],
            self.oc_tau[f].copy(),
            self.oc_nu[f].copy(),
            (int(self.pairs[f, 0]), int(self.pairs[f, 1])),
        )


def _fixed_graph(graph: FactorGraph) -> FactorGraph:
    n = graph.n_fixed
    if graph.q == n:
        return graph
    return FactorGraph(
        graph.points[:n], graph.n_data, n, graph.star_idx, graph.gps, graph.K, graph.C,
        graph.means[:, :n], graph.covs[:, :n, :n], graph.noise, None,
    )


def _omega_pairs(q: int, star_idx: np.ndarray) -> np.ndarray:
    # sorted by (x', x*) coordinate
    pairs = [(i, s) for i in range(q) for s in star_idx if i != s]
    return np.array(pairs, dtype=int).reshape(-1, 2)


def _accumulate(q, rows, cols, w):
    return np.bincount(rows * q + cols, weights=w, minlength=q * q).reshape(q, q)


def _site_totals(state_arrays, graph: FactorGraph, g: int):
    """Site precision matrix and linear term for function ``g``."""
    phi_tau, phi_nu, pairs, oc_tau, oc_nu, of_tau, of_nu = state_arrays
    q, K = graph.n_fixed, graph.K
    ip, ist = pairs[:, 0], pairs[:, 1]
    if g < K:
        t, v = of_tau[:, g], of_nu[:, g]
        rows = np.concatenate([ist, ip, ist, ip])
        cols = np.concatenate([ist, ip, ip, ist])
        w = np.concatenate([t, t, -t, -t])
        Lam = _accumulate(q, rows, cols, w)
        eta = np.bincount(ist, v, q) - np.bincount(ip, v, q)
    else:
        j = g - K
        star = graph.star_idx
        diag_idx = np.concatenate([star, ip])
        t = np.concatenate([phi_tau[:, j], oc_tau[:, j]])
        v = np.concatenate([phi_nu[:, j], oc_nu[:, j]])
        Lam = np.diag(np.bincount(diag_idx, t, q))
        eta = np.bincount(diag_idx, v, q)
    return Lam, eta


def _posterior(mu0, S0, Lam, eta, amplitude):
    q = mu0.shape[0]
    M = np.eye(q) + Lam @ S0
    try:
        B = np.linalg.solve(M, Lam)
    except np.linalg.LinAlgError:
        return None
    B = 0.5 * (B + B.T)
    S0B = S0 @ B
    S = S0 - S0B @ S0
    S = 0.5 * (S + S.T)
    beta = eta - B @ (mu0 + S0 @ eta)
    mu = mu0 + S0 @ beta
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(mu))):
        return None
    try:
        np.linalg.cholesky(S + PD_JITTER * amplitude * np.eye(q))
    except np.linalg.LinAlgError:
        return None
    if np.any(np.diag(S) <= 0):
        return None
    return mu, S, B, beta


def _cavities(m, v, tau, nu):
    prec = 1.0 / np.maximum(v, 1e-300) - tau
    ok = (prec > 0) & (v > 0)
    vc = np.where(ok, 1.0 / np.where(ok, prec, 1.0), 1.0)
    mc = vc * (m / np.maximum(v, 1e-300) - nu)
    return mc, vc, ok


def _debug_stream():
    if os.environ.get("PESMOC_DEBUG_EP", "") != "1":
        return None
    return sys.stderr


def ep_converge_fixed(graph: FactorGraph, max_iters: int = 200, tol: float = 1e-4,
                      damping: float = 0.5) -> EPState:
    """Refine all candidate-independent sites until they stop changing."""
    graph = _fixed_graph(graph)
    q, K, C, P = graph.n_fixed, graph.K, graph.C, graph.P
    G = K + C
    pairs = _omega_pairs(q, graph.star_idx)
    F = pairs.shape[0]
    arrays = [np.zeros((P, C)), np.zeros((P, C)), pairs, np.zeros((F, C)), np.zeros((F, C)),
              np.zeros((F, K)), np.zeros((F, K))]
    amps = np.array([p.hp.amplitude for p in graph.gps])
    post = []
    for g in range(G):
        res = _posterior(graph.means[g], graph.covs[g], np.zeros((q, q)), np.zeros(q), amps[g])
        if res is None:
            raise NumericalError("prior joint covariance is not positive definite")
        post.append(res)

    converged = P == 0
    it = 0
    max_delta = 0.0
    history = []
    ip, ist = pairs[:, 0], pairs[:, 1]
    while not converged and it < max_iters:
        it += 1
        phi_tau, phi_nu, _, oc_tau, oc_nu, of_tau, of_nu = arrays
        mu = np.array([p[0] for p in post])
        Sd = np.array([np.diag(p[1]) for p in post])
        # phi and omega-constraint cavities, (P, C) and (F, C)
        star = graph.star_idx
        pm = mu[K:, star].T
        pv = Sd[K:, star].T
        pmc, pvc, pok = _cavities(pm, pv, phi_tau, phi_nu)
        cm = mu[K:, ip].T
        cv = Sd[K:, ip].T
        cmc, cvc, cok = _cavities(cm, cv, oc_tau, oc_nu)
        # objective differences f_k(x*) - f_k(x'), (F, K)
        dm = (mu[:K, ist] - mu[:K, ip]).T
        dv = np.array([post[k][1][ist, ist] + post[k][1][ip, ip] - 2.0 * post[k][1][ist, ip] for k in range(K)]).T
        dv = dv.reshape(F, K)
        dmc, dvc, dok = _cavities(dm, dv, of_tau, of_nu)

        lz_p, g_p, H_p = kernels.phi_derivatives(pmc, pvc)
        nt_p, nn_p, ok_p = _site_from_derivatives(pmc, pvc, g_p, H_p)
        ok_p &= pok & (lz_p >= LOG_Z_MIN)

        lz_o, gc, Hc, gd, Hd = kernels.omega_derivatives(cmc, cvc, dmc, dvc)
        nt_c, nn_c, ok_c = _site_from_derivatives(cmc, cvc, gc, Hc)
        nt_f, nn_f, ok_f = _site_from_derivatives(dmc, dvc, gd, Hd)
        ok_o = (lz_o >= LOG_Z_MIN) & cok.all(axis=1) & dok.all(axis=1) & ok_c.all(axis=1) & ok_f.all(axis=1)

        targets = [
            np.where(ok_p, nt_p, phi_tau), np.where(ok_p, nn_p, phi_nu),
            np.where(ok_o[:, None], nt_c, oc_tau), np.where(ok_o[:, None], nn_c, oc_nu),
            np.where(ok_o[:, None], nt_f, of_tau), np.where(ok_o[:, None], nn_f, of_nu),
        ]
        olds = [phi_tau, phi_nu, oc_tau, oc_nu, of_tau, of_nu]
        step = damping
        while True:
            cand = [damp(o, t, step) for o, t in zip(olds, targets)]
            trial = [cand[0], cand[1], pairs, cand[2], cand[3], cand[4], cand[5]]
            new_post = []
            for g in range(G):
                Lam, eta = _site_totals(trial, graph, g)
                res = _posterior(graph.means[g], graph.covs[g], Lam, eta, amps[g])
                if res is None:
                    break
                new_post.append(res)
            if len(new_post) == G:
                break
            step *= 0.5
            if step < 1e-4:
                cand = None
                break
        if cand is None:
            history.append({"iter": it, "max_delta": float("nan"), "damping": step})
            break
        deltas = [np.max(np.abs(c - o)) if c.size else 0.0 for c, o in zip(cand, olds)]
        max_delta = float(max(deltas))
        arrays = trial
        post = new_post
        history.append({"iter": it, "max_delta": max_delta, "damping": step})
        converged = max_delta < tol

    state = EPState(
        graph,
        arrays[0], arrays[1], pairs, arrays[3], arrays[4], arrays[5], arrays[6],
        np.array([p[0] for p in post]).reshape(G, q),
        np.array([p[1] for p in post]).reshape(G, q, q),
        np.array([p[2] for p in post]).reshape(G, q, q),
        np.array([p[3] for p in post]).reshape(G, q),
        converged, it, max_delta, history,
    )
    stream = _debug_stream()
    if stream is not None:
        dump_state(state, stream)
    return state


def dump_state(state: EPState, stream) -> None:
    """Write site parameters and convergence metrics as one JSON line."""
    rec = {
        "event": "ep_fixed",
        "q": int(state.graph.n_fixed),
        "n_pareto": int(state.graph.P),
        "n_omega": int(state.pairs.shape[0]),
        "iterations": state.iterations,
        "converged": bool(state.converged),
        "max_delta": state.max_delta,
        "history": state.history,
        "phi_tau": state.phi_tau.tolist(),
        "phi_nu": state.phi_nu.tolist(),
        "omega_pairs": state.pairs.tolist(),
        "omega_c_tau": state.oc_tau.tolist(),
        "omega_c_nu": state.oc_nu.tolist(),
        "omega_f_tau": state.of_tau.tolist(),
        "omega_f_nu": state.of_nu.tolist(),
    }
    stream.write(json.dumps(rec) + "\n")
    stream.flush()


# --- candidate conditioning --------------------------------------------------------


@dataclass
class ConditionedPrediction:
    """Per-function conditioned moments at a candidate, noise included in
    the variances (objectives first, then constraints)."""

    mean: np.ndarray
    var: np.ndarray
    K: int

    @property
    def v_objectives(self) -> np.ndarray:
        return self.var[: self.K]

    @property
    def s_constraints(self) -> np.ndarray:
        return self.var[self.K:]


def fixed_marginals(state: EPState, X, include_noise: bool = False):
    """Moments at ``X`` under the fixed-site posterior (no candidate factors).

    Returns ``(mean, var, cross)`` with shapes (G, n), (G, n), (G, n, P);
    ``cross`` holds covariances with the Pareto coordinates.
    """
    graph = state.graph
    X = np.atleast_2d(np.asarray(X, dtype=float))
    G = graph.K + graph.C
    n = X.shape[0]
    star = graph.star_idx
    mean = np.empty((G, n))
    var = np.empty((G, n))
    cross = np.empty((G, n, graph.P))
    for g, post in enumerate(graph.gps):
        m0, v0 = post.predict_many(X)
        Kxq = post.covariance(X, graph.points)
        KB = Kxq @ state.B[g]
        var[g] = v0 - np.einsum("ij,ij->i", KB, Kxq)
        mean[g] = m0 + Kxq @ state.beta[g]
        cross[g] = Kxq[:, star] - KB @ graph.covs[g][:, star]
        if include_noise:
            var[g] += graph.noise[g]
    return mean, np.maximum(var, 0.0), cross


def condition_candidates(state: EPState, X, chunk: int = 256):
    """Conditioned means and variances (noise added) at the rows of ``X``.

    Returns arrays of shape (n, K+C). ``state`` is not modified.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    G = state.graph.K + state.graph.C
    out_m = np.empty((n, G))
    out_v = np.empty((n, G))
    for s in range(0, n, chunk):
        m, v = _condition_block(state, X[s : s + chunk])
        out_m[s : s + chunk] = m
        out_v[s : s + chunk] = v
    return out_m, out_v


def _condition_block(state: EPState, X):
    graph = state.graph
    K, C, P = graph.K, graph.C, graph.P
    n = X.shape[0]
    mean, var, cross = fixed_marginals(state, X)
    new_m = mean.T.copy()
    new_v = var.T.copy()
    if P > 0:
        star = graph.star_idx
        m_star = state.post_mean[:, star]  # (G, P)
        v_star = np.array([np.diag(state.post_cov[g])[star] for g in range(K + C)])
        # candidate factor cavities are the fixed marginals themselves
        mc = np.repeat(mean[K:].T[:, None, :], P, axis=1).reshape(n * P, C)
        vc = np.repeat(var[K:].T[:, None, :], P, axis=1).reshape(n * P, C)
        md = (m_star[:K].T[None, :, :] - mean[:K].T[:, None, :])  # (n, P, K)
        vd = v_star[:K].T[None, :, :] + var[:K].T[:, None, :] - 2.0 * np.transpose(cross[:K], (1, 2, 0))
        vd = np.maximum(vd, 0.0)
        lz, gc, Hc, gd, Hd = kernels.omega_derivatives(mc, vc, md.reshape(n * P, K), vd.reshape(n * P, K))
        tc, nc, okc = _site_from_derivatives(mc, vc, gc, Hc)
        tf, nf, okf = _site_from_derivatives(md.reshape(n * P, K), vd.reshape(n * P, K), gd, Hd)
        ok = (lz >= LOG_Z_MIN) & okc.all(axis=1) & okf.all(axis=1)
        tc = np.where(ok[:, None], tc, 0.0).reshape(n, P, C)
        nc = np.where(ok[:, None], nc, 0.0).reshape(n, P, C)
        tf = np.where(ok[:, None], tf, 0.0).reshape(n, P, K)
        nf = np.where(ok[:, None], nf, 0.0).reshape(n, P, K)

        for j in range(C):
            g = K + j
            v0 = var[g]
            with np.errstate(divide="ignore", invalid="ignore"):
                prec = 1.0 / v0 + tc[:, :, j].sum(axis=1)
                vnew = 1.0 / prec
                mnew = vnew * (mean[g] / v0 + nc[:, :, j].sum(axis=1))
            good = (v0 > 0) & (prec > 0) & np.isfinite(vnew) & np.isfinite(mnew)
            new_v[:, g] = np.where(good, vnew, v0)
            new_m[:, g] = np.where(good, mnew, mean[g])

        eye = np.eye(P)
        for k in range(K):
            Sss = state.post_cov[k][np.ix_(star, star)]
            c = cross[k]  # (n, P)
            vx = var[k]
            D = Sss[None] - c[:, :, None] - c[:, None, :] + vx[:, None, None]
            gvec = c - vx[:, None]
            T = tf[:, :, k]
            A = eye[None] + T[:, :, None] * D
            rhs = np.stack([T * gvec, nf[:, :, k] - T * md[:, :, k]], axis=2)
            try:
                sol = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                sol = np.stack([_safe_solve(A[i], rhs[i]) for i in range(n)])
            vnew = vx - np.einsum("ip,ip->i", gvec, sol[:, :, 0])
            mnew = mean[k] + np.einsum("ip,ip->i", gvec, sol[:, :, 1])
            good = (vnew > 0) & np.isfinite(vnew) & np.isfinite(mnew)
            new_v[:, k] = np.where(good, vnew, vx)
            new_m[:, k] = np.where(good, mnew, mean[k])

        # candidates coinciding with a fixed coordinate already carry its factors
        d2 = ((X[:, None, :] - graph.points[None, :, :]) ** 2).sum(axis=2)
        hit = np.sqrt(d2.min(axis=1)) < DEDUP_TOL
        if np.any(hit):
            idx = d2.argmin(axis=1)[hit]
            new_m[hit] = state.post_mean[:, idx].T
            new_v[hit] = np.array([state.post_cov[g][idx, idx] for g in range(K + C)]).T
    new_v = np.maximum(new_v, 0.0) + graph.noise[None, :]
    return new_m, new_v


def _safe_solve(A, b):
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.zeros_like(b)


def condition_candidate(state: EPState, graph: FactorGraph | None = None, x=None) -> ConditionedPrediction:
    """Conditioned predictive moments at one candidate ``x``.

    ``graph`` is accepted for symmetry with :func:`build_factor_graph`; the
    fixed graph stored in ``state`` is what is used.
    """
    if x is None:
        raise ValueError("candidate x is required")
    m, v = condition_candidates(state, np.asarray(x, dtype=float).reshape(1, -1))
    return ConditionedPrediction(m[0], v[0], state.graph.K)
