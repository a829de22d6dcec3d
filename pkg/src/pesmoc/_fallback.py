"""Pure numpy implementations of the hot kernels.

Same call signatures as the compiled ``_kernels`` extension; used when the
extension is unavailable or ``PESMOC_PURE_PYTHON=1`` is set.
"""

import numpy as np
from scipy.special import log_ndtr

# Variances below this are treated as point masses (hard step evaluation).
VAR_EPS = 1e-14
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def nondominated_mask(Y):
    """Boolean mask of the rows of ``Y`` not dominated by any other row.

    Minimization convention. Rows are visited in lexicographic order, so a
    row can only be dominated by an earlier one and it is enough to compare
    against the front found so far.
    """
    Y = np.ascontiguousarray(Y, dtype=float)
    n = Y.shape[0]
    mask = np.zeros(n, dtype=bool)
    if n == 0:
        return mask
    order = np.lexsort(Y.T[::-1])
    front = np.empty_like(Y)
    size = 0
    for i in order:
        y = Y[i]
        if size:
            F = front[:size]
            if np.any(np.all(F <= y, axis=1) & np.any(F < y, axis=1)):
                continue
        front[size] = y
        size += 1
        mask[i] = True
    return mask


def hypervolume_2d(points, ref):
    """Area dominated by ``points`` (n x 2) and bounded by ``ref``."""
    P = np.asarray(points, dtype=float)
    r0, r1 = float(ref[0]), float(ref[1])
    if P.size == 0:
        return 0.0
    P = P[(P[:, 0] < r0) & (P[:, 1] < r1)]
    if P.shape[0] == 0:
        return 0.0
    P = P[np.lexsort((P[:, 1], P[:, 0]))]
    area = 0.0
    level = r1
    for p0, p1 in P:
        if p1 < level:
            area += (r0 - p0) * (level - p1)
            level = p1
    return float(area)


def _inv_mills(alpha, log_cdf):
    return np.exp(-0.5 * alpha * alpha - _LOG_SQRT_2PI - log_cdf)


def _step_terms(m, v):
    """log P(x >= 0), d/dm and d2/dm2 of it, for x ~ N(m, v), elementwise."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    hard = v < VAR_EPS
    sv = np.sqrt(np.where(hard, 1.0, v))
    alpha = m / sv
    lc = log_ndtr(alpha)
    lam = _inv_mills(alpha, lc)
    r = lam / sv
    h = -lam * (lam + alpha) / np.where(hard, 1.0, v)
    if np.any(hard):
        lc = np.where(hard, np.where(m >= 0.0, 0.0, -np.inf), lc)
        r = np.where(hard, 0.0, r)
        h = np.where(hard, 0.0, h)
    return lc, r, h


def phi_derivatives(m, v):
    """Log partition and its first two mean-derivatives for Theta(c) factors."""
    return _step_terms(m, v)


def omega_derivatives(mc, vc, md, vd):
    """Log partition and mean-derivatives for a batch of Omega factors.

    ``mc, vc`` are (F, C) cavity moments of the constraints at x'; ``md, vd``
    are (F, K) cavity moments of the differences f_k(x*) - f_k(x'). The factor
    is 1 - prod_j Theta(c_j) prod_k Theta(d_k).
    """
    mc = np.atleast_2d(np.asarray(mc, dtype=float))
    vc = np.atleast_2d(np.asarray(vc, dtype=float))
    md = np.atleast_2d(np.asarray(md, dtype=float))
    vd = np.atleast_2d(np.asarray(vd, dtype=float))
    lc, rc, hc = _step_terms(mc, vc)
    ld, rd, hd = _step_terms(md, vd)
    log_ab = lc.sum(axis=1) + ld.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = -np.expm1(log_ab)
        log_z = np.log(z)
        rho = np.exp(log_ab - log_z)
    rho = np.where(np.isfinite(rho), rho, 0.0)[:, None]
    gc = -rho * rc
    Hc = -rho * (rc * rc + hc) - rho * rho * rc * rc
    gd = -rho * rd
    Hd = -rho * (rd * rd + hd) - rho * rho * rd * rd
    return log_z, gc, Hc, gd, Hd
