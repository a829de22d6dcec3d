"""Gaussian process regression with a Matérn 5/2 ARD kernel.

Exact posteriors, slice-sampled hyperparameters and random-feature function
draws (prior and posterior) used to sample Pareto sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

SQRT5 = math.sqrt(5.0)
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
VAR_FLOOR = 1e-12
NOISE_FLOOR = 1e-8
MATERN_DOF = 5.0  # 2 * nu for nu = 5/2


class NumericalError(RuntimeError):
    """Kernel matrix could not be factorized even after jitter escalation."""


@dataclass(frozen=True)
class HyperParams:
    amplitude: float
    lengthscales: tuple
    noise_var: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in np.atleast_1d(self.lengthscales)))
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        if any(not v > 0 for v in self.lengthscales):
            raise ValueError("lengthscales must be positive")
        if self.noise_var < 0:
            raise ValueError("noise_var must be non-negative")

    @property
    def dims(self) -> int:
        return len(self.lengthscales)

    def to_dict(self) -> dict:
        return {
            "amplitude": float(self.amplitude),
            "lengthscales": [float(v) for v in self.lengthscales],
            "noise_var": float(self.noise_var),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(float(d["amplitude"]), tuple(d["lengthscales"]), float(d.get("noise_var", 0.0)))

    def to_log_vector(self, with_noise: bool = True) -> np.ndarray:
        v = [math.log(self.amplitude)] + [math.log(l) for l in self.lengthscales]
        if with_noise:
            v.append(math.log(self.noise_var))
        return np.array(v)

    @classmethod
    def from_log_vector(cls, theta, noise_var: float | None = None) -> "HyperParams":
        theta = np.asarray(theta, dtype=float)
        if noise_var is None:
            return cls(math.exp(theta[0]), tuple(np.exp(theta[1:-1])), math.exp(theta[-1]))
        return cls(math.exp(theta[0]), tuple(np.exp(theta[1:])), noise_var)


def _scaled_dist(X1, X2, lengthscales):
    A = np.atleast_2d(X1) / lengthscales
    B = np.atleast_2d(X2) / lengthscales
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(d2, 0.0))


def kernel_matrix(X1, X2, hp: HyperParams) -> np.ndarray:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != hp.dims or X2.shape[1] != hp.dims:
        raise ValueError(f"input dimension does not match {hp.dims} lengthscales")
    r = SQRT5 * _scaled_dist(X1, X2, np.asarray(hp.lengthscales))
    return hp.amplitude * (1.0 + r + r * r / 3.0) * np.exp(-r)


def kernel(x, x2, hp: HyperParams) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != (hp.dims,) or x2.shape != (hp.dims,):
        raise ValueError(f"points must have {hp.dims} coordinates")
    r = SQRT5 * math.sqrt(float(np.sum(((x - x2) / np.asarray(hp.lengthscales)) ** 2)))
    return hp.amplitude * (1.0 + r + r * r / 3.0) * math.exp(-r)


def robust_cholesky(A: np.ndarray, scale: float | None = None):
    """Cholesky factor of ``A`` with a multiplicative jitter ladder.

    Returns ``(L, jitter)``; raises NumericalError when every rung fails.
    """
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    if scale is None:
        scale = float(np.mean(np.diag(A))) or 1.0
    for j in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(A + (j * scale) * np.eye(n))
            return L, j * scale
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("matrix is not positive definite after jitter escalation")


@dataclass
class GPPosterior:
    X_train: np.ndarray
    y_train: np.ndarray
    hp: HyperParams
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def N(self) -> int:
        return self.X_train.shape[0]

    @property
    def dims(self) -> int:
        return self.hp.dims

    def _solve_L(self, Kxn):
        return solve_triangular(self.chol, Kxn.T, lower=True, check_finite=False)

    def predict_many(self, X):
        """Posterior means and variances at the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dims:
            raise ValueError(f"expected {self.dims}-dimensional inputs")
        prior_var = np.full(X.shape[0], self.hp.amplitude)
        if self.N == 0:
            return np.zeros(X.shape[0]), prior_var
        Kxn = kernel_matrix(X, self.X_train, self.hp)
        mean = Kxn @ self.alpha
        V = self._solve_L(Kxn)
        var = prior_var - np.einsum("ij,ij->j", V, V)
        var = np.where(var < VAR_FLOOR, 0.0, var)
        return mean, var

    def covariance(self, X1, X2=None):
        """Posterior cross-covariance matrix between two point sets."""
        X1 = np.atleast_2d(np.asarray(X1, dtype=float))
        X2 = X1 if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
        K12 = kernel_matrix(X1, X2, self.hp)
        if self.N == 0:
            return K12
        V1 = self._solve_L(kernel_matrix(X1, self.X_train, self.hp))
        V2 = V1 if X2 is X1 else self._solve_L(kernel_matrix(X2, self.X_train, self.hp))
        return K12 - V1.T @ V2

    def mean(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.N == 0:
            return np.zeros(X.shape[0])
        return kernel_matrix(X, self.X_train, self.hp) @ self.alpha


def fit(X, y, hp: HyperParams) -> GPPosterior:
    X = np.atleast_2d(np.asarray(X, dtype=float)).reshape(-1, hp.dims)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("rows(X) must equal len(y)")
    Kmat = kernel_matrix(X, X, hp) + hp.noise_var * np.eye(X.shape[0])
    L, jitter = robust_cholesky(Kmat, scale=hp.amplitude)
    alpha = cho_solve((L, True), y, check_finite=False) if X.shape[0] else np.zeros(0)
    return GPPosterior(X.copy(), y.copy(), hp, L, alpha, jitter)


def predict(post: GPPosterior, x):
    mean, var = post.predict_many(np.atleast_1d(np.asarray(x, dtype=float))[None, :])
    return float(mean[0]), float(var[0])


def log_marginal_likelihood(X, y, hp: HyperParams) -> float:
    post = fit(X, y, hp)
    n = post.N
    return float(
        -0.5 * post.y_train @ post.alpha
        - np.log(np.diag(post.chol)).sum()
        - 0.5 * n * math.log(2.0 * math.pi)
    )


# --- hyperparameter sampling -------------------------------------------------


@dataclass
class Hyperpriors:
    """Independent log-normal priors on amplitude, lengthscales and noise.

    ``fixed_noise`` pins the noise variance (noiseless scenario) and removes
    it from the sampled coordinates.
    """

    ls_log_mean: np.ndarray
    amp_log_mean: float = 0.0
    amp_log_sd: float = 1.0
    ls_log_sd: float = 1.0
    noise_log_mean: float = math.log(1e-3)
    noise_log_sd: float = 3.0
    fixed_noise: float | None = None

    @classmethod
    def default(cls, widths, fixed_noise: float | None = None) -> "Hyperpriors":
        widths = np.atleast_1d(np.asarray(widths, dtype=float))
        return cls(ls_log_mean=np.log(widths / 4.0), fixed_noise=fixed_noise)

    @property
    def sample_noise(self) -> bool:
        return self.fixed_noise is None

    def initial_point(self) -> np.ndarray:
        theta = [self.amp_log_mean, *np.atleast_1d(self.ls_log_mean)]
        if self.sample_noise:
            theta.append(self.noise_log_mean)
        return np.array(theta, dtype=float)

    def log_prior(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        d = len(np.atleast_1d(self.ls_log_mean))
        lp = -0.5 * ((theta[0] - self.amp_log_mean) / self.amp_log_sd) ** 2
        lp += -0.5 * float(np.sum(((theta[1 : 1 + d] - self.ls_log_mean) / self.ls_log_sd) ** 2))
        if self.sample_noise:
            lp += -0.5 * ((theta[1 + d] - self.noise_log_mean) / self.noise_log_sd) ** 2
        return lp

    def to_hyperparams(self, theta) -> HyperParams:
        if self.sample_noise:
            hp = HyperParams.from_log_vector(theta)
            return HyperParams(hp.amplitude, hp.lengthscales, max(hp.noise_var, NOISE_FLOOR))
        return HyperParams.from_log_vector(theta, noise_var=max(self.fixed_noise, NOISE_FLOOR))


@dataclass
class HyperSamples:
    samples: list
    state: np.ndarray | None = None  # last chain state (log space), for warm starts

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("HyperSamples needs at least one sample")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def _slice_1d(logp, x, i, lp0, width, rng, max_steps):
    log_y = lp0 + math.log(rng.uniform())
    u = rng.uniform()
    lo = x[i] - width * u
    hi = lo + width
    j = int(rng.integers(max_steps + 1))
    k = max_steps - j
    z = x.copy()

    def at(v):
        z[i] = v
        return logp(z)

    while j > 0 and at(lo) > log_y:
        lo -= width
        j -= 1
    while k > 0 and at(hi) > log_y:
        hi += width
        k -= 1
    for _ in range(200):
        v = lo + rng.uniform() * (hi - lo)
        lp = at(v)
        if lp > log_y:
            out = x.copy()
            out[i] = v
            return out, lp
        if v < x[i]:
            lo = v
        else:
            hi = v
    return x, lp0


def slice_sample(logp, x0, n_samples: int, rng, widths=1.0, burn: int = 0, thin: int = 1,
                 max_steps: int = 20):
    """Coordinate-wise univariate slice sampling with stepping out.

    Returns ``(samples, last_state)`` with ``samples`` of shape
    (n_samples, D). If the target is not finite at ``x0`` the chain stays
    put.
    """
    rng = np.random.default_rng(rng)
    x = np.array(x0, dtype=float, copy=True)
    widths = np.broadcast_to(np.asarray(widths, dtype=float), x.shape)
    lp = logp(x)
    out = np.empty((n_samples, x.size))
    if not np.isfinite(lp):
        out[:] = x
        return out, x
    total = burn + n_samples * thin
    kept = 0
    for it in range(total):
        for i in range(x.size):
            x, lp = _slice_1d(logp, x, i, lp, widths[i], rng, max_steps)
        if it >= burn and (it - burn + 1) % thin == 0:
            out[kept] = x
            kept += 1
    return out, x


def slice_sample_hyperparams(X, y, hyperpriors: Hyperpriors, n_samples: int = 10, rng=None,
                             init=None, burn: int = 20, thin: int = 2) -> HyperSamples:
    """Draw hyperparameters from likelihood x hyperprior, in log space."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()

    def logp(theta):
        if np.any(np.abs(theta) > 30.0):
            return -np.inf
        hp = hyperpriors.to_hyperparams(theta)
        try:
            ll = log_marginal_likelihood(X, y, hp)
        except NumericalError:
            return -np.inf
        return ll + hyperpriors.log_prior(theta)

    x0 = hyperpriors.initial_point() if init is None else np.asarray(init, dtype=float)
    draws, last = slice_sample(logp, x0, n_samples, rng, widths=1.0, burn=burn, thin=thin)
    return HyperSamples([hyperpriors.to_hyperparams(t) for t in draws], state=last)


# --- random-feature function draws -------------------------------------------


@dataclass
class FunctionSample:
    """Finite cosine-feature expansion approximating one GP draw.

    Posterior draws add an exact-kernel correction ``k(x, anchors) @
    anchor_weights`` over the training inputs; prior draws have none.
    """

    W: np.ndarray  # (m, d) frequencies
    b: np.ndarray  # (m,) phases
    theta: np.ndarray  # (m,) weights
    hp: HyperParams
    shift: float = 0.0
    scale: float = 1.0
    anchors: np.ndarray | None = None  # (N, d)
    anchor_weights: np.ndarray | None = None  # (N,)

    @property
    def n_features(self) -> int:
        return self.W.shape[0]

    def features(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return math.sqrt(2.0 * self.hp.amplitude / self.n_features) * np.cos(X @ self.W.T + self.b)

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = self.features(X) @ self.theta
        if self.anchors is not None:
            out = out + kernel_matrix(X, self.anchors, self.hp) @ self.anchor_weights
        return self.shift + self.scale * out

    def to_dict(self) -> dict:
        d = {
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "theta": self.theta.tolist(),
            "hp": self.hp.to_dict(),
            "shift": float(self.shift),
            "scale": float(self.scale),
        }
        if self.anchors is not None:
            d["anchors"] = self.anchors.tolist()
            d["anchor_weights"] = self.anchor_weights.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionSample":
        return cls(
            np.array(d["W"], dtype=float),
            np.array(d["b"], dtype=float),
            np.array(d["theta"], dtype=float),
            HyperParams.from_dict(d["hp"]),
            float(d.get("shift", 0.0)),
            float(d.get("scale", 1.0)),
            np.array(d["anchors"], dtype=float) if "anchors" in d else None,
            np.array(d["anchor_weights"], dtype=float) if "anchors" in d else None,
        )


def sample_spectrum(hp: HyperParams, n_features: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Frequencies from the Matérn 5/2 spectral density (multivariate t) and
    uniform phases."""
    rng = np.random.default_rng(rng)
    d = hp.dims
    z = rng.standard_normal((n_features, d))
    u = rng.chisquare(MATERN_DOF, size=(n_features, 1))
    W = z * np.sqrt(MATERN_DOF / u) / np.asarray(hp.lengthscales)
    b = rng.uniform(0.0, 2.0 * math.pi, size=n_features)
    return W, b


def draw_prior_function(hp: HyperParams, n_features: int = 500, rng=None) -> FunctionSample:
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    rng = np.random.default_rng(rng)
    W, b = sample_spectrum(hp, n_features, rng)
    theta = rng.standard_normal(n_features)
    return FunctionSample(W, b, theta, hp)


def draw_posterior_function(post: GPPosterior, n_features: int = 500, rng=None) -> FunctionSample:
    """Random-feature draw from the GP posterior by pathwise conditioning.

    A feature-expansion prior draw is corrected with the exact kernel:
    f(x) = f0(x) + k(x, X) (K + noise I)^-1 (y - f0(X) - eps). Averaged over
    spectra this has the exact posterior mean and covariance, which a
    feature-space posterior with a finite basis does not.
    """
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    rng = np.random.default_rng(rng)
    hp = post.hp
    W, b = sample_spectrum(hp, n_features, rng)
    theta0 = rng.standard_normal(n_features)
    sample = FunctionSample(W, b, theta0, hp)
    if post.N == 0:
        return sample
    eps = rng.standard_normal(post.N) * math.sqrt(hp.noise_var)
    resid = post.y_train - sample(post.X_train) - eps
    weights = cho_solve((post.chol, True), resid, check_finite=False)
    return FunctionSample(W, b, theta0, hp, anchors=post.X_train.copy(), anchor_weights=weights)
