"""Diagnostics showing that joint and product path measures are mutually singular.

Two experiments:

* a discrete random-walk pair ``X' = X + W + B``, ``Y' = Y + W`` whose
  joint/product density ratio degenerates as the step count grows;
* dyadic cross quadratic covariation ``Q_n = sum dx dy^T``, which tends to
  ``int sigma1 ds`` under the joint law and to 0 under the product law.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg, stats

from .model import (Coupling, LinearModel, ModelError, NonlinearModel, PathPair,
                    make_dyadic_grid)
from .sampler import as_seed, simulate_joint_ensemble, simulate_product_ensemble

#: largest step count for the dense discrete example
MAX_DISCRETE_N = 4096

JOINT_KRON = np.array([[2.0, 1.0], [1.0, 1.0]])
PRODUCT_KRON = np.array([[2.0, 0.0], [0.0, 1.0]])


# --- discrete random-walk example -------------------------------------------------

def _check_discrete(N: int, delta_t: float):
    if int(N) != N or N < 1:
        raise ModelError(f"N must be a positive integer, got {N!r}")
    if N > MAX_DISCRETE_N:
        raise ModelError(f"N={N} exceeds dense guard {MAX_DISCRETE_N}")
    if not delta_t > 0:
        raise ModelError("delta_t must be positive")


def random_walk_cov(N: int, delta_t: float) -> np.ndarray:
    """Covariance of a random walk with ``N(0, delta_t)`` steps: ``delta_t * min(i, j)``."""
    i = np.arange(1, N + 1)
    return delta_t * np.minimum.outer(i, i).astype(float)


def discrete_cov_matrices(N: int, delta_t: float):
    """Joint and product covariances of ``z = (x_1..x_N, y_1..y_N)``."""
    _check_discrete(N, delta_t)
    A = random_walk_cov(N, delta_t)
    return np.kron(JOINT_KRON, A), np.kron(PRODUCT_KRON, A)


@lru_cache(maxsize=32)
def _rn_exponent(N: int, delta_t: float) -> np.ndarray:
    cj, cp = discrete_cov_matrices(N, delta_t)
    eye = np.eye(2 * N)
    out = linalg.solve(cj, eye, assume_a="pos") - linalg.solve(cp, eye, assume_a="pos")
    out = 0.5 * (out + out.T)
    out.setflags(write=False)
    return out


def rn_exponent_matrix(N: int, delta_t: float) -> np.ndarray:
    """``Cov_joint^{-1} - Cov_prod^{-1}`` by direct inversion."""
    _check_discrete(N, delta_t)
    return _rn_exponent(int(N), float(delta_t))


def rn_exponent_closed_form(N: int, delta_t: float) -> np.ndarray:
    """The same matrix as ``(1/dt) [[1/2, -1], [-1, 1]] (x) inv(min(i, j))``.

    The inverse of the unit random-walk covariance is tridiagonal with 2 on the
    diagonal (1 in the last entry) and -1 next to it.
    """
    _check_discrete(N, delta_t)
    inv = 2.0 * np.eye(N) - np.eye(N, k=1) - np.eye(N, k=-1)
    inv[-1, -1] = 1.0
    return np.kron(np.array([[0.5, -1.0], [-1.0, 1.0]]), inv) / delta_t


def discrete_log_rn(z, N: int, delta_t: float):
    """Log density ratio (joint over product) at ``z``; accepts ``(2N,)`` or ``(M, 2N)``."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != 2 * N:
        raise ModelError(f"z must have length {2 * N}, got {z.shape[-1]}")
    D = rn_exponent_matrix(N, delta_t)
    quad = np.einsum("...i,ij,...j->...", z, D, z)
    out = 0.5 * N * np.log(2.0) - 0.5 * quad
    return float(out) if out.ndim == 0 else out


def sample_discrete_pairs(N: int, delta_t: float, M: int, measure, rng) -> np.ndarray:
    """Draw ``M`` vectors ``z`` by running the random-walk recursion directly."""
    measure = Coupling(measure)
    sd = np.sqrt(delta_t)
    B = rng.standard_normal((M, N)) * sd
    W = rng.standard_normal((M, N)) * sd
    x = np.cumsum(W + B, axis=1)
    if measure is Coupling.JOINT:
        y = np.cumsum(W, axis=1)
    elif measure is Coupling.PRODUCT:
        y = np.cumsum(rng.standard_normal((M, N)) * sd, axis=1)
    else:
        raise ModelError("measure must be 'joint' or 'product'")
    return np.hstack([x, y])


@dataclass(frozen=True)
class RnExperimentRow:
    N: int
    delta_t: float
    mean_log_rn: float
    sd_log_rn: float
    sampling_measure: str


def rn_degeneration_experiment(T: float, N_list, M: int, measure, seed):
    """Mean and spread of the log density ratio over ``M`` draws for each ``N`` (``dt = T/N``)."""
    seed = as_seed(seed)
    measure = Coupling(measure)
    rows = []
    for N in N_list:
        dt = T / N
        _check_discrete(N, dt)
        z = sample_discrete_pairs(N, dt, M, measure, seed.child(N).generator())
        lr = discrete_log_rn(z, N, dt)
        rows.append(RnExperimentRow(int(N), dt, float(lr.mean()), float(lr.std(ddof=1)),
                                    measure.value))
    return rows


def fit_linear_trend(xs, ys):
    """Least-squares ``(slope, intercept, r_squared)``."""
    res = stats.linregress(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))
    return float(res.slope), float(res.intercept), float(res.rvalue ** 2)


# --- quadratic covariation ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CovariationStat:
    level: int
    t: float
    value: np.ndarray
    target_joint: np.ndarray


def _sigma1_along(model, times: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``sigma1(t_i, x_i)`` for paths ``X`` of shape ``(M, K, d)``; returns ``(M, K, d, n)``."""
    M, K, d = X.shape
    if isinstance(model, LinearModel):
        return np.broadcast_to(model.sigma1, (M, K, d, model.n))
    out = np.empty((M, K, d, model.n))
    for m in range(M):
        for k in range(K):
            out[m, k] = model.sigma1_at(times[k], X[m, k])
    return out


def covariation_target(model, times: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Trapezoidal ``int_0^t sigma1(s, x_s) ds`` along each path, shape ``(M, d, n)``."""
    s1 = _sigma1_along(model, times, X)
    return np.trapezoid(s1, times, axis=1) if hasattr(np, "trapezoid") \
        else np.trapz(s1, times, axis=1)


def covariation_sums(X: np.ndarray, Y: np.ndarray, upto: int, start: int = 0) -> np.ndarray:
    """``sum_{start<=i<upto} dx_i dy_i^T`` for path arrays ``(M, N+1, .)``; returns ``(M, d, n)``."""
    dx = np.diff(X[:, start: upto + 1], axis=1)
    dy = np.diff(Y[:, start: upto + 1], axis=1)
    return np.einsum("mti,mtj->mij", dx, dy)


def quadratic_covariation(pair: PathPair, t: float, model=None) -> CovariationStat:
    """Dyadic cross covariation of the pair on ``[0, t]`` at its native level.

    ``target_joint`` is the trapezoidal integral of ``sigma1`` along the signal
    path; it is NaN when no model is given.
    """
    grid = pair.grid
    k = grid.index_of(t)
    X, Y = pair.x.values[None], pair.y.values[None]
    value = covariation_sums(X, Y, k)[0]
    if model is None:
        target = np.full_like(value, np.nan)
    else:
        target = covariation_target(model, grid.times[: k + 1], X[:, : k + 1])[0]
    return CovariationStat(grid.level, float(grid.times[k]), value, target)


@dataclass(frozen=True, eq=False)
class DecayRow:
    level: int
    mean: np.ndarray        # componentwise mean of Q_n, (d, n)
    mean_se: np.ndarray
    mean_norm: float        # mean Frobenius norm of Q_n
    mean_norm_se: float
    var: float              # summed componentwise variance of Q_n
    target_norm: float      # mean Frobenius norm of int sigma1 along the signal


def _sample(model, grid, seed, M, sampling, threads):
    sampling = Coupling(sampling)
    if sampling is Coupling.JOINT:
        return simulate_joint_ensemble(model, grid, seed, M, threads)
    if sampling is Coupling.PRODUCT:
        return simulate_product_ensemble(model, grid, seed, M, threads)
    raise ModelError("sampling must be 'joint' or 'product'")


def covariation_decay_study(model, t: float, levels, M: int, seed, sampling="product",
                            threads: int = 1):
    """Moments of ``Q_n`` on ``[0, t]`` across dyadic levels, fresh ensembles per level."""
    seed = as_seed(seed)
    rows = []
    for level in levels:
        grid = make_dyadic_grid(level, model.T)
        k = grid.index_of(t)
        X, Y = _sample(model, grid, seed.child(level), M, sampling, threads)
        Q = covariation_sums(X, Y, k)
        norms = np.linalg.norm(Q.reshape(M, -1), axis=1)
        target = covariation_target(model, grid.times[: k + 1], X[:, : k + 1])
        rows.append(DecayRow(
            level=int(level),
            mean=Q.mean(axis=0),
            mean_se=Q.std(axis=0, ddof=1) / np.sqrt(M),
            mean_norm=float(norms.mean()),
            mean_norm_se=float(norms.std(ddof=1) / np.sqrt(M)),
            var=float(Q.var(axis=0, ddof=1).sum()),
            target_norm=float(np.linalg.norm(target.reshape(M, -1), axis=1).mean()),
        ))
    return rows


def log2_variance_slope(rows) -> float:
    slope, _, _ = fit_linear_trend([r.level for r in rows], [np.log2(r.var) for r in rows])
    return slope


MIN_CLASSIFY_LEVEL = 8
SEPARATION_FLOOR = 1e-8


def _coupling_fraction(Q: np.ndarray, S: np.ndarray) -> np.ndarray:
    flat_q = Q.reshape(Q.shape[0], -1)
    flat_s = S.reshape(S.shape[0], -1)
    ss = np.sum(flat_s * flat_s, axis=1)
    if np.any(np.sqrt(ss) < SEPARATION_FLOOR):
        raise ModelError("model violates separation: int sigma1 along the path is ~0")
    return np.sum(flat_q * flat_s, axis=1) / ss


def classify_coupling(pair: PathPair, model, threshold_fraction: float = 0.5) -> Coupling:
    """Label a pair as jointly or independently sampled from its covariation.

    The statistic is the projection coefficient of ``Q_n`` onto the joint-law
    limit ``S = int sigma1``: ``lambda = <Q_n, S> / <S, S>``.  Under the joint
    law ``lambda -> 1``, under the product law ``lambda -> 0``; the pair is
    called joint when ``lambda >= threshold_fraction``.
    """
    grid = pair.grid
    if grid.level < MIN_CLASSIFY_LEVEL:
        raise ModelError(f"classification needs grid level >= {MIN_CLASSIFY_LEVEL}")
    X, Y = pair.x.values[None], pair.y.values[None]
    Q = covariation_sums(X, Y, grid.n_steps)
    S = covariation_target(model, grid.times, X)
    lam = _coupling_fraction(Q, S)[0]
    return Coupling.JOINT if lam >= threshold_fraction else Coupling.PRODUCT


@dataclass(frozen=True)
class ClassificationResult:
    level: int
    M: int
    joint_error_rate: float
    product_error_rate: float

    def se(self, rate: float) -> float:
        return float(np.sqrt(max(rate * (1 - rate), 1.0 / self.M) / self.M))


def classification_experiment(model, level: int, M: int, seed, threshold_fraction: float = 0.5,
                              threads: int = 1) -> ClassificationResult:
    """Error rates of ``classify_coupling`` on labelled joint and product ensembles."""
    if level < MIN_CLASSIFY_LEVEL:
        raise ModelError(f"classification needs grid level >= {MIN_CLASSIFY_LEVEL}")
    seed = as_seed(seed)
    grid = make_dyadic_grid(level, model.T)
    rates = []
    for tag, sampling in ((1, Coupling.JOINT), (2, Coupling.PRODUCT)):
        X, Y = _sample(model, grid, seed.child(tag), M, sampling, threads)
        Q = covariation_sums(X, Y, grid.n_steps)
        S = covariation_target(model, grid.times, X)
        called_joint = _coupling_fraction(Q, S) >= threshold_fraction
        wrong = ~called_joint if sampling is Coupling.JOINT else called_joint
        rates.append(float(wrong.mean()))
    return ClassificationResult(level, M, rates[0], rates[1])


# --- quadratic variation blocks of the stacked process ------------------------------

def empirical_qv_blocks(pair: PathPair, model: LinearModel | None = None) -> np.ndarray:
    """Realised quadratic variation of ``(X, Y)`` per unit time, ``(d+n) x (d+n)``.

    ``model`` is accepted for interface symmetry with ``expected_qv_blocks``;
    the estimate itself only uses the paths.
    """
    if isinstance(model, NonlinearModel):
        raise ModelError("block matrices are defined for constant-coefficient linear models")
    z = np.hstack([pair.x.values, pair.y.values])
    dz = np.diff(z, axis=0)
    return dz.T @ dz / pair.grid.T


def qv_blocks_ensemble(X: np.ndarray, Y: np.ndarray, T: float) -> np.ndarray:
    dz = np.diff(np.concatenate([X, Y], axis=2), axis=1)
    return np.einsum("mti,mtj->mij", dz, dz) / T


def expected_qv_blocks(model: LinearModel, coupling) -> np.ndarray:
    """``[[s0 s0^T + s1 s1^T, s1], [s1^T, I]]``, with zero off-diagonal blocks for the product law."""
    d, n = model.d, model.n
    s1 = model.sigma1
    out = np.zeros((d + n, d + n))
    out[:d, :d] = model.noise_cov + s1 @ s1.T
    out[d:, d:] = np.eye(n)
    if Coupling(coupling) is Coupling.JOINT:
        out[:d, d:] = s1
        out[d:, :d] = s1.T
    return out
