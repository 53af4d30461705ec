"""Gibbs reweighting of the conditional reference measure.

Signal paths are drawn from the reference measure given ``y`` (the
driftless signal with the shared noise frozen to ``y``) and weighted by
``exp(-H(x, y))``.  All stochastic integrals are left-endpoint (Ito) sums.

The energy has two parts:

* the drift-gap part, built from ``beta(x) = (A - sigma1 C) x``::

      -sum beta_i^T S^{-1} (dx_i - sigma1 dy_i) + 1/2 sum beta_i^T S^{-1} beta_i dt

  with ``S = sigma0 sigma0^T``;
* the observation part ``-sum (C x_i)^T dy_i + 1/2 sum |C x_i|^2 dt``, which
  accounts for the information ``y`` carries about ``x`` through its drift.

Only the sum reproduces the filter (see ``energy``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .model import LinearModel, ModelError, NumericalError, Path, TimeGrid, validate_linear
from .sampler import (as_seed, sample_reference_ensemble, simulate_joint_ensemble)


@dataclass(frozen=True)
class EnergyBreakdown:
    stochastic_term: float
    quadratic_term: float
    likelihood_term: float = 0.0

    @property
    def total(self) -> float:
        return -self.stochastic_term + self.quadratic_term + self.likelihood_term


def _precision(model: LinearModel) -> np.ndarray:
    try:
        cf = linalg.cho_factor(model.noise_cov, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("sigma0 sigma0^T is not invertible") from exc
    return linalg.cho_solve(cf, np.eye(model.d))


def energy_terms(model: LinearModel, X: np.ndarray, y: np.ndarray, likelihood: bool = True):
    """Vectorised energy pieces for signal paths ``X`` of shape ``(M, N+1, d)``.

    ``y`` is the observation array ``(N+1, n)``; ``dt`` is recovered from the
    model horizon.  Returns ``(stochastic, quadratic, likelihood)`` arrays of
    length ``M``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    y = np.asarray(y, dtype=float)
    N = X.shape[1] - 1
    if y.shape[0] != N + 1:
        raise ModelError("signal and observation paths have different lengths")
    dt = model.T / N
    prec = _precision(model)
    left = X[:, :-1, :]
    dx = np.diff(X, axis=1)
    dy = np.diff(y, axis=0)
    beta = left @ model.beta.T
    u = beta @ prec
    stoch = np.sum(u * (dx - dy @ model.sigma1.T), axis=(1, 2))
    quad = 0.5 * dt * np.sum(u * beta, axis=(1, 2))
    if likelihood:
        h = left @ model.C.T
        lik = -np.sum(h * dy, axis=(1, 2)) + 0.5 * dt * np.sum(h * h, axis=(1, 2))
    else:
        lik = np.zeros(X.shape[0])
    return stoch, quad, lik


def energy(model: LinearModel, x: Path, y: Path, likelihood: bool = True) -> EnergyBreakdown:
    """Energy of signal path ``x`` relative to the reference measure given ``y``.

    ``likelihood=False`` keeps only the drift-gap terms.  That reduced energy
    reweights the reference measure into the law of the signal driven by the
    observed noise alone, which ignores what the observation drift says about
    the signal; it is exposed for comparison, not for filtering.
    """
    if not x.grid.same_as(y.grid):
        raise ModelError("signal and observation paths are on different grids")
    validate_linear(model).raise_if_failed()
    s, q, lk = energy_terms(model, x.values, y.values, likelihood)
    return EnergyBreakdown(float(s[0]), float(q[0]), float(lk[0]))


def mn_energy_uncorrelated(h, x: Path, y: Path, robust: bool = False) -> float:
    """Observation energy of the independent-noise formulation.

    ``h`` is either a ``LinearModel`` (observation map ``C x``) or a callable
    mapping an array ``(..., d)`` to ``(..., n)``.  Returns

        direct:  -(sum h(x_i)^T dy_i - 1/2 sum |h(x_i)|^2 dt)
        robust:  -(y_N^T h(x_N) - sum y_{i+1}^T (h(x_{i+1}) - h(x_i)) - 1/2 sum |h(x_i)|^2 dt)

    The two agree exactly up to round-off (discrete summation by parts).
    """
    if isinstance(h, LinearModel):
        if np.any(h.sigma1 != 0):
            raise ModelError("uncorrelated energy undefined under shared noise")
        C = h.C
        hfun = lambda v: v @ C.T  # noqa: E731
    else:
        hfun = h
    if not x.grid.same_as(y.grid):
        raise ModelError("signal and observation paths are on different grids")
    dt = x.grid.dt
    hx = np.asarray(hfun(x.values), dtype=float).reshape(len(x.grid), -1)
    yv = y.values
    sq = 0.5 * dt * np.sum(hx[:-1] ** 2)
    if robust:
        log_q = yv[-1] @ hx[-1] - np.sum(yv[1:] * np.diff(hx, axis=0)) - sq
    else:
        log_q = np.sum(hx[:-1] * np.diff(yv, axis=0)) - sq
    return float(-log_q)


@dataclass(eq=False)
class WeightedEnsemble:
    """Signal paths ``(M, N+1, d)`` with log-weights; member ``k`` came from stream ``k``."""

    paths: np.ndarray
    log_weights: np.ndarray
    normalized: bool = False

    def __len__(self):
        return self.log_weights.size

    def path(self, k: int, grid: TimeGrid) -> Path:
        return Path(grid, self.paths[k])

    def normalize(self) -> "WeightedEnsemble":
        """Shift log-weights so that ``exp(log_weights)`` sums to one."""
        lw = np.asarray(self.log_weights, dtype=float)
        finite = np.isfinite(lw)
        if not finite.any():
            raise NumericalError(
                "all importance weights underflowed "
                f"(max log-weight {np.max(lw) if lw.size else np.nan}, "
                f"min log-weight {np.min(lw) if lw.size else np.nan})")
        return WeightedEnsemble(self.paths, lw - logsumexp(lw), True)

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights if self.normalized else self.normalize().log_weights
        w = np.exp(lw)
        return w / w.sum()

    @property
    def ess(self) -> float:
        w = self.weights
        return float(min(max(1.0 / np.sum(w * w), 1.0), len(self)))


@dataclass(frozen=True, eq=False)
class MomentTrack:
    """Weighted per-time moments with self-normalised IS standard errors."""

    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    mean_se: np.ndarray
    var_se: np.ndarray
    ess: float

    @property
    def variances(self) -> np.ndarray:
        return np.diagonal(self.covs, axis1=1, axis2=2)


def weighted_moments(paths: np.ndarray, w: np.ndarray, times: np.ndarray, ess: float
                     ) -> MomentTrack:
    mean = np.einsum("m,mtd->td", w, paths)
    dev = paths - mean
    covs = np.einsum("m,mti,mtj->tij", w, dev, dev)
    var = np.diagonal(covs, axis1=1, axis2=2)
    w2 = w * w
    mean_se = np.sqrt(np.einsum("m,mtd->td", w2, dev ** 2))
    var_se = np.sqrt(np.einsum("m,mtd->td", w2, (dev ** 2 - var) ** 2))
    return MomentTrack(times.copy(), mean, covs, mean_se, var_se, ess)


def reference_energies(model: LinearModel, grid: TimeGrid, y: Path, M: int, seed,
                       threads: int = 1, likelihood: bool = True):
    """Reference-measure paths and their energies ``H`` (total), member ``k`` on stream ``k``."""
    validate_linear(model).raise_if_failed()
    if abs(grid.T - model.T) > 1e-12 * model.T:
        raise ModelError("grid horizon differs from model horizon")
    X = sample_reference_ensemble(model, grid, y, as_seed(seed), M, threads)
    s, q, lk = energy_terms(model, X, y.values, likelihood)
    return X, -s + q + lk


def importance_posterior(model: LinearModel, grid: TimeGrid, y: Path, M: int, seed,
                         threads: int = 1, likelihood: bool = True):
    """Self-normalised importance-sampling estimate of the posterior signal path law.

    Returns the normalised ``WeightedEnsemble`` and the per-time ``MomentTrack``.
    """
    if M < 2:
        raise ValueError("need at least two samples")
    X, H = reference_energies(model, grid, y, M, seed, threads, likelihood)
    ens = WeightedEnsemble(X, -H).normalize()
    return ens, weighted_moments(X, ens.weights, grid.times, ens.ess)


def _log_mean_exp_jackknife(lw: np.ndarray):
    lw = np.asarray(lw, dtype=float)
    M = lw.size
    if not np.isfinite(lw).any():
        raise NumericalError(f"all importance weights underflowed (max log-weight "
                             f"{lw.max()}, min log-weight {lw.min()})")
    top = lw[np.isfinite(lw)].max()
    e = np.exp(lw - top)
    S = e.sum()
    est = np.log(S / M) + top
    with np.errstate(divide="ignore"):
        loo = np.log((S - e) / (M - 1)) + top
    se = np.sqrt((M - 1) / M * np.sum((loo - loo.mean()) ** 2))
    return float(est), float(se)


def estimate_log_normalizer(model: LinearModel, grid: TimeGrid, y: Path, M: int, seed,
                            threads: int = 1):
    """``log mean exp(-H)`` over reference draws, with a jackknife standard error.

    Uses the same reference draws as ``importance_posterior`` for equal seeds.
    """
    if M < 2:
        raise ValueError("need at least two samples")
    _, H = reference_energies(model, grid, y, M, seed, threads)
    return _log_mean_exp_jackknife(-H)


def integrability_diagnostic(H: np.ndarray) -> float:
    """Monte Carlo estimate of ``E[|H| exp(-H)]`` under the reference measure (diagnostic only)."""
    H = np.asarray(H, dtype=float)
    lw = -H + np.log(np.abs(H) + 1e-300)
    return float(np.exp(logsumexp(lw) - np.log(H.size)))


def mitter_newton_posterior(model: LinearModel, grid: TimeGrid, y: Path, M: int, seed,
                            threads: int = 1, robust: bool = True):
    """Independent-noise filter: prior signal draws weighted by the observation energy.

    Only defined for ``sigma1 = 0``; used to check that the reference-measure
    formulation reduces to the classical one.
    """
    if np.any(model.sigma1 != 0):
        raise ModelError("uncorrelated energy undefined under shared noise")
    X, _ = simulate_joint_ensemble(model, grid, as_seed(seed), M, threads)
    hx = X @ model.C.T
    yv = y.values
    dt = grid.dt
    sq = 0.5 * dt * np.sum(hx[:, :-1] ** 2, axis=(1, 2))
    if robust:
        log_q = (hx[:, -1] @ yv[-1]
                 - np.sum(yv[None, 1:] * np.diff(hx, axis=1), axis=(1, 2)) - sq)
    else:
        log_q = np.sum(hx[:, :-1] * np.diff(yv, axis=0)[None], axis=(1, 2)) - sq
    ens = WeightedEnsemble(X, log_q).normalize()
    return ens, weighted_moments(X, ens.weights, grid.times, ens.ess)
