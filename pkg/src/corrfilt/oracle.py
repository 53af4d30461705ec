"""Exact Gaussian ground truth for the Euler chain of a linear model.

The oracle targets the discretised chain the sampler produces, not the
continuous-time law, so Monte Carlo estimates can be compared with it
without discretisation bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .model import LinearModel, ModelError, NumericalError, Path, TimeGrid, validate_linear

#: dense joint laws are limited to grids of this level or coarser
MAX_DENSE_LEVEL = 12

SYM_RTOL = 1e-12
PSD_FLOOR = 1e-10


@dataclass(frozen=True)
class Layout:
    """Flat ordering of a stacked trajectory vector.

    The signal block ``x_1..x_N`` (time-major, ``d`` coordinates each) comes
    first, followed by the observation block ``y_1..y_N`` when ``n > 0``.
    Time index 0 is excluded: ``x_0`` is deterministic and ``y_0 = 0``.
    """

    N: int
    d: int
    n: int = 0

    @property
    def size(self) -> int:
        return self.N * (self.d + self.n)

    @property
    def signal(self) -> slice:
        return slice(0, self.N * self.d)

    @property
    def observation(self) -> slice:
        return slice(self.N * self.d, self.size)

    def index(self, i: int, k: int, block: str = "signal") -> int:
        if not 1 <= i <= self.N:
            raise IndexError(f"time index {i} outside 1..{self.N}")
        if block == "signal":
            if not 0 <= k < self.d:
                raise IndexError(k)
            return (i - 1) * self.d + k
        if block == "observation":
            if not 0 <= k < self.n:
                raise IndexError(k)
            return self.N * self.d + (i - 1) * self.n + k
        raise ValueError(f"unknown block {block!r}")

    def signal_only(self) -> "Layout":
        return Layout(self.N, self.d, 0)


def _symmetrize_checked(cov: np.ndarray, what: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    scale = max(np.abs(cov).max(), np.finfo(float).tiny)
    asym = np.abs(cov - cov.T).max()
    if asym > SYM_RTOL * scale * max(1, cov.shape[0]) ** 0.5:
        raise NumericalError(f"{what}: covariance not symmetric (|C - C^T| = {asym:.3g})")
    return 0.5 * (cov + cov.T)


def repair_psd(cov: np.ndarray, what: str = "covariance") -> np.ndarray:
    """Clamp round-off negative eigenvalues to zero; reject real indefiniteness."""
    w, V = np.linalg.eigh(cov)
    top = max(w[-1], 0.0)
    if w[0] < -PSD_FLOOR * top or (top == 0.0 and w[0] < 0):
        raise NumericalError(f"{what}: eigenvalue {w[0]:.3g} below PSD floor "
                             f"(largest {top:.3g})")
    if w[0] >= 0:
        return cov
    w = np.clip(w, 0.0, None)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    mean: np.ndarray
    cov: np.ndarray
    layout: Layout

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        if mean.size != self.layout.size:
            raise ModelError(f"mean has length {mean.size}, layout expects {self.layout.size}")
        cov = _symmetrize_checked(self.cov, "GaussianLaw")
        if cov.shape != (mean.size, mean.size):
            raise ModelError("covariance shape does not match mean")
        cov = repair_psd(cov, "GaussianLaw")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def signal_law(self) -> "GaussianLaw":
        s = self.layout.signal
        return GaussianLaw(self.mean[s], self.cov[s, s], self.layout.signal_only())

    def signal_marginals(self):
        """Per-time signal means ``(N, d)`` and covariances ``(N, d, d)``."""
        N, d = self.layout.N, self.layout.d
        mean = self.mean[: N * d].reshape(N, d)
        covs = np.empty((N, d, d))
        for i in range(N):
            sl = slice(i * d, (i + 1) * d)
            covs[i] = self.cov[sl, sl]
        return mean, covs

    def signal_paths(self, x0, flat: np.ndarray) -> np.ndarray:
        """Turn flat signal draws ``(M, N*d)`` into paths ``(M, N+1, d)`` starting at ``x0``."""
        N, d = self.layout.N, self.layout.d
        M = flat.shape[0]
        out = np.empty((M, N + 1, d))
        out[:, 0] = x0
        out[:, 1:] = flat[:, : N * d].reshape(M, N, d)
        return out

    def cholesky(self) -> np.ndarray:
        """Lower factor ``L`` with ``L L^T = cov``; handles singular PSD covariances."""
        try:
            return np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(self.cov)
            return V * np.sqrt(np.clip(w, 0.0, None))

    def sample(self, M: int, rng: np.random.Generator) -> np.ndarray:
        L = self.cholesky()
        z = rng.standard_normal((M, self.dim))
        return self.mean + z @ L.T

    def logpdf(self, z: np.ndarray) -> np.ndarray:
        cf = linalg.cho_factor(self.cov, lower=True)
        r = np.atleast_2d(z) - self.mean
        sol = linalg.cho_solve(cf, r.T)
        maha = np.sum(r.T * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        out = -0.5 * (maha + logdet + self.dim * np.log(2 * np.pi))
        return out if np.ndim(z) > 1 else out[0]


@dataclass(frozen=True, eq=False)
class FilterTrack:
    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        covs = np.asarray(self.covs, dtype=float)
        if not len(self.times) == len(self.means) == len(covs):
            raise ModelError("track times, means and covariances differ in length")
        for k, c in enumerate(covs):
            if np.abs(c - c.T).max() > SYM_RTOL * max(np.abs(c).max(), 1.0) * 10:
                raise NumericalError(f"filter covariance at index {k} not symmetric")
            w = np.linalg.eigvalsh(0.5 * (c + c.T))
            if w[0] < -PSD_FLOOR * max(w[-1], 1e-300):
                raise NumericalError(f"filter covariance at index {k} not PSD")

    @property
    def variances(self) -> np.ndarray:
        return np.diagonal(self.covs, axis1=1, axis2=2)


def _check_dense_level(grid: TimeGrid):
    if grid.level > MAX_DENSE_LEVEL:
        raise ModelError(f"grid cap: level {grid.level} exceeds dense-matrix limit "
                         f"{MAX_DENSE_LEVEL}")


def build_discrete_joint_law(model: LinearModel, grid: TimeGrid) -> GaussianLaw:
    """Mean and covariance of ``(x_1..x_N, y_1..y_N)`` for the Euler chain.

    The stacked state ``s = (x, y)`` evolves as ``s' = M s + G xi`` with
    ``xi = (dB, dW) ~ N(0, dt I)``, so it is an exact linear image of the
    noise; the covariance is ``dt * L L^T`` for the accumulated sensitivity
    ``L`` of the states to the noise.
    """
    validate_linear(model).raise_if_failed()
    _check_dense_level(grid)
    d, n, N, dt = model.d, model.n, grid.n_steps, grid.dt
    D, Q = d + n, d + n
    step = np.zeros((D, D))
    step[:d, :d] = np.eye(d) + model.A * dt
    step[d:, :d] = model.C * dt
    step[d:, d:] = np.eye(n)
    G = np.zeros((D, Q))
    G[:d, :d] = model.sigma0
    G[:d, d:] = model.sigma1
    G[d:, d:] = np.eye(n)

    sens = np.zeros((N, D, N * Q))
    means = np.zeros((N, D))
    s_mean = np.concatenate([model.x0, np.zeros(n)])
    cur = np.zeros((D, N * Q))
    for i in range(N):
        cur = step @ cur
        cur[:, i * Q:(i + 1) * Q] += G
        s_mean = step @ s_mean
        sens[i] = cur
        means[i] = s_mean

    # reorder rows into the signal-block / observation-block layout
    L = np.concatenate([sens[:, :d, :].reshape(N * d, N * Q),
                        sens[:, d:, :].reshape(N * n, N * Q)])
    mean = np.concatenate([means[:, :d].ravel(), means[:, d:].ravel()])
    cov = dt * (L @ L.T)
    return GaussianLaw(mean, cov, Layout(N, d, n))


def _observation_vector(law: GaussianLaw, y: Path) -> np.ndarray:
    lay = law.layout
    if y.values.shape != (lay.N + 1, lay.n):
        raise ModelError(f"observation path shape {y.values.shape} does not match law "
                         f"({lay.N + 1}, {lay.n})")
    return y.values[1:].ravel()


def condition_on_observations(law: GaussianLaw, y: Path) -> GaussianLaw:
    """Exact posterior of the signal block given the observation block (Schur complement)."""
    lay = law.layout
    if lay.n == 0:
        raise ModelError("law has no observation block")
    yv = _observation_vector(law, y)
    sx, so = lay.signal, lay.observation
    Sxx, Sxy, Syy = law.cov[sx, sx], law.cov[sx, so], law.cov[so, so]
    try:
        cf = linalg.cho_factor(Syy, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("degenerate observation law") from exc
    diag = np.diag(cf[0])
    if diag.min() ** 2 < PSD_FLOOR * np.abs(np.diag(Syy)).max():
        raise NumericalError("degenerate observation law")
    gain_t = linalg.cho_solve(cf, Sxy.T)          # Syy^{-1} Syx
    mean = law.mean[sx] + gain_t.T @ (yv - law.mean[so])
    cov = Sxx - Sxy @ gain_t
    cov = repair_psd(0.5 * (cov + cov.T), "posterior")
    return GaussianLaw(mean, cov, lay.signal_only())


def observation_log_density(model: LinearModel, grid: TimeGrid, y: Path) -> float:
    """Log density of the observation increments' law at ``y`` under the Euler chain."""
    law = build_discrete_joint_law(model, grid)
    so = law.layout.observation
    obs = GaussianLaw(law.mean[so], law.cov[so, so], Layout(law.layout.N, law.layout.n, 0))
    return float(obs.logpdf(_observation_vector(law, y)))


def exact_log_normalizer(model: LinearModel, grid: TimeGrid, y: Path) -> float:
    """Log ratio of the observation density under the model and under its driftless twin.

    This is the normalising constant of the Gibbs posterior relative to the
    conditional reference measure, computed from exact Gaussian densities.
    """
    driftless = model.replace(A=np.zeros_like(model.A), C=np.zeros_like(model.C))
    return observation_log_density(model, grid, y) - observation_log_density(driftless, grid, y)


def law_to_track(law: GaussianLaw, grid: TimeGrid, x0) -> FilterTrack:
    """Per-time marginals of a signal law, with the deterministic start prepended."""
    N, d = law.layout.N, law.layout.d
    if N != grid.n_steps:
        raise ModelError("law and grid disagree on the number of steps")
    m, c = law.signal_marginals()
    means = np.vstack([np.asarray(x0, dtype=float).reshape(1, d), m])
    covs = np.concatenate([np.zeros((1, d, d)), c])
    return FilterTrack(grid.times.copy(), means, covs)


def kalman_correlated(model: LinearModel, grid: TimeGrid, y: Path) -> FilterTrack:
    """Euler-discretised Kalman-Bucy filter with correlated signal/observation noise.

    With gain ``K = P C^T + sigma1`` the recursion is

        m' = m + A m dt + K (dy - C m dt)
        P' = P + (A P + P A^T + sigma0 sigma0^T + sigma1 sigma1^T - K K^T) dt

    It converges to the exact discrete posterior at first order in ``dt``.
    """
    validate_linear(model).raise_if_failed()
    if not y.grid.same_as(grid):
        raise ModelError("observation path is on a different grid")
    d, N, dt = model.d, grid.n_steps, grid.dt
    A, C, s1 = model.A, model.C, model.sigma1
    noise = model.noise_cov + s1 @ s1.T
    dy = y.increments()
    means = np.empty((N + 1, d))
    covs = np.empty((N + 1, d, d))
    m = model.x0.copy()
    P = np.zeros((d, d))
    means[0], covs[0] = m, P
    for i in range(N):
        K = P @ C.T + s1
        m = m + A @ m * dt + K @ (dy[i] - C @ m * dt)
        P = P + (A @ P + P @ A.T + noise - K @ K.T) * dt
        P = 0.5 * (P + P.T)
        means[i + 1], covs[i + 1] = m, P
    return FilterTrack(grid.times.copy(), means, covs)
