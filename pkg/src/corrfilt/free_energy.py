"""Free energy of Gaussian candidate path measures.

For a candidate ``P`` on the signal grid the free energy is

    F(P) = KL(P || reference) + E_P[H]

and, since the posterior is the Gibbs measure ``exp(-H) / Z`` relative to
the reference, ``F(P) = KL(P || posterior) - log Z``.  The reports below
estimate ``F`` by Monte Carlo and compare the gap ``F(P) - F(posterior)``
with the closed-form KL divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .gibbs import energy_terms
from .model import LinearModel, ModelError, NumericalError, Path, TimeGrid, validate_linear
from .oracle import (PSD_FLOOR, GaussianLaw, Layout, _check_dense_level,
                     build_discrete_joint_law, condition_on_observations)
from .sampler import as_seed

#: excess kurtosis of sampled energies above which the expectation is reported as +inf
DEFAULT_KURTOSIS_GUARD = 50.0


@dataclass(frozen=True, eq=False)
class CandidateMeasure:
    law: GaussianLaw
    label: str = "candidate"

    def __post_init__(self):
        if self.law.layout.n != 0:
            raise ModelError("candidate must be a law over signal paths only")


@dataclass(frozen=True)
class FreeEnergyReport:
    label: str
    kl_to_reference: float
    expected_energy: float
    gibbs_gap: float
    gap_predicted: float
    mc_standard_error: float
    gap_standard_error: float
    energy_kurtosis: float = 0.0
    flags: tuple = field(default_factory=tuple)

    @property
    def total(self) -> float:
        return self.kl_to_reference + self.expected_energy


def reference_law(model: LinearModel, grid: TimeGrid, y: Path) -> GaussianLaw:
    """The reference measure given ``y`` as an explicit Gaussian on ``x_1..x_N``."""
    validate_linear(model).raise_if_failed()
    _check_dense_level(grid)
    if not y.grid.same_as(grid):
        raise ModelError("observation path is on a different grid")
    t = grid.times[1:]
    mean = (model.x0 + y.values[1:] @ model.sigma1.T).ravel()
    cov = np.kron(np.minimum.outer(t, t), model.noise_cov)
    return GaussianLaw(mean, cov, Layout(grid.n_steps, model.d, 0))


def posterior_law(model: LinearModel, grid: TimeGrid, y: Path) -> GaussianLaw:
    return condition_on_observations(build_discrete_joint_law(model, grid), y)


def kl_gaussian(p: GaussianLaw, q: GaussianLaw) -> float:
    """Closed-form ``KL(p || q)``; ``inf`` when ``p`` is singular."""
    if p.dim != q.dim:
        raise ModelError(f"dimension mismatch: {p.dim} vs {q.dim}")
    try:
        cq = linalg.cho_factor(q.cov, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("reference covariance singular beyond jitter floor") from exc
    dq = np.diag(cq[0])
    if dq.min() ** 2 < PSD_FLOOR * np.abs(np.diag(q.cov)).max():
        raise NumericalError("reference covariance singular beyond jitter floor")
    try:
        lp = np.linalg.cholesky(p.cov)
    except np.linalg.LinAlgError:
        return float("inf")
    k = p.dim
    diff = q.mean - p.mean
    trace = np.trace(linalg.cho_solve(cq, p.cov))
    maha = diff @ linalg.cho_solve(cq, diff)
    logdet_q = 2.0 * np.sum(np.log(dq))
    logdet_p = 2.0 * np.sum(np.log(np.diag(lp)))
    return float(max(0.5 * (trace + maha - k + logdet_q - logdet_p), 0.0))


def _candidate_paths(law: GaussianLaw, model: LinearModel, z: np.ndarray) -> np.ndarray:
    flat = law.mean + z @ law.cholesky().T
    return law.signal_paths(model.x0, flat)


def _candidate_energies(candidate: CandidateMeasure, model: LinearModel, y: Path, M: int,
                        seed) -> np.ndarray:
    law = candidate.law
    if law.layout.N != y.grid.n_steps or law.layout.d != model.d:
        raise ModelError("candidate is not on the observation grid")
    z = as_seed(seed).generator().standard_normal((M, law.dim))
    X = _candidate_paths(law, model, z)
    s, q, lk = energy_terms(model, X, y.values)
    return -s + q + lk


def _summarize(H: np.ndarray, guard: float):
    M = H.size
    est = float(H.mean())
    se = float(H.std(ddof=1) / np.sqrt(M))
    kurt = float(stats.kurtosis(H)) if H.std() > 0 else 0.0
    if kurt > guard:
        return float("inf"), float("inf"), kurt
    return est, se, kurt


def expected_energy(candidate: CandidateMeasure, model: LinearModel, y: Path, M: int, seed,
                    kurtosis_guard: float = DEFAULT_KURTOSIS_GUARD):
    """Monte Carlo ``E[H]`` under the candidate, with its standard error.

    Draws are exact (Cholesky) samples of the candidate Gaussian.  When the
    sampled energies look heavy-tailed (excess kurtosis above the guard) the
    expectation is reported as ``+inf``; this is a diagnostic, not a proof.
    """
    validate_linear(model).raise_if_failed()
    H = _candidate_energies(candidate, model, y, M, seed)
    est, se, _ = _summarize(H, kurtosis_guard)
    return est, se


def free_energy(candidate: CandidateMeasure, model: LinearModel, grid: TimeGrid, y: Path,
                M: int, seed, posterior: GaussianLaw | None = None,
                reference: GaussianLaw | None = None,
                kurtosis_guard: float = DEFAULT_KURTOSIS_GUARD) -> FreeEnergyReport:
    """Free-energy report of ``candidate``, including its gap to the posterior.

    The posterior is evaluated with the same standard-normal draws as the
    candidate, so the gap is estimated from paired differences.
    """
    validate_linear(model).raise_if_failed()
    if posterior is None:
        posterior = posterior_law(model, grid, y)
    if reference is None:
        reference = reference_law(model, grid, y)
    flags = []
    kl_ref = kl_gaussian(candidate.law, reference)
    H_c = _candidate_energies(candidate, model, y, M, seed)
    H_p = _candidate_energies(CandidateMeasure(posterior, "posterior"), model, y, M, seed)
    e_c, se_c, kurt = _summarize(H_c, kurtosis_guard)
    if not np.isfinite(e_c):
        flags.append("energy-heavy-tailed")
    e_p = float(H_p.mean())
    gap = kl_ref + e_c - (kl_gaussian(posterior, reference) + e_p)
    diff = H_c - H_p
    gap_se = float(diff.std(ddof=1) / np.sqrt(M)) if np.isfinite(e_c) else float("inf")
    return FreeEnergyReport(
        label=candidate.label,
        kl_to_reference=kl_ref,
        expected_energy=e_c,
        gibbs_gap=float(gap),
        gap_predicted=kl_gaussian(candidate.law, posterior),
        mc_standard_error=se_c,
        gap_standard_error=gap_se,
        energy_kurtosis=kurt,
        flags=tuple(flags),
    )


def mean_shift_family(center: GaussianLaw, direction, s_values, label: str = "shift"):
    """Candidates with the covariance of ``center`` and mean ``center.mean + s * direction``."""
    v = np.broadcast_to(np.asarray(direction, dtype=float), center.mean.shape)
    return [CandidateMeasure(GaussianLaw(center.mean + s * v, center.cov, center.layout),
                             f"{label} s={s:+g}") for s in s_values]


def minimize_over_family(model: LinearModel, grid: TimeGrid, y: Path, family, M: int, seed,
                         posterior: GaussianLaw | None = None):
    """Evaluate every candidate and return ``(best candidate, its report, all reports)``.

    All candidates share one seed, so the comparison uses common random numbers.
    """
    family = list(family)
    if not family:
        raise ValueError("empty candidate family")
    if posterior is None:
        posterior = posterior_law(model, grid, y)
    reference = reference_law(model, grid, y)
    reports = [free_energy(c, model, grid, y, M, seed, posterior, reference) for c in family]
    k = int(np.argmin([r.total for r in reports]))
    return family[k], reports[k], reports


def fit_curvature(s_values, totals) -> float:
    """Second derivative of a least-squares quadratic through ``(s, total)``."""
    a = np.polyfit(np.asarray(s_values, dtype=float), np.asarray(totals, dtype=float), 2)[0]
    return float(2.0 * a)
