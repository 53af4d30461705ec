"""Correlated-noise filtering lab.

Path-measure singularity diagnostics for signal/observation diffusions that
share a noise source, and the conditional Gibbs (free-energy) description of
the linear filter, checked against exact Gaussian computations.
"""

__version__ = "0.1.0"

from .model import (Coupling, LinearModel, ModelError, NonlinearModel, NumericalError, Path,
                    PathPair, TimeGrid, ValidationReport, make_dyadic_grid, validate_linear,
                    validate_nonlinear)
from .sampler import (SeedSpec, sample_reference, sample_reference_ensemble, simulate_joint,
                      simulate_joint_ensemble, simulate_product, simulate_product_ensemble)
from .oracle import (FilterTrack, GaussianLaw, Layout, build_discrete_joint_law,
                     condition_on_observations, exact_log_normalizer, kalman_correlated,
                     law_to_track)
from .gibbs import (EnergyBreakdown, MomentTrack, WeightedEnsemble, energy,
                    estimate_log_normalizer, importance_posterior, mitter_newton_posterior,
                    mn_energy_uncorrelated)
from .free_energy import (CandidateMeasure, FreeEnergyReport, expected_energy, free_energy,
                          kl_gaussian, mean_shift_family, minimize_over_family, posterior_law,
                          reference_law)
from .singularity import (CovariationStat, RnExperimentRow, classify_coupling,
                          covariation_decay_study, discrete_cov_matrices, discrete_log_rn,
                          empirical_qv_blocks, quadratic_covariation,
                          rn_degeneration_experiment)
