import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from corrfilt import (Coupling, LinearModel, NonlinearModel, Path, PathPair, SeedSpec,
                      classify_coupling, covariation_decay_study, discrete_cov_matrices,
                      discrete_log_rn, empirical_qv_blocks, make_dyadic_grid,
                      quadratic_covariation, rn_degeneration_experiment, simulate_joint,
                      simulate_joint_ensemble, simulate_product)
from corrfilt.model import ModelError
from corrfilt.singularity import (classification_experiment, covariation_sums,
                                  expected_qv_blocks, fit_linear_trend, log2_variance_slope,
                                  qv_blocks_ensemble, rn_exponent_closed_form,
                                  rn_exponent_matrix, sample_discrete_pairs)

from conftest import assert_within_se

LN2 = np.log(2.0)


def wavy_model():
    return NonlinearModel(b=lambda t, x: -x, h=lambda x: np.sin(x),
                          sigma0=lambda t, x: np.eye(1),
                          sigma1=lambda t, x: np.array([[0.5 + 0.2 * np.sin(x[0])]]),
                          x0_sampler=lambda rng: np.array([0.3]), d=1, n=1)


def test_discrete_covariances_small_cases():
    cj, cp = discrete_cov_matrices(1, 0.5)
    np.testing.assert_array_equal(cj, [[1.0, 0.5], [0.5, 0.5]])
    np.testing.assert_array_equal(cp, [[1.0, 0.0], [0.0, 0.5]])
    cj, _ = discrete_cov_matrices(2, 1.0)
    np.testing.assert_array_equal(cj, [[2, 2, 1, 1], [2, 4, 1, 2], [1, 1, 1, 1], [1, 2, 1, 2]])


@pytest.mark.parametrize("N", [1, 2, 5, 16])
@pytest.mark.parametrize("dt", [0.1, 1.0, 1 / 64])
def test_exponent_closed_form_matches_inversion(N, dt):
    np.testing.assert_allclose(rn_exponent_closed_form(N, dt), rn_exponent_matrix(N, dt),
                               rtol=1e-9, atol=1e-9 / dt)


@pytest.mark.parametrize("N", [1, 4, 64])
def test_log_rn_at_origin(N):
    assert discrete_log_rn(np.zeros(2 * N), N, 1.0 / N) == 0.5 * N * LN2


@pytest.mark.parametrize("N", [1, 3])
def test_log_rn_is_density_ratio(N):
    cj, cp = discrete_cov_matrices(N, 0.25)
    z = np.random.default_rng(N).normal(size=(6, 2 * N))
    expected = (stats.multivariate_normal(cov=cj).logpdf(z)
                - stats.multivariate_normal(cov=cp).logpdf(z))
    np.testing.assert_allclose(discrete_log_rn(z, N, 0.25), expected, rtol=1e-10)


def test_single_step_formula():
    dt, x, y = 0.5, 0.7, -0.4
    expected = 0.5 * LN2 - 0.5 * (0.5 * x * x - 2 * x * y + y * y) / dt
    assert discrete_log_rn([x, y], 1, dt) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("N", [1, 2, 4, 8])
def test_density_ratio_integrates_to_one_under_product(N):
    z = sample_discrete_pairs(N, 1.0 / N, 200_000, "product", np.random.default_rng(N))
    r = np.exp(discrete_log_rn(z, N, 1.0 / N))
    assert_within_se(r.mean(), 1.0, r.std(ddof=1) / np.sqrt(r.size), 4, f"E[RN] N={N}")


def test_sampled_pairs_have_the_discrete_covariances():
    z = sample_discrete_pairs(3, 0.5, 100_000, "joint", np.random.default_rng(0))
    cj, _ = discrete_cov_matrices(3, 0.5)
    prods = z[:, :, None] * z[:, None, :]
    assert_within_se(prods.mean(0), cj, prods.std(0, ddof=1) / np.sqrt(len(z)), 5, "cov")


@pytest.mark.parametrize("measure, per_step", [("product", LN2 / 2 - 1), ("joint", LN2 / 2)])
def test_mean_log_rn_is_linear_in_steps(measure, per_step):
    Ns = [8, 16, 32, 64]
    rows = rn_degeneration_experiment(1.0, Ns, 4000, measure, SeedSpec(3))
    for r in rows:
        assert r.sampling_measure == measure
        assert_within_se(r.mean_log_rn, r.N * per_step, r.sd_log_rn / np.sqrt(4000), 4,
                         f"N={r.N}")
    slope, _, r2 = fit_linear_trend(Ns, [r.mean_log_rn for r in rows])
    assert slope == pytest.approx(per_step, abs=0.05) and r2 > 0.99


def test_discrete_guards():
    with pytest.raises(ModelError):
        discrete_cov_matrices(0, 1.0)
    with pytest.raises(ModelError):
        discrete_cov_matrices(5000, 1.0)
    with pytest.raises(ModelError):
        discrete_log_rn(np.zeros(3), 2, 1.0)


def test_covariation_of_constant_paths_is_zero():
    g = make_dyadic_grid(6, 1.0)
    pair = PathPair(Path(g, np.full(len(g), 3.0)), Path(g, np.zeros(len(g))), Coupling.REFERENCE)
    assert quadratic_covariation(pair, 1.0).value[0, 0] == 0.0


def test_covariation_of_path_with_itself_is_elapsed_time():
    g = make_dyadic_grid(14, 1.0)
    rng = np.random.default_rng(9)
    w = np.r_[0.0, np.cumsum(rng.normal(size=g.n_steps) * np.sqrt(g.dt))]
    pair = PathPair(Path(g, w), Path(g, w), Coupling.JOINT)
    stat = quadratic_covariation(pair, 0.5)
    # variance of the sum is 2 t^2 / N_t
    assert abs(stat.value[0, 0] - 0.5) <= 4 * np.sqrt(2 * 0.25 / 2 ** 13)
    with pytest.raises(ModelError):
        quadratic_covariation(pair, 0.3)


@given(seed=st.integers(0, 2 ** 32 - 1), a=st.integers(-4, 4), b=st.integers(-4, 4),
       e=st.integers(-3, 3))
def test_covariation_bilinear_for_dyadic_scalars(seed, a, b, e):
    rng = np.random.default_rng(seed)
    X1, X2, Y = (rng.normal(size=(1, 33, 2)) for _ in range(3))
    ca, cb = a * 2.0 ** e, float(b)
    lhs = covariation_sums(ca * X1 + cb * X2, Y, 32)
    rhs = ca * covariation_sums(X1, Y, 32) + cb * covariation_sums(X2, Y, 32)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(covariation_sums(Y, X1, 32),
                               covariation_sums(X1, Y, 32).transpose(0, 2, 1), rtol=1e-12)


@given(seed=st.integers(0, 2 ** 32 - 1), a=st.floats(-10, 10), b=st.floats(-10, 10))
def test_covariation_bilinear_general(seed, a, b):
    rng = np.random.default_rng(seed)
    X, Y1, Y2 = (rng.normal(size=(2, 17, 1)) for _ in range(3))
    lhs = covariation_sums(X, a * Y1 + b * Y2, 16)
    rhs = a * covariation_sums(X, Y1, 16) + b * covariation_sums(X, Y2, 16)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * (1 + abs(a) + abs(b)))


@given(seed=st.integers(0, 2 ** 32 - 1), k=st.integers(0, 64))
def test_covariation_additive_over_intervals(seed, k):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(3, 65, 2)), rng.normal(size=(3, 65, 1))
    whole = covariation_sums(X, Y, 64)
    parts = covariation_sums(X, Y, k) + covariation_sums(X, Y, 64, start=k)
    np.testing.assert_allclose(parts, whole, rtol=1e-12, atol=1e-12)


def test_joint_covariation_tracks_integrated_coupling():
    m = wavy_model()
    pair = simulate_joint(m, make_dyadic_grid(12, 1.0), SeedSpec(10))
    stat = quadratic_covariation(pair, 1.0, m)
    assert 0.3 <= stat.target_joint[0, 0] <= 0.7
    assert abs(stat.value[0, 0] - stat.target_joint[0, 0]) < 0.1
    assert np.isnan(quadratic_covariation(pair, 1.0).target_joint).all()


def test_product_covariation_variance_halves_per_level():
    m = LinearModel(A=-1, C=1, sigma0=1, sigma1=0.5, x0=1)
    rows = covariation_decay_study(m, 1.0, range(6, 11), 800, SeedSpec(12))
    assert -1.3 <= log2_variance_slope(rows) <= -0.7
    for r in rows:
        assert_within_se(r.mean[0, 0], 0.0, r.mean_se[0, 0], 4, f"level {r.level}")


def test_driftless_product_covariation_has_zero_mean():
    m = LinearModel(A=0, C=0, sigma0=0.7, sigma1=1.5, x0=0)
    (row,) = covariation_decay_study(m, 0.5, [8], 2000, SeedSpec(1))
    assert_within_se(row.mean[0, 0], 0.0, row.mean_se[0, 0], 4, "product mean")


def test_joint_covariation_mean_is_coupling_times_t():
    m = LinearModel(A=-1, C=1, sigma0=1, sigma1=0.5, x0=1)
    (row,) = covariation_decay_study(m, 0.5, [9], 1000, SeedSpec(2), sampling="joint")
    assert_within_se(row.mean[0, 0], 0.25, row.mean_se[0, 0], 4, "joint mean")
    assert row.target_norm == pytest.approx(0.25)


def test_classifier_labels_single_pairs():
    m = wavy_model()
    g = make_dyadic_grid(10, 1.0)
    assert classify_coupling(simulate_joint(m, g, SeedSpec(1)), m) is Coupling.JOINT
    assert classify_coupling(simulate_product(m, g, SeedSpec(1)), m) is Coupling.PRODUCT


def test_classifier_error_rates():
    m = LinearModel(A=-1, C=1, sigma0=1, sigma1=0.5, x0=1)
    res = classification_experiment(m, 10, 300, SeedSpec(5))
    assert res.joint_error_rate <= 0.01 and res.product_error_rate <= 0.01


def test_classifier_refusals():
    m = LinearModel(A=-1, C=1, sigma0=1, sigma1=0.0, x0=1)
    pair = simulate_joint(m, make_dyadic_grid(8, 1.0), SeedSpec(0))
    with pytest.raises(ModelError, match="separation"):
        classify_coupling(pair, m)
    with pytest.raises(ModelError, match="level"):
        classify_coupling(simulate_joint(m, make_dyadic_grid(6, 1.0), SeedSpec(0)),
                          m.replace(sigma1=1.0))


def test_expected_block_matrices():
    m = LinearModel(A=-1, C=1, sigma0=1, sigma1=0.5, x0=1)
    np.testing.assert_allclose(expected_qv_blocks(m, "joint"), [[1.25, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(expected_qv_blocks(m, "product"), [[1.25, 0.0], [0.0, 1.0]])


def test_block_estimate_error_shrinks_with_level():
    m = LinearModel(A=-1, C=1, sigma0=1, sigma1=0.5, x0=1)
    target = expected_qv_blocks(m, "joint")
    errs = []
    for level in (4, 7, 10):
        X, Y = simulate_joint_ensemble(m, make_dyadic_grid(level, 1.0), SeedSpec(level), 200)
        errs.append(np.abs(qv_blocks_ensemble(X, Y, 1.0) - target).mean())
    assert errs[0] > errs[1] > errs[2]
    pair = simulate_joint(m, make_dyadic_grid(12, 1.0), SeedSpec(3))
    np.testing.assert_allclose(empirical_qv_blocks(pair, m), target, atol=0.15)
