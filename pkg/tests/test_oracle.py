import itertools

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from corrfilt import (GaussianLaw, Layout, LinearModel, Path, SeedSpec,
                      build_discrete_joint_law, condition_on_observations, kalman_correlated,
                      law_to_track, make_dyadic_grid, simulate_joint, simulate_joint_ensemble)
from corrfilt.model import ModelError, NumericalError
from corrfilt.oracle import repair_psd
from corrfilt.singularity import discrete_cov_matrices
from corrfilt.tables import read_track

from conftest import DATA


def textbook_kalman(model, grid, y):
    """Discrete Kalman filter for the Euler chain with uncorrelated noise.

    Observation increment dy_k = C dt x_k + v_k, v_k ~ N(0, dt I); the state
    moves with F = I + A dt and process noise sigma0 sigma0^T dt.
    """
    dt = grid.dt
    F = np.eye(model.d) + model.A * dt
    H = model.C * dt
    Qn = model.sigma0 @ model.sigma0.T * dt
    R = np.eye(model.n) * dt
    m, P = model.x0.astype(float).copy(), np.zeros((model.d, model.d))
    for dy in np.diff(y.values, axis=0):
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        m = m + K @ (dy - H @ m)
        P = (np.eye(model.d) - K @ H) @ P
        m = F @ m
        P = F @ P @ F.T + Qn
    return m, P


def decorrelated_kalman(model, grid, y):
    """Exact filter for the correlated Euler chain after removing the shared noise.

    Substituting dW_k = dy_k - C x_k dt gives
    x_{k+1} = (F - sigma1 C dt) x_k + sigma1 dy_k + sigma0 dB_k,
    with private noise independent of the observation error.
    """
    dt = grid.dt
    G = np.eye(model.d) + (model.A - model.sigma1 @ model.C) * dt
    H = model.C * dt
    Qn = model.sigma0 @ model.sigma0.T * dt
    m, P = model.x0.astype(float).copy(), np.zeros((model.d, model.d))
    for dy in np.diff(y.values, axis=0):
        S = H @ P @ H.T + np.eye(model.n) * dt
        K = P @ H.T @ np.linalg.inv(S)
        m = m + K @ (dy - H @ m)
        P = P - K @ H @ P
        m = G @ m + model.sigma1 @ dy
        P = G @ P @ G.T + Qn
    return m, P


def textbook_kalman_bucy(model, grid, y):
    """Euler step of the uncorrelated Kalman-Bucy equations, written out directly."""
    dt = grid.dt
    m, P = model.x0.astype(float).copy(), np.zeros((model.d, model.d))
    ms, Ps = [m], [P]
    for dy in np.diff(y.values, axis=0):
        innov = dy - model.C @ m * dt
        m = m + model.A @ m * dt + P @ model.C.T @ innov
        P = P + (model.A @ P + P @ model.A.T + model.sigma0 @ model.sigma0.T
                 - P @ model.C.T @ model.C @ P) * dt
        ms.append(m)
        Ps.append(P)
    return np.array(ms), np.array(Ps)


def test_kronecker_form_of_random_walk_example():
    m = LinearModel(A=0, C=0, sigma0=1, sigma1=1, x0=0)
    g = make_dyadic_grid(3, 1.0)
    law = build_discrete_joint_law(m, g)
    cj, cp = discrete_cov_matrices(8, g.dt)
    np.testing.assert_allclose(law.cov, cj, atol=1e-15)
    i = np.arange(1, 9)
    A = g.dt * np.minimum.outer(i, i)
    np.testing.assert_allclose(law.cov, np.kron([[2, 1], [1, 1]], A), atol=1e-15)
    prod = law.cov.copy()
    prod[:8, 8:] = prod[8:, :8] = 0
    np.testing.assert_allclose(prod, np.kron([[2, 0], [0, 1]], A), atol=1e-15)
    np.testing.assert_allclose(prod, cp, atol=1e-15)


def test_single_step_covariance():
    law = build_discrete_joint_law(LinearModel(A=-1, C=0, sigma0=1, sigma1=0.5, x0=1),
                                   make_dyadic_grid(0, 0.3))
    dt = 0.3
    np.testing.assert_allclose(law.cov, [[1.25 * dt, 0.5 * dt], [0.5 * dt, dt]], rtol=1e-14)
    np.testing.assert_allclose(law.mean, [1 - 0.3, 0.0], rtol=1e-14)


def test_layout_indexing():
    lay = Layout(4, 2, 1)
    assert lay.index(1, 0) == 0 and lay.index(4, 1) == 7
    assert lay.index(1, 0, "observation") == 8 and lay.index(4, 0, "observation") == 11
    with pytest.raises(IndexError):
        lay.index(0, 0)


def test_conditioning_on_independent_observation_is_prior():
    m = LinearModel(A=-0.7, C=0, sigma0=1.2, sigma1=0, x0=0.3)
    g = make_dyadic_grid(3, 1.0)
    law = build_discrete_joint_law(m, g)
    y = simulate_joint(m, g, SeedSpec(1)).y
    post = condition_on_observations(law, y)
    prior = law.signal_law()
    np.testing.assert_allclose(post.mean, prior.mean, atol=1e-14)
    np.testing.assert_allclose(post.cov, prior.cov, atol=1e-14)


def test_near_deterministic_coupling():
    s0 = 0.01
    m = LinearModel(A=0, C=0, sigma0=s0, sigma1=1, x0=2.0)
    g = make_dyadic_grid(2, 1.0)
    y = simulate_joint(m, g, SeedSpec(5)).y
    post = condition_on_observations(build_discrete_joint_law(m, g), y)
    mean, covs = post.signal_marginals()
    np.testing.assert_allclose(mean[:, 0], 2.0 + y.values[1:, 0], atol=1e-9)
    np.testing.assert_allclose(covs[:, 0, 0], s0 ** 2 * g.times[1:], rtol=1e-6)


def test_golden_posterior_tracks(bench_model, bench_y_fine):
    for level in (6, 7, 8):
        comments, t, means, covs = read_track(DATA / f"benchmark_posterior_level{level}.csv")
        assert f"model_hash={bench_model.fingerprint()}" in comments[0]
        y = bench_y_fine.subsample(level)
        post = condition_on_observations(build_discrete_joint_law(bench_model, y.grid), y)
        track = law_to_track(post, y.grid, bench_model.x0)
        np.testing.assert_allclose(track.means, means, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(track.covs, covs, rtol=1e-10, atol=1e-14)


def test_schur_terminal_matches_exact_correlated_filter(bench_model, bench_y):
    g = bench_y.grid
    post = condition_on_observations(build_discrete_joint_law(bench_model, g), bench_y)
    mean, covs = post.signal_marginals()
    m, P = decorrelated_kalman(bench_model, g, bench_y)
    np.testing.assert_allclose(mean[-1], m, rtol=1e-10)
    np.testing.assert_allclose(covs[-1], P, rtol=1e-10)


def test_schur_terminal_matches_textbook_kalman_without_shared_noise():
    m = LinearModel(A=[[-1.0, 0.3], [0.0, -0.5]], C=[[1.0, 0.5]], sigma0=[[1.0, 0], [0.2, 0.7]],
                    sigma1=[[0.0], [0.0]], x0=[1.0, -1.0])
    g = make_dyadic_grid(5, 1.0)
    y = simulate_joint(m, g, SeedSpec(9)).y
    post = condition_on_observations(build_discrete_joint_law(m, g), y)
    mean, covs = post.signal_marginals()
    km, kP = textbook_kalman(m, g, y)
    np.testing.assert_allclose(mean[-1], km, rtol=1e-10)
    np.testing.assert_allclose(covs[-1], kP, rtol=1e-10)


def test_kalman_without_coupling_or_observation():
    a, s0, x0 = -0.8, 1.3, 2.0
    m = LinearModel(A=a, C=0, sigma0=s0, sigma1=0, x0=x0)
    g = make_dyadic_grid(5, 1.0)
    y = Path(g, np.cumsum(np.r_[0.0, np.full(32, 0.01)]))
    tr = kalman_correlated(m, g, y)
    dt = g.dt
    np.testing.assert_allclose(tr.means[:, 0], x0 * (1 + a * dt) ** np.arange(33), rtol=1e-13)
    P = [0.0]
    for _ in range(32):
        P.append(P[-1] + (2 * a * P[-1] + s0 ** 2) * dt)
    np.testing.assert_allclose(tr.covs[:, 0, 0], P, rtol=1e-13)


def test_kalman_matches_textbook_kalman_bucy_without_shared_noise():
    m = LinearModel(A=[[-1.0, 0.3], [0.0, -0.5]], C=[[1.0, 0.5]], sigma0=[[1.0, 0], [0.2, 0.7]],
                    sigma1=[[0.0], [0.0]], x0=[1.0, -1.0])
    g = make_dyadic_grid(6, 1.0)
    y = simulate_joint(m, g, SeedSpec(19)).y
    tr = kalman_correlated(m, g, y)
    ms, Ps = textbook_kalman_bucy(m, g, y)
    np.testing.assert_allclose(tr.means, ms, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(tr.covs, Ps, rtol=1e-12, atol=1e-14)


def test_kalman_converges_to_schur_at_first_order(bench_model, bench_y_fine):
    errs = []
    for level in (6, 7, 8):
        y = bench_y_fine.subsample(level)
        post = condition_on_observations(build_discrete_joint_law(bench_model, y.grid), y)
        mean, covs = post.signal_marginals()
        tr = kalman_correlated(bench_model, y.grid, y)
        errs.append((abs(tr.means[-1, 0] - mean[-1, 0]), abs(tr.covs[-1, 0, 0] - covs[-1, 0, 0])))
    errs = np.array(errs)
    ratios = errs[:-1] / errs[1:]
    # halves per refinement, within 20%
    assert np.all((ratios > 2 / 1.2) & (ratios < 2 * 1.2)), ratios


def test_sampler_matches_joint_law_componentwise():
    m = LinearModel(A=[[-1.0, 0.5], [0.0, -0.3]], C=[[1.0, -1.0]],
                    sigma0=[[0.8, 0.0], [0.3, 0.6]], sigma1=[[0.5], [-0.2]], x0=[1.0, 0.5])
    g = make_dyadic_grid(3, 1.0)
    law = build_discrete_joint_law(m, g)
    X, Y = simulate_joint_ensemble(m, g, SeedSpec(2024), 100_000)
    Z = np.concatenate([X[:, 1:].reshape(len(X), -1), Y[:, 1:].reshape(len(Y), -1)], axis=1)
    M = len(Z)
    mean = Z.mean(0)
    se_mean = Z.std(0, ddof=1) / np.sqrt(M)
    assert np.all(np.abs(mean - law.mean) <= 5 * se_mean)
    C = Z - law.mean
    prods = C[:, :, None] * C[:, None, :]
    emp = prods.mean(0)
    se_cov = prods.std(0, ddof=1) / np.sqrt(M)
    assert np.all(np.abs(emp - law.cov) <= 5 * se_cov)


@pytest.mark.parametrize("level, nodes", [(1, 8), (2, 6)])
def test_total_variance_identity_by_gauss_hermite(bench_model, level, nodes):
    g = make_dyadic_grid(level, 1.0)
    law = build_discrete_joint_law(bench_model, g)
    so, lay = law.layout.observation, law.layout
    mu_y, L = law.mean[so], np.linalg.cholesky(law.cov[so, so])
    z, w = hermegauss(nodes)
    w = w / w.sum()
    prior = law.signal_law()
    e_mean = np.zeros(prior.dim)
    e_cov = np.zeros((prior.dim, prior.dim))
    e_outer = np.zeros((prior.dim, prior.dim))
    for idx in itertools.product(range(nodes), repeat=lay.N):
        wt = np.prod(w[list(idx)])
        yv = mu_y + L @ z[list(idx)]
        y = Path(g, np.r_[0.0, yv])
        post = condition_on_observations(law, y)
        e_mean += wt * post.mean
        e_cov += wt * post.cov
        e_outer += wt * np.outer(post.mean - prior.mean, post.mean - prior.mean)
    np.testing.assert_allclose(e_mean, prior.mean, atol=1e-8)
    np.testing.assert_allclose(e_cov + e_outer, prior.cov, atol=1e-8)


def test_dense_grid_cap(bench_model):
    with pytest.raises(ModelError, match="grid cap"):
        build_discrete_joint_law(bench_model, make_dyadic_grid(13, 1.0))


def test_degenerate_observation_block():
    law = GaussianLaw(np.zeros(2), np.diag([1.0, 0.0]), Layout(1, 1, 1))
    with pytest.raises(NumericalError, match="degenerate observation law"):
        condition_on_observations(law, Path(make_dyadic_grid(0, 1.0), [0.0, 0.3]))


def test_psd_repair_policy():
    c = np.diag([1.0, -1e-13])
    np.testing.assert_array_equal(np.linalg.eigvalsh(repair_psd(c)) >= 0, True)
    with pytest.raises(NumericalError):
        repair_psd(np.diag([1.0, -1e-6]))
    with pytest.raises(NumericalError, match="symmetric"):
        GaussianLaw(np.zeros(2), [[1.0, 0.5], [0.2, 1.0]], Layout(2, 1))
