import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from grae_lab import objectives as ob
from grae_lab.errors import ZeroColumn
from grae_lab.network import Layer, MlpNetwork, forward, input_jacobian
from grae_lab.probmodel import LOG_2PI, ObservationModel, kl_std_normal

from conftest import point_away_from_kinks, random_net

GAUSS = ObservationModel("gaussian_unit")


def linear(A, b=None):
    A = np.asarray(A, dtype=float)
    return MlpNetwork([Layer(A, np.zeros(A.shape[0]) if b is None else b, "identity")])


def const_encoder(h):
    return lambda _x: np.asarray(h, dtype=float)


def spd(rng, d, scale=0.3):
    B = scale * rng.standard_normal((d, d))
    return B @ B.T + scale * np.eye(d)


# -- Monte Carlo objective ------------------------------------------------------

def test_mc_degenerate_posterior_is_reconstruction(rng):
    dec = random_net(rng, [2, 4, 3], "tanh")
    x, h = rng.standard_normal(3), rng.standard_normal(2)
    cfg = ob.ObjectiveConfig(beta=1e-300, mc_samples=1)
    val = ob.beta_vae_mc(const_encoder(h), 1e-100 * np.eye(2), dec, GAUSS, x, cfg, rng)
    assert val == pytest.approx(GAUSS.loglik(x, forward(dec, h)[0]), abs=1e-12)


def test_mc_linear_gaussian_within_three_se(rng):
    A = rng.standard_normal((3, 2))
    x, h = rng.standard_normal(3), rng.standard_normal(2)
    F = np.linalg.cholesky(spd(rng, 2))
    S, beta, n = F @ F.T, 0.7, 100_000
    closed = -0.5 * (np.sum((x - A @ h) ** 2) + np.trace(A @ S @ A.T)) - 1.5 * LOG_2PI - beta * kl_std_normal(h, S)
    lls = ob.mc_loglik_samples(const_encoder(h), F, linear(A), GAUSS, x, n, np.random.default_rng(4))
    val = ob.beta_vae_mc(const_encoder(h), F, linear(A), GAUSS, x, ob.ObjectiveConfig(beta, n), np.random.default_rng(4))
    assert abs(val - closed) < 3 * lls.std() / np.sqrt(n)


def test_mc_same_seed_same_value(rng):
    dec = random_net(rng, [2, 3], "elu")
    args = (const_encoder([0.1, 0.2]), 0.5 * np.eye(2), dec, GAUSS, np.ones(3), ob.ObjectiveConfig(0.3, 16))
    assert ob.beta_vae_mc(*args, np.random.default_rng(9)) == ob.beta_vae_mc(*args, np.random.default_rng(9))


def test_config_validation():
    with pytest.raises(ValueError):
        ob.ObjectiveConfig(beta=0.0)
    with pytest.raises(ValueError):
        ob.ObjectiveConfig(k=0)
    with pytest.raises(ValueError):
        ob.ObjectiveConfig(hessian_mode="exact")


# -- Hessian and Taylor family --------------------------------------------------------------

def test_hessian_linear_and_identity(rng):
    A = rng.standard_normal((4, 2))
    z, x = rng.standard_normal(2), rng.standard_normal(4)
    np.testing.assert_allclose(ob.hessian_fx(linear(A), GAUSS, x, z), -A.T @ A, atol=1e-14)
    np.testing.assert_allclose(ob.hessian_fx(linear(A), GAUSS, x, z, "finite_difference"), -A.T @ A, atol=1e-6)
    np.testing.assert_allclose(ob.hessian_fx(linear(np.eye(3)), GAUSS, x[:3], z.tolist() + [0.0]), -np.eye(3))


def test_hessian_modes_agree_for_relu(rng):
    for _ in range(10):
        dec = random_net(rng, [2, 6, 3], "relu", out_act="identity")
        z = point_away_from_kinks(dec, rng, margin=1e-2)
        x = rng.standard_normal(3)
        a = ob.hessian_fx(dec, GAUSS, x, z)
        b = ob.hessian_fx(dec, GAUSS, x, z, "finite_difference")
        assert np.max(np.abs(a - b)) < 1e-4
        S = spd(rng, 2)
        assert abs(ob.taylor_objective(z, S, dec, GAUSS, x, 0.5) - ob.taylor_objective(z, S, dec, GAUSS, x, 0.5, "finite_difference")) < 1e-6


def test_taylor_zero_covariance_limit(rng):
    dec = random_net(rng, [2, 4, 3], "tanh")
    x, h = rng.standard_normal(3), rng.standard_normal(2)
    val = ob.taylor_objective(h, 1e-14 * np.eye(2), dec, GAUSS, x, beta=0.0)
    assert val == pytest.approx(GAUSS.loglik(x, forward(dec, h)[0]), abs=1e-10)


def test_optimal_covariance_examples(rng):
    x, z = rng.standard_normal(3), rng.standard_normal(2)
    np.testing.assert_allclose(ob.optimal_covariance(linear(np.zeros((3, 2))), GAUSS, x, z, 0.5), np.eye(2))
    A = np.array([[1.0, 0.0], [0.0, np.sqrt(3.0)], [0.0, 0.0]])  # A^T A = diag(1, 3)
    np.testing.assert_allclose(ob.optimal_covariance(linear(A), GAUSS, x, z, 1.0), np.diag([0.5, 0.25]), atol=1e-14)
    with pytest.raises(ValueError):
        ob.optimal_covariance(linear(A), GAUSS, x, z, 0.0)


def _numeric_optimal_cov(H, beta):
    """Maximize 1/2 tr(H S) - beta/2 (tr S - log|S|) over Cholesky factors."""
    d = H.shape[0]
    il = np.tril_indices(d)

    def neg(p):
        L = np.zeros((d, d))
        L[il] = p
        S = L @ L.T
        val = 0.5 * np.sum(H * S) - 0.5 * beta * (np.trace(S) - 2 * np.sum(np.log(np.abs(np.diag(L)))))
        G = (H - beta * np.eye(d)) @ L + beta * np.diag(1.0 / np.diag(L))
        return -val, -G[il]

    p0 = np.eye(d)[il]
    res = minimize(neg, p0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 10_000})
    L = np.zeros((d, d))
    L[il] = res.x
    return L @ L.T


def test_optimal_covariance_matches_numeric_maximization(rng):
    dec = random_net(rng, [3, 5, 4], "elu")
    x, z = rng.standard_normal(4), rng.standard_normal(3)
    for beta in (0.1, 0.4, 1.0):
        H = ob.hessian_fx(dec, GAUSS, x, z)
        assert np.linalg.norm(ob.optimal_covariance(dec, GAUSS, x, z, beta) - _numeric_optimal_cov(H, beta)) < 1e-5


def test_optimal_covariance_is_local_max(rng):
    dec = random_net(rng, [2, 5, 3], "tanh")
    x, h = rng.standard_normal(3), rng.standard_normal(2)
    S = ob.optimal_covariance(dec, GAUSS, x, h, 0.3)
    best = ob.taylor_objective(h, S, dec, GAUSS, x, 0.3)
    for _ in range(50):
        E = 0.05 * rng.standard_normal((2, 2))
        P = S + E @ E.T - 0.02 * np.eye(2) * rng.uniform()
        if np.min(np.linalg.eigvalsh(P)) <= 0:
            continue
        assert ob.taylor_objective(h, P, dec, GAUSS, x, 0.3) <= best + 1e-12


def test_profiled_identity_over_beta(rng):
    dec = random_net(rng, [2, 6, 4], "elu")
    x, h = rng.standard_normal(4), rng.standard_normal(2)
    for beta in (0.1, 0.4, 1.0):
        S = ob.optimal_covariance(dec, GAUSS, x, h, beta)
        prof = ob.profiled_objective(h, dec, GAUSS, x, beta)
        assert prof == pytest.approx(ob.taylor_objective(h, S, dec, GAUSS, x, beta), abs=1e-10)


def test_profiled_zero_hessian(rng):
    x, h = rng.standard_normal(3), rng.standard_normal(2)
    dec = linear(np.zeros((3, 2)), b=np.ones(3))
    expected = GAUSS.loglik(x, np.ones(3)) - 0.25 * h @ h
    assert ob.profiled_objective(h, dec, GAUSS, x, 0.5) == pytest.approx(expected, abs=1e-12)


# -- GRAE and its sampled bound --------------------------------------------------------------

def test_grae_trivial_and_d1_example():
    x = np.zeros(2)
    assert ob.grae(const_encoder([0.0]), linear(np.zeros((2, 1))), x, 1.0) == 0.0
    A = np.array([[2.0], [0.0]])  # column norm^2 = 4
    assert ob.grae(const_encoder([0.0]), linear(A), x, 1.0) == pytest.approx(0.5 * np.log(5.0), abs=1e-12)
    assert ob.grae(const_encoder([0.0]), linear(A), x, 1.0) == pytest.approx(0.804719, abs=1e-6)


def test_grae_offset_identity(rng):
    for _ in range(5):
        dec = random_net(rng, [3, 5, 4], "elu")
        x, h = rng.standard_normal(4), rng.standard_normal(3)
        for beta in (0.05, 0.5):
            s = ob.grae(const_encoder(h), dec, x, beta) + ob.profiled_objective(h, dec, GAUSS, x, beta) + ob.gaussian_normalizer(4)
            assert abs(s) < 1e-10


def test_grae_approx_d1_equals_grae(rng):
    dec = random_net(rng, [1, 4, 3], "tanh")
    x, h = rng.standard_normal(3), rng.standard_normal(1)
    assert ob.grae_approx(const_encoder(h), dec, x, 0.3, 1, rng) == pytest.approx(ob.grae(const_encoder(h), dec, x, 0.3), abs=1e-12)


def test_grae_approx_column_average_is_hadamard(rng):
    dec = random_net(rng, [4, 6, 5], "elu")
    x, h, beta = rng.standard_normal(5), rng.standard_normal(4), 0.2
    vals = [ob.grae_approx(const_encoder(h), dec, x, beta, 1, rng, columns=[c]) for c in range(4)]
    J = input_jacobian(dec, h)
    r = x - forward(dec, h)[0]
    expected = 0.5 * r @ r + 0.5 * beta * h @ h + 0.5 * beta * ob.hadamard_bound(J, beta)
    assert abs(np.mean(vals) - expected) < 1e-12


def test_grae_approx_weighted_columns_for_bernoulli(rng):
    dec = random_net(rng, [2, 4, 3], "tanh", out_act="sigmoid")
    x, h, beta = np.array([1.0, 0.0, 1.0]), rng.standard_normal(2), 0.5
    g = forward(dec, h)[0]
    Jw = np.sqrt(-ObservationModel("bernoulli").hessian_diag(x, g))[:, None] * input_jacobian(dec, h)
    vals = [ob.grae_approx(const_encoder(h), dec, x, beta, 1, rng, ObservationModel("bernoulli"), [c]) for c in range(2)]
    expected = -ObservationModel("bernoulli").loglik(x, g) + 0.5 * beta * h @ h + 0.5 * beta * ob.hadamard_bound(Jw, beta)
    assert np.mean(vals) == pytest.approx(expected, abs=1e-10)


def test_hadamard_equal_for_diagonal():
    J = np.array([[2.0, 0.0], [0.0, 0.5], [0.0, 0.0]])
    assert ob.hadamard_bound(J, 0.3) == pytest.approx(ob.log_det_regularizer(J, 0.3), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(D=st.integers(1, 6), d=st.integers(1, 5), beta=st.floats(0.01, 5.0), seed=st.integers(0, 10**6))
def test_hadamard_dominates(D, d, beta, seed):
    J = np.random.default_rng(seed).standard_normal((D, d))
    assert ob.hadamard_bound(J, beta) >= ob.log_det_regularizer(J, beta) - 1e-12


# -- gap and diagnostics ---------------------------------------------------------------

def test_gap_zero_cases(rng):
    J = rng.standard_normal((4, 3))
    M = np.eye(3) + J.T @ J / 0.4
    assert abs(ob.taylor_gap(J, np.linalg.inv(M), 0.4)) < 1e-12
    assert ob.taylor_gap(np.zeros((4, 3)), np.eye(3), 0.4) == pytest.approx(0.0, abs=1e-15)


def test_gap_equals_objective_difference(rng):
    dec = random_net(rng, [3, 5, 4], "elu")
    x, h = rng.standard_normal(4), rng.standard_normal(3)
    S, beta = spd(rng, 3), 0.25
    J = input_jacobian(dec, h)
    diff = ob.taylor_objective(h, S, dec, GAUSS, x, beta) - ob.profiled_objective(h, dec, GAUSS, x, beta)
    assert abs(ob.taylor_gap(J, S, beta) + diff) < 1e-10


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 4), seed=st.integers(0, 10**6), beta=st.floats(0.01, 3.0))
def test_gap_nonnegative(d, seed, beta):
    rng = np.random.default_rng(seed)
    J = rng.standard_normal((d + 1, d))
    assert ob.taylor_gap(J, spd(rng, d), beta) >= -1e-10


def test_orthogonality_penalty(rng):
    assert ob.orthogonality_penalty(np.diag([2.0, 3.0, 1.0])) == 0.0
    c = rng.standard_normal(4)
    assert ob.orthogonality_penalty(np.stack([c, c], axis=1)) == pytest.approx(1.0)
    J = rng.standard_normal((5, 4))
    pairs = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    est = np.mean([ob.orthogonality_penalty(J, mode="sampled_pair", pair=p) for p in pairs])
    assert abs(est - ob.orthogonality_penalty(J)) < 1e-12
    assert ob.orthogonality_penalty(J, rng=rng, mode="sampled_pair") >= 0
    with pytest.raises(ZeroColumn):
        ob.orthogonality_penalty(np.array([[1.0, 0.0], [2.0, 0.0]]))


def test_frobenius_reg(rng):
    assert ob.frobenius_reg(np.eye(2), -np.ones(2)) == pytest.approx(1.0)
    assert ob.frobenius_reg(np.zeros((3, 2)), -np.ones(3)) == 0.0
    J = rng.standard_normal((4, 2))
    beta = 100 * np.linalg.norm(J.T @ J, 2)
    first_order = ob.frobenius_reg(J, -np.ones(4))
    exact = 0.5 * beta * ob.log_det_regularizer(J, beta)
    assert abs(exact - first_order) / first_order < 0.01


def test_metric_residual(rng):
    J, beta = rng.standard_normal((4, 2)), 0.3
    S = np.linalg.inv(np.eye(2) + J.T @ J / beta)
    assert ob.metric_residual(J, S, beta) < 1e-10
    G = J.T @ J
    assert ob.metric_residual(J, np.eye(2), beta) == pytest.approx(np.linalg.norm(G) / (1 + np.linalg.norm(G)))


def test_off_block_mass(rng):
    M = np.zeros((4, 4))
    M[:2, :2] = rng.standard_normal((2, 2))
    M[2:, 2:] = rng.standard_normal((2, 2))
    assert ob.off_block_mass(M, 2) == 0.0
    assert ob.off_block_mass(np.ones((4, 4)), 2) == 0.5
    R = rng.standard_normal((5, 5))
    out = sum(R[i, j] ** 2 for i in range(5) for j in range(5) if i // 2 != j // 2)
    assert ob.off_block_mass(R, 2) == pytest.approx(out / np.sum(R * R), abs=1e-14)
    assert ob.off_block_mass(R, 5) == 0.0


def test_mc_taylor_gap_shrinks_with_beta(rng):
    # fixed smooth decoder, covariance at its beta-optimum: the neglected
    # higher-order terms scale with the posterior spread
    dec = random_net(rng, [2, 8, 4], "elu", out_act="identity")
    x, h = rng.standard_normal(4), 0.5 * rng.standard_normal(2)
    gaps = []
    for beta in (0.4, 0.1, 0.02):
        S = ob.optimal_covariance(dec, GAUSS, x, h, beta)
        F = np.linalg.cholesky(S)
        mc = ob.beta_vae_mc(const_encoder(h), F, dec, GAUSS, x, ob.ObjectiveConfig(beta, 10_000), np.random.default_rng(2))
        gaps.append(abs(mc - ob.taylor_objective(h, S, dec, GAUSS, x, beta)))
    assert gaps[0] > gaps[1] > gaps[2]
