import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from grae_lab.errors import ConfigError, DomainError, LengthMismatch, NotPositiveDefinite
from grae_lab.probmodel import (
    DIAG_FLOOR,
    CovarianceStructure,
    GaussianPosterior,
    ObservationModel,
    assemble_covariance,
    assemble_covariance_backward,
    kl_from_factor,
    kl_std_normal,
    obs_grad,
    obs_hessian_diag,
    obs_loglik,
    sample,
)

GAUSS = ObservationModel("gaussian_unit")
BERN = ObservationModel("bernoulli")


def test_structure_parse_and_blocks():
    assert CovarianceStructure.parse("diag").kind == "diagonal"
    s = CovarianceStructure.parse("block:3")
    assert str(s) == "block:3"
    assert s.blocks(7) == [(0, 3), (3, 3), (6, 1)]
    assert CovarianceStructure.parse("full").blocks(4) == [(0, 4)]
    with pytest.raises(ConfigError):
        CovarianceStructure.parse("banded")
    with pytest.raises(ConfigError):
        CovarianceStructure.parse("block:x")


def test_assemble_zero_raw_block_gives_identity():
    s = CovarianceStructure.parse("block:2")
    C = assemble_covariance(np.zeros(s.n_free(4)), s, 4)
    np.testing.assert_array_equal(C @ C.T, np.eye(4))


def test_assemble_diagonal_exp_then_square():
    s = CovarianceStructure.parse("diagonal")
    C = assemble_covariance(np.log([2.0, 3.0]), s, 2)
    np.testing.assert_allclose(C @ C.T, np.diag([4.0, 9.0]))


def test_assemble_block_offdiagonal():
    s = CovarianceStructure.parse("block:2")
    C = assemble_covariance(np.array([0.0, 0.5, 0.0]), s, 2)
    np.testing.assert_allclose(C, [[1, 0], [0.5, 1]])
    np.testing.assert_allclose(C @ C.T, [[1, 0.5], [0.5, 1.25]])
    np.linalg.cholesky(C @ C.T)


def test_assemble_floor_and_length():
    s = CovarianceStructure.parse("diagonal")
    C = assemble_covariance(np.array([-50.0, 0.0]), s, 2)
    assert C[0, 0] == DIAG_FLOOR
    with pytest.raises(LengthMismatch):
        assemble_covariance(np.zeros(3), s, 2)


@settings(max_examples=50, deadline=None)
@given(d=st.integers(1, 7), b=st.integers(1, 7), seed=st.integers(0, 9999))
def test_assemble_sparsity_pattern(d, b, seed):
    s = CovarianceStructure("block", b)
    raw = np.random.default_rng(seed).standard_normal(s.n_free(d))
    C = assemble_covariance(raw, s, d)
    Sigma = C @ C.T
    mask = s.mask(d)
    assert np.all(Sigma[~mask] == 0.0)
    assert np.all(np.triu(C, 1) == 0.0)
    assert np.all(np.diag(C) > 0)


def test_assemble_backward_fd(rng):
    s = CovarianceStructure.parse("block:2")
    raw = rng.standard_normal(s.n_free(3))
    G = rng.standard_normal((3, 3))
    f = lambda r: float(np.sum(G * assemble_covariance(r, s, 3)))  # noqa: E731
    h = 1e-6
    fd = np.array([(f(raw + h * e) - f(raw - h * e)) / (2 * h) for e in np.eye(raw.size)])
    np.testing.assert_allclose(assemble_covariance_backward(raw, s, 3, G), fd, atol=1e-7)


def test_kl_examples():
    assert kl_std_normal(np.zeros(2), np.eye(2)) == 0.0
    assert kl_std_normal(np.array([1.0]), np.array([[1.0]])) == pytest.approx(0.5)
    # oracle: integrate q log(q/p) numerically
    q, p = stats.norm(0, np.sqrt(2)), stats.norm(0, 1)
    val, _ = integrate.quad(lambda z: q.pdf(z) * (q.logpdf(z) - p.logpdf(z)), -40, 40)
    assert kl_std_normal(np.zeros(1), np.array([[2.0]])) == pytest.approx(val, abs=1e-8)
    assert val == pytest.approx(0.153426, abs=1e-6)


def test_kl_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        kl_std_normal(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(d=st.integers(1, 5), seed=st.integers(0, 9999))
def test_kl_nonnegative_and_factor_form(d, seed):
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal(d)
    F = rng.standard_normal((d, d)) + 2 * np.eye(d)
    Sigma = F @ F.T
    k = kl_std_normal(mu, Sigma)
    assert k >= 0
    assert kl_from_factor(mu, F) == pytest.approx(k, rel=1e-10, abs=1e-12)


def test_sample_determinism_and_moments():
    mu = np.array([1.0, -2.0])
    F = np.array([[1.0, 0.0], [0.8, 0.6]])
    post = GaussianPosterior(mu, F)
    a = sample(post, 5, np.random.default_rng(3))
    b = sample(post, 5, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    zero = sample(GaussianPosterior(mu, np.zeros((2, 2))), 4, np.random.default_rng(0))
    assert np.all(zero == mu)
    n = 100_000
    Z = sample(post, n, np.random.default_rng(11))
    C = np.cov(Z.T)
    S = post.covariance
    # var of a sample covariance entry: (S_ij^2 + S_ii S_jj) / n
    se = np.sqrt((S ** 2 + np.outer(np.diag(S), np.diag(S))) / n)
    assert np.all(np.abs(C - S) < 3 * se)


def test_gaussian_loglik_examples(rng):
    x = np.array([0.3, -0.1])
    assert obs_loglik(GAUSS, x, x) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    x, g = rng.standard_normal(4), rng.standard_normal(4)
    assert obs_loglik(GAUSS, x, g) == pytest.approx(np.sum(stats.norm.logpdf(x, loc=g)), abs=1e-12)


def test_bernoulli_loglik_and_domain():
    assert obs_loglik(BERN, np.array([1.0]), np.array([0.5])) == pytest.approx(np.log(0.5))
    with pytest.raises(DomainError):
        obs_loglik(BERN, np.array([0.5]), np.array([0.5]))
    # clamping keeps the value finite
    assert np.isfinite(obs_loglik(BERN, np.array([1.0, 0.0]), np.array([0.0, 1.0])))


def test_grad_examples(rng):
    x = rng.standard_normal(3)
    assert np.all(obs_grad(GAUSS, x, x) == 0)
    assert obs_grad(BERN, np.array([1.0]), np.array([0.5]))[0] == pytest.approx(2.0)
    for m, x in ((GAUSS, rng.standard_normal(3)), (BERN, np.array([1.0, 0.0, 1.0]))):
        g = rng.uniform(0.2, 0.8, size=3)
        fd = np.array([
            (obs_loglik(m, x, g + 1e-6 * e) - obs_loglik(m, x, g - 1e-6 * e)) / 2e-6 for e in np.eye(3)
        ])
        np.testing.assert_allclose(obs_grad(m, x, g), fd, atol=1e-6)


def test_hessian_examples():
    np.testing.assert_array_equal(obs_hessian_diag(GAUSS, np.zeros(3), np.ones(3)), -np.ones(3))
    assert obs_hessian_diag(BERN, np.array([1.0]), np.array([0.5]))[0] == pytest.approx(-4.0)
    assert obs_hessian_diag(BERN, np.array([0.0]), np.array([0.3]))[0] == pytest.approx(-2.040816, abs=1e-6)


@pytest.mark.parametrize("xv", [0.0, 1.0])
def test_bernoulli_hessian_is_second_derivative(xv):
    x = np.array([xv])
    for gv in (0.1, 0.37, 0.8):
        h = 1e-4
        f = lambda t: obs_loglik(BERN, x, np.array([t]))  # noqa: E731
        fd = (f(gv + h) - 2 * f(gv) + f(gv - h)) / h ** 2
        assert obs_hessian_diag(BERN, x, np.array([gv]))[0] == pytest.approx(fd, rel=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6), st.integers(0, 1))
def test_hessian_nonpositive(g, xv):
    g = np.array(g)
    x = np.full_like(g, float(xv))
    assert np.all(obs_hessian_diag(BERN, x, g) <= 0)
    assert np.all(obs_hessian_diag(GAUSS, x, g) <= 0)
