import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from motiongen.distributions import (
    DiagGaussian,
    InfeasibleIntervalError,
    TruncatedDiagGaussian,
    gaussian_logpdf,
    gaussian_product,
    kl_diag,
    sample_diag_gaussian,
    sample_truncated_gaussian,
    truncated_interval_mass,
)
from motiongen.tensor import RngStream, Tape, Tensor


def rejection_sample_truncated(mu, sigma, lo, hi, n, np_rng):
    """Oracle sampler: plain normal draws, keep those inside [lo, hi]."""
    out = np.empty(n)
    filled = 0
    while filled < n:
        batch = np_rng.normal(mu, sigma, size=4 * n)
        kept = batch[(batch >= lo) & (batch <= hi)]
        take = min(n - filled, kept.size)
        out[filled : filled + take] = kept[:take]
        filled += take
    return out


class TestTruncatedSampler:
    def test_hard_bounds_hold_exactly(self):
        g = DiagGaussian(np.full(100_000, 5.0), np.ones(100_000))
        x = sample_truncated_gaussian(g, 0.0, 1.0, RngStream(1))
        assert x.min() > 0.0 and x.max() < 1.0

    def test_symmetric_mean(self):
        n = 100_000
        g = DiagGaussian(np.zeros(n), np.ones(n))
        x = sample_truncated_gaussian(g, -1.0, 1.0, RngStream(2))
        se = x.std() / np.sqrt(n)
        assert abs(x.mean()) < 3 * se

    def test_ks_vs_rejection_oracle(self):
        # N(0.3, 0.7^2) restricted to [-0.5, 0.2]
        n = 100_000
        g = DiagGaussian(np.full(n, 0.3), np.full(n, 0.7))
        ours = sample_truncated_gaussian(g, -0.5, 0.2, RngStream(3))
        oracle = rejection_sample_truncated(0.3, 0.7, -0.5, 0.2, n, np.random.default_rng(4))
        ks = stats.ks_2samp(ours, oracle).statistic
        assert ks < 0.01

    def test_deep_tail_is_usable(self):
        # rejection would need ~3e6 draws per sample here; check analytic moments
        n = 10_000
        g = DiagGaussian(np.zeros(n), np.ones(n))
        x = sample_truncated_gaussian(g, 5.0, 6.0, RngStream(5))
        assert x.min() > 5.0 and x.max() < 6.0
        assert abs(x.mean() - stats.truncnorm.mean(5.0, 6.0)) < 0.01

    def test_lo_ge_hi_raises(self):
        g = DiagGaussian(np.zeros(3), np.ones(3))
        with pytest.raises(InfeasibleIntervalError):
            sample_truncated_gaussian(g, 1.0, 1.0, RngStream(0))

    def test_vanishing_mass_raises(self):
        g = DiagGaussian(np.zeros(2), np.full(2, 0.01))
        with pytest.raises(InfeasibleIntervalError):
            sample_truncated_gaussian(g, 5.0, 6.0, RngStream(0))

    def test_create_validates_mass(self):
        g = DiagGaussian(np.zeros(2), np.full(2, 0.01))
        with pytest.raises(InfeasibleIntervalError):
            TruncatedDiagGaussian.create(g, 5.0, 6.0)

    def test_interval_mass_matches_scipy(self):
        mass = truncated_interval_mass(0.3, 0.7, -0.5, 0.2)
        expect = stats.norm.cdf(0.2, 0.3, 0.7) - stats.norm.cdf(-0.5, 0.3, 0.7)
        np.testing.assert_allclose(mass, expect, rtol=1e-10)


class TestDiagGaussianSampler:
    def test_sigma_floor_limit_returns_mean(self):
        g = DiagGaussian(np.array([1.0, -2.0]), np.full(2, 1e-5))
        x = sample_diag_gaussian(g, RngStream(0))
        np.testing.assert_allclose(x, [1.0, -2.0], atol=1e-4)

    def test_empirical_mean_within_standard_error(self):
        n = 100_000
        g = DiagGaussian(np.full(n, 2.0), np.full(n, 3.0))
        x = sample_diag_gaussian(g, RngStream(7))
        assert abs(x.mean() - 2.0) < 3 * (3.0 / np.sqrt(n))

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            DiagGaussian(np.zeros(2), np.array([1.0, 0.0]))

    def test_reparameterization_gradients(self):
        mu = Tensor(np.array([0.5, -0.3]), requires_grad=True, dtype=np.float64)
        sigma = Tensor(np.array([0.2, 0.9]), requires_grad=True, dtype=np.float64)
        rng = RngStream(11)
        eps_probe = RngStream(11).normal((2,), dtype=np.float64)
        from motiongen.tensor import tsum

        out = tsum(sample_diag_gaussian(DiagGaussian(mu, sigma), rng))
        tape = Tape()
        tape.backward(out)
        np.testing.assert_allclose(tape.grad(mu), np.ones(2))
        np.testing.assert_allclose(tape.grad(sigma), eps_probe)


class TestKL:
    def test_identity_zero(self):
        g = DiagGaussian(np.array([1.0, 2.0]), np.array([0.5, 1.5]))
        assert kl_diag(g, g) == pytest.approx(0.0, abs=1e-12)

    def test_unit_shift_half_nat_per_dim(self):
        q = DiagGaussian(np.zeros(4), np.ones(4))
        p = DiagGaussian(np.ones(4), np.ones(4))
        assert kl_diag(q, p) == pytest.approx(2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kl_diag(DiagGaussian(np.zeros(2), np.ones(2)), DiagGaussian(np.zeros(3), np.ones(3)))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        q = DiagGaussian(rng.normal(size=5), np.abs(rng.normal(size=5)) + 0.05)
        p = DiagGaussian(rng.normal(size=5), np.abs(rng.normal(size=5)) + 0.05)
        assert kl_diag(q, p) >= 0.0


class TestGaussianProduct:
    def test_closed_form(self):
        a = DiagGaussian(np.array([0.0]), np.array([1.0]))
        b = DiagGaussian(np.array([2.0]), np.array([1.0]))
        out = gaussian_product(a, b)
        np.testing.assert_allclose(out.mu, [1.0], rtol=1e-12)
        np.testing.assert_allclose(out.sigma, [np.sqrt(0.5)], rtol=1e-12)

    def test_sigma_floor(self):
        a = DiagGaussian(np.array([0.0]), np.array([1e-5]))
        b = DiagGaussian(np.array([1.0]), np.array([1e-5]))
        out = gaussian_product(a, b, sigma_floor=1e-5)
        assert out.sigma[0] >= 1e-5


def test_gaussian_logpdf_matches_scipy():
    rng = np.random.default_rng(8)
    x, mu = rng.normal(size=6), rng.normal(size=6)
    sigma = np.abs(rng.normal(size=6)) + 0.1
    expect = stats.norm.logpdf(x, mu, sigma).sum()
    assert gaussian_logpdf(x, mu, sigma) == pytest.approx(expect, rel=1e-10)


def test_gaussian_logpdf_perfect_prediction_closed_form():
    # mu == x with common sigma s: density is -d*log(s*sqrt(2*pi)) per step
    d, s = 3, 0.17
    x = np.random.default_rng(9).normal(size=d)
    expect = -d * np.log(s * np.sqrt(2 * np.pi))
    assert gaussian_logpdf(x, x, np.full(d, s)) == pytest.approx(expect, rel=1e-12)
