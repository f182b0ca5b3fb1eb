"""Diagonal-Gaussian currency shared by the model and the adapters.

Includes the reparameterized sampler (differentiable when fed Tensors),
interval truncation with inverse-CDF sampling, closed-form KL, and
precision-weighted Gaussian products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .tensor import RngStream, Tensor, add, mul

__all__ = [
    "DiagGaussian",
    "TruncatedDiagGaussian",
    "InfeasibleIntervalError",
    "sample_diag_gaussian",
    "sample_truncated_gaussian",
    "truncated_interval_mass",
    "kl_diag",
    "gaussian_product",
    "gaussian_logpdf",
    "MASS_FLOOR",
]

MASS_FLOOR = 1e-12


class InfeasibleIntervalError(ValueError):
    """Truncation interval carries (numerically) zero predictive mass."""


def _value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass(frozen=True)
class DiagGaussian:
    """Independent Gaussian per component; mu/sigma may be arrays or Tensors."""

    mu: object
    sigma: object

    def __post_init__(self):
        mu, sigma = _value(self.mu), _value(self.sigma)
        if mu.shape != sigma.shape:
            raise ValueError(f"mu/sigma shape mismatch: {mu.shape} vs {sigma.shape}")
        if sigma.size and sigma.min() <= 0:
            raise ValueError("sigma must be strictly positive")

    @property
    def shape(self):
        return _value(self.mu).shape

    def numpy(self) -> "DiagGaussian":
        return DiagGaussian(np.asarray(_value(self.mu), dtype=np.float64),
                            np.asarray(_value(self.sigma), dtype=np.float64))


def sample_diag_gaussian(g: DiagGaussian, rng: RngStream):
    """Reparameterized draw mu + sigma * eps, eps ~ N(0, I).

    Differentiable w.r.t. mu and sigma when they are Tensors; returns a
    plain array otherwise.
    """
    if isinstance(g.mu, Tensor) or isinstance(g.sigma, Tensor):
        mu = g.mu if isinstance(g.mu, Tensor) else Tensor(g.mu)
        sigma = g.sigma if isinstance(g.sigma, Tensor) else Tensor(g.sigma)
        eps = Tensor(rng.normal(mu.shape, dtype=mu.dtype))
        return add(mu, mul(sigma, eps))
    mu = np.asarray(g.mu, dtype=np.float64)
    sigma = np.asarray(g.sigma, dtype=np.float64)
    return mu + sigma * rng.normal(mu.shape, dtype=np.float64)


def truncated_interval_mass(mu, sigma, lo, hi) -> np.ndarray:
    """Per-component probability mass of [lo, hi] under N(mu, sigma^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    a = (np.asarray(lo, dtype=np.float64) - mu) / sigma
    b = (np.asarray(hi, dtype=np.float64) - mu) / sigma
    # mirror right-tail intervals so ndtr works in its accurate (lower) tail
    flip = (a + b) > 0
    a2 = np.where(flip, -b, a)
    b2 = np.where(flip, -a, b)
    return ndtr(b2) - ndtr(a2)


@dataclass(frozen=True)
class TruncatedDiagGaussian:
    """N(mu, sigma^2) restricted to [lo, hi], independently per component.

    Components with lo == hi are pinned: sampling returns that value exactly
    (a zero-width velocity bound forces the next setpoint).
    """

    mu: np.ndarray
    sigma: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    pinned: np.ndarray

    @classmethod
    def create(cls, g: DiagGaussian, lo, hi) -> "TruncatedDiagGaussian":
        base = g.numpy()
        mu = base.mu
        lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), mu.shape).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), mu.shape).copy()
        if np.any(lo > hi):
            bad = np.flatnonzero(lo > hi)
            raise InfeasibleIntervalError(f"lo > hi at flat index {bad[0]}")
        pinned = lo == hi
        free = ~pinned
        if free.any():
            mass = truncated_interval_mass(mu[free], base.sigma[free], lo[free], hi[free])
            if np.any(mass < MASS_FLOOR):
                idx = np.flatnonzero(free)[np.argmin(mass)]
                raise InfeasibleIntervalError(
                    f"interval mass {mass.min():.3e} below {MASS_FLOOR:.0e} "
                    f"at flat index {idx}"
                )
        return cls(mu, base.sigma, lo, hi, pinned)

    def sample(self, rng: RngStream) -> np.ndarray:
        if not self.pinned.any():
            return sample_truncated_gaussian(
                DiagGaussian(self.mu, self.sigma), self.lo, self.hi, rng
            )
        # substitute a benign unit Gaussian on pinned dims (draw cadence kept),
        # then overwrite with the pinned value
        mu = np.where(self.pinned, self.lo, self.mu)
        sigma = np.where(self.pinned, 1.0, self.sigma)
        lo = np.where(self.pinned, self.lo - 1.0, self.lo)
        hi = np.where(self.pinned, self.lo + 1.0, self.hi)
        x = sample_truncated_gaussian(DiagGaussian(mu, sigma), lo, hi, rng)
        return np.where(self.pinned, self.lo, x)


def sample_truncated_gaussian(g: DiagGaussian, lo, hi, rng: RngStream) -> np.ndarray:
    """Inverse-CDF draw from N(mu, sigma^2) restricted to [lo, hi].

    One uniform per component, no rejection loop; right-tail intervals are
    mirrored so quantiles are always evaluated in the accurate lower tail.
    Raises on lo >= hi or when the interval mass underflows MASS_FLOOR.
    """
    base = g.numpy()
    mu, sigma = base.mu, base.sigma
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), mu.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), mu.shape)
    if np.any(lo >= hi):
        raise InfeasibleIntervalError("lo >= hi")

    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    flip = (a + b) > 0
    a2 = np.where(flip, -b, a)
    b2 = np.where(flip, -a, b)
    fa = ndtr(a2)
    fb = ndtr(b2)
    mass = fb - fa
    if np.any(mass < MASS_FLOOR):
        raise InfeasibleIntervalError(
            f"interval mass {mass.min():.3e} below {MASS_FLOOR:.0e}"
        )
    u = rng.uniform(mu.shape, dtype=np.float64)
    p = np.clip(fa + u * mass, 1e-300, 1.0 - 1e-16)
    z = ndtri(p)
    z = np.where(flip, -z, z)
    x = mu + sigma * z
    # guard inverse-CDF rounding: samples stay strictly inside the interval
    x = np.clip(x, lo, hi)
    interior_lo = np.nextafter(lo, hi)
    interior_hi = np.nextafter(hi, lo)
    return np.minimum(np.maximum(x, interior_lo), interior_hi)


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> float:
    """KL[q || p] for diagonal Gaussians, summed over all components."""
    qn, pn = q.numpy(), p.numpy()
    if qn.mu.shape != pn.mu.shape:
        raise ValueError(f"shape mismatch: {qn.mu.shape} vs {pn.mu.shape}")
    var_q = qn.sigma**2
    var_p = pn.sigma**2
    terms = np.log(pn.sigma / qn.sigma) + (var_q + (qn.mu - pn.mu) ** 2) / (2.0 * var_p) - 0.5
    return float(terms.sum())


def gaussian_product(a: DiagGaussian, b: DiagGaussian, sigma_floor: float = 1e-5) -> DiagGaussian:
    """Precision-weighted product of two diagonal Gaussians (normalized)."""
    an, bn = a.numpy(), b.numpy()
    prec = 1.0 / an.sigma**2 + 1.0 / bn.sigma**2
    var = 1.0 / prec
    mu = var * (an.mu / an.sigma**2 + bn.mu / bn.sigma**2)
    return DiagGaussian(mu, np.maximum(np.sqrt(var), sigma_floor))


_LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_logpdf(x, mu, sigma) -> float:
    """Sum of independent Gaussian log-densities over all components."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    z = (x - mu) / sigma
    return float((-0.5 * z * z - np.log(sigma) - 0.5 * _LOG_2PI).sum())
