"""Conditional log-likelihoods and their first four eta-derivatives.

Every family is written in terms of the linear predictor ``eta``; the
E step only ever needs ``log f(y | eta)`` and ``d^k log f / d eta^k`` for
k = 1..4, so adding a family means adding one branch here.

Probit tails are the delicate part. With ``lam = phi(x) / Phi(x)`` and
``s = x + lam`` the derivatives of ``log Phi`` obey

    L1 = lam
    L2 = -lam * s
    L3 = -L2 * s - L1 * (1 + L2)
    L4 = -L3 * s - 2 * L2 * (1 + L2) - L1 * L3

For ``x < -6`` both ``lam`` and ``s`` come from the continued fraction of
the Mills ratio, which gives ``s`` directly instead of as the difference
of two large numbers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr

from .errors import DomainError

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_TAIL_CUTOFF = -6.0
_CF_TERMS = 60


class FamilyKind(str, enum.Enum):
    POISSON_LOG = "poisson"
    BINARY_PROBIT = "binary"
    NORMAL_IDENTITY = "normal"


@dataclass(frozen=True)
class DerivativeBundle:
    loglik: float
    d1: float
    d2: float
    d3: float
    d4: float


@dataclass(frozen=True)
class DerivativeArrays:
    """Per-observation log-likelihood and eta-derivatives (vectorised)."""

    loglik: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    d4: np.ndarray


@dataclass(frozen=True)
class Family:
    kind: FamilyKind
    dispersion: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FamilyKind(self.kind))
        if self.kind is FamilyKind.NORMAL_IDENTITY:
            if not (np.isfinite(self.dispersion) and self.dispersion > 0):
                raise DomainError(f"normal dispersion must be positive, got {self.dispersion}")

    @classmethod
    def poisson(cls):
        return cls(FamilyKind.POISSON_LOG)

    @classmethod
    def binary(cls):
        return cls(FamilyKind.BINARY_PROBIT)

    @classmethod
    def normal(cls, sigma2=1.0):
        return cls(FamilyKind.NORMAL_IDENTITY, float(sigma2))

    @property
    def is_normal(self):
        return self.kind is FamilyKind.NORMAL_IDENTITY

    def with_dispersion(self, sigma2):
        return Family(self.kind, float(sigma2))

    def validate_y(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError(f"{self.kind.value} response contains non-finite values")
        if self.kind is FamilyKind.POISSON_LOG:
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise DomainError("Poisson response must be a nonnegative integer")
        elif self.kind is FamilyKind.BINARY_PROBIT:
            if np.any((y != 0) & (y != 1)):
                raise DomainError("binary response must be 0 or 1")
        return y

    def derivatives(self, y, eta, check=True):
        """Vectorised log f(y|eta) and its first four eta-derivatives."""
        eta = np.asarray(eta, dtype=float)
        y = np.asarray(y, dtype=float)
        if check:
            self.validate_y(y)
            if not np.all(np.isfinite(eta)):
                raise DomainError("linear predictor is not finite")
        if self.kind is FamilyKind.POISSON_LOG:
            mu = np.exp(eta)
            neg = -mu
            return DerivativeArrays(y * eta - mu - gammaln(y + 1.0), y - mu, neg, neg, neg)
        if self.kind is FamilyKind.BINARY_PROBIT:
            return _probit_derivatives(y, eta)
        s2 = self.dispersion
        r = y - eta
        const = np.full_like(eta, -1.0 / s2)
        zero = np.zeros_like(eta)
        loglik = -_LOG_SQRT_2PI - 0.5 * np.log(s2) - 0.5 * r * r / s2
        return DerivativeArrays(loglik, r / s2, const, zero, zero.copy())

    def mean(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind is FamilyKind.POISSON_LOG:
            return np.exp(eta)
        if self.kind is FamilyKind.BINARY_PROBIT:
            return ndtr(eta)
        return eta

    def working_weights(self, eta):
        """Linearisation pieces for pseudo-likelihood: (mu, dmu/deta, weight)."""
        eta = np.asarray(eta, dtype=float)
        if self.kind is FamilyKind.POISSON_LOG:
            mu = np.exp(eta)
            return mu, mu, mu
        if self.kind is FamilyKind.BINARY_PROBIT:
            eta = np.clip(eta, -8.0, 8.0)
            mu = ndtr(eta)
            dmu = np.exp(-0.5 * eta * eta - _LOG_SQRT_2PI)
            var = mu * (1.0 - mu)
            return mu, dmu, dmu * dmu / var
        one = np.ones_like(eta)
        return eta, one, one


def evaluate(family, y, eta):
    """Scalar log-likelihood and derivatives 1-4 for one observation."""
    if not np.isfinite(eta):
        raise DomainError("linear predictor is not finite")
    out = family.derivatives(np.array([y], dtype=float), np.array([eta], dtype=float))
    return DerivativeBundle(*(float(getattr(out, f)[0]) for f in ("loglik", "d1", "d2", "d3", "d4")))


def _tail_fraction(t):
    # K = 1/(t + 2/(t + 3/(t + ...))) so that phi(-t)/Phi(-t) = t + K
    f = t.copy()
    for k in range(_CF_TERMS, 1, -1):
        f = t + k / f
    return 1.0 / f


def inverse_mills(x):
    """Return ``(lam, s)`` with lam = phi(x)/Phi(x) and s = x + lam."""
    x = np.asarray(x, dtype=float)
    lam = np.empty_like(x)
    s = np.empty_like(x)
    tail = x < _TAIL_CUTOFF
    body = ~tail
    xb = x[body]
    lam[body] = np.exp(-0.5 * xb * xb - _LOG_SQRT_2PI - log_ndtr(xb))
    s[body] = xb + lam[body]
    if np.any(tail):
        t = -x[tail]
        k = _tail_fraction(t)
        lam[tail] = t + k
        s[tail] = k
    return lam, s


def _probit_derivatives(y, eta):
    sign = np.where(y > 0.5, 1.0, -1.0)
    x = sign * eta
    lam, s = inverse_mills(x)
    l1 = lam
    l2 = -lam * s
    l3 = -l2 * s - l1 * (1.0 + l2)
    l4 = -l3 * s - 2.0 * l2 * (1.0 + l2) - l1 * l3
    return DerivativeArrays(log_ndtr(x), sign * l1, l2, sign * l3, l4)
