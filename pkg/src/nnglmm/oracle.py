"""Brute-force references: tensor-product Gauss-Hermite quadrature and finite differences.

Everything here is deliberately independent of the estimation code: the log
joint density is rebuilt from ``scipy.stats`` with dense matrices, the mode
is found by a generic optimiser, and the curvature by finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize as opt
from scipy import stats
from scipy.special import logsumexp

from .model import expand_G


@dataclass(frozen=True)
class QuadratureSpec:
    nodes_per_dim: int = 21
    max_dims: int = 5
    adaptive: bool = True
    max_points: int = 10**7
    chunk: int = 20000

    def __post_init__(self):
        if self.nodes_per_dim < 11 or self.nodes_per_dim % 2 == 0:
            raise ValueError("nodes_per_dim must be odd and at least 11")
        if self.max_dims > 5:
            raise ValueError("quadrature is capped at 5 dimensions")


def fd_check(f, x, h=1e-5):
    """Central-difference Jacobian of a (scalar or vector) function at x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2.0 * h)
    return J


class LogJoint:
    """log f(y | b) + log N(b; 0, G) evaluated on batches of b (rows)."""

    def __init__(self, model, params):
        self.model = model
        self.m = model.m
        self.G = expand_G(params.g_matrix(model.layout)).toarray()
        self.prior = stats.multivariate_normal(np.zeros(self.m), self.G)
        self.terms = []
        for block in model.blocks:
            off = block.X @ params.betas[block.label] if block.p else np.zeros(block.n)
            Z = block.Z.toarray()
            R = None
            if block.is_normal:
                r = params.r[block.label]
                R = r.dense(block.series)
            self.terms.append((block, off, Z, R))

    def __call__(self, B):
        B = np.atleast_2d(B)
        out = np.array(np.atleast_1d(self.prior.logpdf(B)), dtype=float).reshape(-1)
        for block, off, Z, R in self.terms:
            if block.n == 0:
                continue
            eta = off[None, :] + B @ Z.T
            kind = block.family.kind.value
            if kind == "poisson":
                out += stats.poisson.logpmf(block.y[None, :], np.exp(eta)).sum(axis=1)
            elif kind == "binary":
                sign = 2.0 * block.y - 1.0
                out += stats.norm.logcdf(sign[None, :] * eta).sum(axis=1)
            else:
                mvn = stats.multivariate_normal(np.zeros(block.n), R)
                out += np.atleast_1d(mvn.logpdf(block.y[None, :] - eta))
        return out


def _mode_and_hessian(lj, x0=None):
    m = lj.m
    x0 = np.zeros(m) if x0 is None else x0
    res = opt.minimize(lambda b: -lj(b)[0], x0, method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
    mode = res.x
    # polish with Newton steps on finite-difference derivatives
    for _ in range(20):
        g = fd_check(lambda b: lj(b)[0], mode, 1e-5).ravel()
        H = fd_check(lambda b: fd_check(lambda c: lj(c)[0], b, 1e-4).ravel(), mode, 1e-4)
        H = 0.5 * (H + H.T)
        step = np.linalg.solve(H, g)
        mode = mode - step
        if np.max(np.abs(step)) < 1e-10:
            break
    H = fd_check(lambda b: fd_check(lambda c: lj(c)[0], b, 1e-4).ravel(), mode, 1e-4)
    return mode, -0.5 * (H + H.T)


@dataclass
class QuadratureResult:
    loglik: float
    mean: np.ndarray
    cov: np.ndarray
    mode: np.ndarray
    points: int
    extra: np.ndarray = None


def quadrature(model, params, spec=None, fn=None):
    """Gauss-Hermite evaluation of the marginal likelihood and posterior moments.

    ``fn`` optionally maps a batch of b (rows) to a matrix of extra
    integrands whose posterior expectations are returned in ``extra``.
    """
    spec = spec or QuadratureSpec()
    m = model.m
    if m > spec.max_dims:
        raise ValueError(f"model has {m} random effects; quadrature is capped at {spec.max_dims}")
    k = spec.nodes_per_dim
    if k**m > spec.max_points:
        raise ValueError(f"grid of {k}^{m} points exceeds {spec.max_points}")
    lj = LogJoint(model, params)
    if spec.adaptive:
        center, prec = _mode_and_hessian(lj)
        cov_scale = np.linalg.inv(prec)
    else:
        center = np.zeros(m)
        cov_scale = lj.G
    L = np.linalg.cholesky(cov_scale)
    x, w = np.polynomial.hermite.hermgauss(k)
    logw = np.log(w)
    # b = center + sqrt(2) L x with weight exp(-|x|^2) removed by adding |x|^2
    grid = np.stack(np.meshgrid(*([np.arange(k)] * m), indexing="ij"), axis=-1).reshape(-1, m)
    logdet_L = float(np.sum(np.log(np.diag(L))))
    logs, firsts, extras = [], [], []
    for start in range(0, grid.shape[0], spec.chunk):
        ids = grid[start:start + spec.chunk]
        X = x[ids]
        B = center + np.sqrt(2.0) * X @ L.T
        lv = lj(B) + np.sum(X * X, axis=1) + logw[ids].sum(axis=1)
        logs.append(lv)
        extras.append(fn(B) if fn is not None else None)
        firsts.append(B)
    lv = np.concatenate(logs)
    B = np.concatenate(firsts)
    log_norm = logsumexp(lv)
    wts = np.exp(lv - log_norm)
    mean = wts @ B
    D = B - mean
    cov = (D * wts[:, None]).T @ D
    loglik = float(log_norm + logdet_L + 0.5 * m * np.log(2.0))
    res = QuadratureResult(loglik, mean, 0.5 * (cov + cov.T), center, B.shape[0])
    if fn is not None:
        res.extra = wts @ np.concatenate([np.atleast_2d(e) if np.ndim(e) > 1 else np.asarray(e)[:, None] for e in extras])
    return res


def quad_marginal_loglik(model, params, spec=None):
    return quadrature(model, params, spec).loglik


def quad_posterior_moments(model, params, spec=None):
    q = quadrature(model, params, spec)
    return q.mean, q.cov


def quad_score_expectations(model, params, spec=None):
    """E[d log f / d eta_l | y] for every non-normal row (stacked in block order)."""
    blocks = [b for b in model.blocks if not b.is_normal]

    def fn(B):
        cols = []
        for block in blocks:
            off = block.X @ params.betas[block.label] if block.p else np.zeros(block.n)
            eta = off[None, :] + B @ block.Z.toarray().T
            if block.family.kind.value == "poisson":
                cols.append(block.y[None, :] - np.exp(eta))
            else:
                sign = 2.0 * block.y - 1.0
                x = sign[None, :] * eta
                cols.append(sign[None, :] * np.exp(stats.norm.logpdf(x) - stats.norm.logcdf(x)))
        return np.concatenate(cols, axis=1)

    return quadrature(model, params, spec, fn=fn).extra


def dense_normal_marginal(model, params):
    """Closed-form log density of y for an all-normal model (stacked blocks)."""
    if any(not b.is_normal for b in model.blocks):
        raise ValueError("closed form needs every block to be normal")
    G = expand_G(params.g_matrix(model.layout)).toarray()
    Z = np.vstack([b.Z.toarray() for b in model.blocks])
    mu = np.concatenate([b.X @ params.betas[b.label] if b.p else np.zeros(b.n) for b in model.blocks])
    y = np.concatenate([b.y for b in model.blocks])
    Rs = [params.r[b.label].dense(b.series) for b in model.blocks]
    n = y.size
    R = np.zeros((n, n))
    pos = 0
    for Rb in Rs:
        k = Rb.shape[0]
        R[pos:pos + k, pos:pos + k] = Rb
        pos += k
    V = Z @ G @ Z.T + R
    return float(stats.multivariate_normal(mu, V).logpdf(y))


def dense_normal_posterior(model, params):
    """E[b|y] and var[b|y] for an all-normal model via dense covariance algebra."""
    G = expand_G(params.g_matrix(model.layout)).toarray()
    Z = np.vstack([b.Z.toarray() for b in model.blocks])
    mu = np.concatenate([b.X @ params.betas[b.label] if b.p else np.zeros(b.n) for b in model.blocks])
    y = np.concatenate([b.y for b in model.blocks])
    n = y.size
    R = np.zeros((n, n))
    pos = 0
    for b in model.blocks:
        Rb = params.r[b.label].dense(b.series)
        R[pos:pos + b.n, pos:pos + b.n] = Rb
        pos += b.n
    V = Z @ G @ Z.T + R
    K = G @ Z.T @ np.linalg.inv(V)
    return K @ (y - mu), G - K @ Z @ G


__all__ = [
    "QuadratureSpec",
    "QuadratureResult",
    "LogJoint",
    "fd_check",
    "quadrature",
    "quad_marginal_loglik",
    "quad_posterior_moments",
    "quad_score_expectations",
    "dense_normal_marginal",
    "dense_normal_posterior",
]
