"""M step: fixed effects, Gamma_u and residual parameters given frozen moments."""

from __future__ import annotations

import logging

import numpy as np

from .errors import NonConvergenceError, NotPositiveDefiniteError
from .estep import PatternError
from .model import ParameterSet, RKind, RStructure, ar1_trace_identity
from .sparse import hadamard_trace

log = logging.getLogger(__name__)


def _normal_residual(block, beta, moments):
    fitted = block.Z @ moments.b_tilde
    if block.p:
        fitted = fitted + block.X @ beta
    return block.y - fitted


def update_beta_normal(block, r, moments):
    """GLS: (X'R^-1X)^-1 X'R^-1 (y - Z b~)."""
    if not block.p:
        return np.zeros(0)
    y_adj = block.y - block.Z @ moments.b_tilde
    if r.kind is RKind.IDENTITY:
        XtRX = block.X.T @ block.X
        XtRy = block.X.T @ y_adj
    else:
        Q = r.precision(block.series)
        QX = Q @ block.X
        XtRX = block.X.T @ QX
        XtRy = QX.T @ y_adj
    try:
        return np.linalg.solve(XtRX, XtRy)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(f"X'R^-1X is singular for block '{block.label}'") from None


def glm_beta_score(block, scores, beta):
    return block.X.T @ scores.evaluate(block.label, beta)


def fd_jacobian(f, x, steps):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        cols.append((f(x + e) - f(x - e)) / (2.0 * steps[j]))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def update_beta_glm(block, scores, beta_init, alpha=1e-8, max_iters=50, max_halvings=10):
    """Newton-Raphson on X' E[d log f / d eta] = 0 with a central-difference Hessian.

    Iterates until |S' H^-1 S| < alpha.
    """
    beta = np.array(beta_init, dtype=float)
    if not block.p:
        return beta

    def score(b):
        return glm_beta_score(block, scores, b)

    S = score(beta)
    for it in range(max_iters + 1):
        H = fd_jacobian(score, beta, np.maximum(1e-5, 1e-5 * np.abs(beta)))
        H = 0.5 * (H + H.T)
        try:
            step = np.linalg.solve(H, S)
        except np.linalg.LinAlgError:
            raise NonConvergenceError(f"singular score Jacobian for block '{block.label}'", beta) from None
        crit = abs(float(S @ step))
        if crit < alpha:
            return beta
        if it == max_iters:
            break
        norm = np.linalg.norm(S)
        t = 1.0
        for _ in range(max_halvings + 1):
            trial = beta - t * step
            S_trial = score(trial)
            if np.all(np.isfinite(S_trial)) and np.linalg.norm(S_trial) < norm:
                break
            t *= 0.5
        beta, S = trial, S_trial
    raise NonConvergenceError(f"fixed-effects Newton-Raphson did not converge for block '{block.label}'", beta)


def update_gammas(layout, moments):
    """Gamma_u = (1/M_u) sum_j (v~^(u,j) + b~^(u,j) b~^(u,j)')."""
    out = []
    for grp in layout.groups:
        idx = grp.index
        bt = moments.b_tilde[idx]
        outer = bt.T @ bt
        V = grp.V
        a, c = np.meshgrid(np.arange(V), np.arange(V), indexing="ij")
        try:
            v = moments.entries(idx[:, a.ravel()].ravel(), idx[:, c.ravel()].ravel())
        except PatternError as exc:
            raise PatternError(f"posterior variance pattern misses entries for group '{grp.name}'") from exc
        vsum = v.reshape(grp.M, V * V).sum(axis=0).reshape(V, V)
        gamma = (vsum + outer) / grp.M
        out.append(0.5 * (gamma + gamma.T))
    return out


def _trace_ZtZ_v(gram, moments):
    """tr(Z'Z v~) via the Hadamard contraction over the pattern of Z'Z."""
    vals = gram.values(np.ones(gram.n))
    v = moments.entries(gram.rows, gram.cols)
    weight = np.where(gram.rows == gram.cols, 1.0, 2.0)
    return float(np.sum(vals * v * weight))


def update_sigma2_identity(block, beta, moments, gram):
    """sigma2 = [r'r + tr(Z'Z v~)] / n with r = y - X beta - Z b~."""
    r = _normal_residual(block, beta, moments)
    return (float(r @ r) + _trace_ZtZ_v(gram, moments)) / block.n


def _ar1_quads(block, beta, moments, rho):
    """E[e' C^-1 e] and its rho-derivative, C the AR(1) correlation matrix."""
    r = _normal_residual(block, beta, moments)
    v = moments.dense_v()
    R = RStructure(RKind.AR1, 1.0, rho)
    Q = R.precision(block.series)
    dQ = R.precision_drho(block.series)
    Z = block.Z
    quad = float(r @ (Q @ r)) + hadamard_trace((Z.T @ Q @ Z).tocsr(), v)
    dquad = float(r @ (dQ @ r)) + hadamard_trace((Z.T @ dQ @ Z).tocsr(), v)
    return quad, dquad


def ar1_scores(block, beta, moments, sigma2, rho):
    """Expected complete-data scores for (sigma2, rho) of an AR(1) block."""
    quad, dquad = _ar1_quads(block, beta, moments, rho)
    tr_rho = sum(ar1_trace_identity(t, rho) for t in block.series)
    s_sigma = -0.5 * block.n / sigma2 + 0.5 * quad / sigma2**2
    s_rho = -0.5 * tr_rho - 0.5 * dquad / sigma2
    return np.array([s_sigma, s_rho])


def ar1_objective(block, beta, moments, sigma2, rho):
    """Expected complete-data log-likelihood of the block, up to a constant."""
    quad, _ = _ar1_quads(block, beta, moments, rho)
    R = RStructure(RKind.AR1, sigma2, rho)
    return -0.5 * R.logdet(block.series) - 0.5 * quad / sigma2


def update_ar1(block, beta, moments, init, alpha=1e-8, max_iters=100, rho_cap=0.99):
    """Joint Newton-Raphson for (sigma2, rho) with a 2x2 central-difference Jacobian.

    Steps are halved until the expected complete-data log-likelihood does not
    decrease; where the Jacobian is not negative definite the score itself is
    used as the search direction. sigma2 starts at its profile value given rho.
    """
    rho0 = float(np.clip(init.rho, -rho_cap, rho_cap))
    x = np.array([_ar1_quads(block, beta, moments, rho0)[0] / block.n, rho0])

    def f(z):
        return ar1_scores(block, beta, moments, z[0], z[1])

    def obj(z):
        return ar1_objective(block, beta, moments, z[0], z[1])

    S, cur = f(x), obj(x)
    for _ in range(max_iters):
        J = fd_jacobian(f, x, np.array([max(1e-7, 1e-5 * x[0]), 1e-6]))
        J = 0.5 * (J + J.T)
        if np.all(np.linalg.eigvalsh(J) < 0):
            step = np.linalg.solve(J, S)
            crit = abs(float(S @ step))
        else:
            step = -S / max(1.0, np.linalg.norm(S))
            crit = np.inf
        if crit < alpha:
            return RStructure(RKind.AR1, float(x[0]), float(x[1]))
        t = 1.0
        for _ in range(50):
            trial = x - t * step
            trial[1] = np.clip(trial[1], -rho_cap, rho_cap)
            if trial[0] > 0:
                val = obj(trial)
                if np.isfinite(val) and val >= cur - 1e-12 * max(1.0, abs(cur)):
                    break
            t *= 0.5
        else:
            raise NonConvergenceError(f"AR(1) update stalled for block '{block.label}'", x)
        if np.array_equal(trial, x):
            return RStructure(RKind.AR1, float(x[0]), float(x[1]))
        x, cur = trial, val
        S = f(x)
    raise NonConvergenceError(f"AR(1) update did not converge for block '{block.label}'", x)


def check_gammas(layout, gammas):
    for grp, gamma in zip(layout.groups, gammas):
        try:
            np.linalg.cholesky(gamma)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(f"updated Gamma for group '{grp.name}' is not positive definite", group=grp.name) from None


def m_step(model, params, estep, alpha=1e-8):
    """One full M step: every beta, then every Gamma_u, then R, against frozen moments."""
    moments, scores = estep.moments, estep.scores
    betas = {}
    for block in model.blocks:
        if block.is_normal:
            betas[block.label] = update_beta_normal(block, params.r[block.label], moments)
        else:
            betas[block.label] = update_beta_glm(block, scores, params.betas[block.label], alpha=alpha)
    gammas = update_gammas(model.layout, moments)
    r = {}
    for block in model.normal_blocks:
        old = params.r[block.label]
        if old.kind is RKind.IDENTITY:
            s2 = update_sigma2_identity(block, betas[block.label], moments, model.normal_gram[block.label])
            r[block.label] = RStructure(RKind.IDENTITY, s2)
        else:
            r[block.label] = update_ar1(block, betas[block.label], moments, old, alpha=alpha)
    return ParameterSet(betas, gammas, r)
