"""Residual pseudo-likelihood (linearisation + REML) baseline.

Each outer iteration linearises every non-normal block around the current
linear predictor,

    y* = eta + (y - mu) / (d mu / d eta),   weight = (d mu / d eta)^2 / var(mu),

and fits the resulting weighted linear mixed model by REML. Residual
variances are 1/weight for the non-normal blocks (unit scale) and
sigma2 for normal blocks. Only scaled-identity residuals are supported.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.optimize as opt
import scipy.sparse as sp

from .em import FitResult, relative_change
from .errors import NonConvergenceError, NotPositiveDefiniteError, TierRefusedError
from .estep import Pattern, PosteriorMoments, Tier
from .model import ParameterSet, RKind, RStructure, expand_G

log = logging.getLogger(__name__)


@dataclass
class PLConfig:
    tol: float = 1e-6
    max_outer: int = 200
    optimizer_tol: float = 1e-12


@dataclass
class _Theta:
    """Unconstrained variance parameters: log-Cholesky of each Gamma_u, log sigma2."""

    layout: object
    normal_labels: list = field(default_factory=list)

    def size(self):
        return sum(g.V * (g.V + 1) // 2 for g in self.layout.groups) + len(self.normal_labels)

    def pack(self, gammas, sigma2):
        parts = []
        for gamma in gammas:
            L = np.linalg.cholesky(gamma)
            a, c = np.tril_indices(L.shape[0])
            vals = L[a, c].copy()
            diag = a == c
            vals[diag] = np.log(vals[diag])
            parts.append(vals)
        parts.append(np.log([sigma2[k] for k in self.normal_labels]))
        return np.concatenate(parts)

    def unpack(self, theta):
        pos = 0
        gammas = []
        for g in self.layout.groups:
            a, c = np.tril_indices(g.V)
            L = np.zeros((g.V, g.V))
            vals = theta[pos:pos + a.size].copy()
            diag = a == c
            vals[diag] = np.exp(vals[diag])
            L[a, c] = vals
            gammas.append(L @ L.T)
            pos += a.size
        sigma2 = {k: float(np.exp(theta[pos + i])) for i, k in enumerate(self.normal_labels)}
        return gammas, sigma2


class _WeightedLMM:
    """Dense Henderson-equation REML for a fixed set of pseudo-data."""

    def __init__(self, model, ystar, wbase, normal_rows):
        self.model = model
        self.y = ystar
        self.wbase = wbase  # 1/residual-variance for non-normal rows, 1 for normal rows
        self.normal_rows = normal_rows  # label -> row slice
        Xs, Zs = [], []
        for block in model.blocks:
            Xs.append(block.X)
            Zs.append(block.Z)
        self.X = sla.block_diag(*Xs) if Xs else np.zeros((0, 0))
        self.Z = sp.vstack(Zs, format="csr")
        self.p = self.X.shape[1]

    def weights(self, sigma2):
        w = self.wbase.copy()
        for label, sl in self.normal_rows.items():
            w[sl] = 1.0 / sigma2[label]
        return w

    def solve(self, gammas, sigma2):
        model = self.model
        w = self.weights(sigma2)
        G = expand_G(ParameterSet({}, gammas).g_matrix(model.layout)).toarray()
        # blockwise inverse of G
        Ginv = np.zeros_like(G)
        logdet_G = 0.0
        for grp, gamma in zip(model.layout.groups, gammas):
            L = np.linalg.cholesky(gamma)
            inv = sla.cho_solve((L, True), np.eye(grp.V))
            for j in range(grp.M):
                ix = grp.index[j]
                Ginv[np.ix_(ix, ix)] = inv
            logdet_G += grp.M * 2.0 * np.sum(np.log(np.diag(L)))
        WX = self.X * w[:, None]
        ZtW = (self.Z.T.multiply(w)).tocsr()
        XtWX = self.X.T @ WX
        XtWZ = np.asarray((ZtW @ self.X).T)
        ZtWZ = (ZtW @ self.Z).toarray() + Ginv
        C = np.block([[XtWX, XtWZ], [XtWZ.T, ZtWZ]])
        rhs = np.concatenate([WX.T @ self.y, ZtW @ self.y])
        try:
            cf = sla.cho_factor(C, lower=True)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("mixed-model equations are singular") from None
        sol = sla.cho_solve(cf, rhs)
        logdet_C = 2.0 * np.sum(np.log(np.diag(cf[0])))
        yPy = float(self.y @ (w * self.y) - rhs @ sol)
        logdet_R = -float(np.sum(np.log(w)))
        return sol, logdet_R, logdet_G, logdet_C, yPy, C, cf

    def objective(self, gammas, sigma2):
        """-2 x REML log-likelihood up to a constant."""
        _, ldR, ldG, ldC, yPy, _, _ = self.solve(gammas, sigma2)
        return ldR + ldG + ldC + yPy


def pl_fit(model, init=None, config=None):
    """Iterate linearisation and REML until parameters stop changing."""
    config = config or PLConfig()
    if model.has_ar1:
        raise TierRefusedError("pseudo-likelihood baseline supports scaled-identity residuals only")
    params = (init or model.default_params()).copy()
    labels = [b.label for b in model.normal_blocks]
    th = _Theta(model.layout, labels)
    sigma2 = {k: params.r[k].sigma2 for k in labels}
    theta = th.pack(params.gammas, sigma2)
    n_rows = sum(b.n for b in model.blocks)
    normal_rows, start = {}, 0
    slices = {}
    for block in model.blocks:
        slices[block.label] = slice(start, start + block.n)
        if block.is_normal:
            normal_rows[block.label] = slices[block.label]
        start += block.n
    b = np.zeros(model.m)
    trace = []
    prev = params.flatten()
    for it in range(1, config.max_outer + 1):
        ystar = np.empty(n_rows)
        wbase = np.ones(n_rows)
        for block in model.blocks:
            sl = slices[block.label]
            eta = block.Z @ b + (block.X @ params.betas[block.label] if block.p else 0.0)
            if block.is_normal:
                ystar[sl] = block.y
            else:
                mu, dmu, wt = block.family.working_weights(eta)
                ystar[sl] = eta + (block.y - mu) / dmu
                wbase[sl] = wt
        lmm = _WeightedLMM(model, ystar, wbase, normal_rows)

        def f(t):
            g, s2 = th.unpack(t)
            try:
                return lmm.objective(g, s2)
            except (NotPositiveDefiniteError, np.linalg.LinAlgError):
                return np.inf

        res = opt.minimize(f, theta, method="L-BFGS-B", options={"ftol": config.optimizer_tol, "gtol": 1e-9, "maxiter": 2000})
        theta = res.x
        gammas, sigma2 = th.unpack(theta)
        sol = lmm.solve(gammas, sigma2)[0]
        betas, pos = {}, 0
        for block in model.blocks:
            betas[block.label] = sol[pos:pos + block.p]
            pos += block.p
        b = sol[lmm.p:]
        r = {k: RStructure(RKind.IDENTITY, sigma2[k]) for k in labels}
        params = ParameterSet(betas, gammas, r)
        cur = params.flatten()
        change = relative_change(cur, prev)
        trace.append({"stage": "pl", "iteration": it, "objective": float(res.fun), "max_rel_change": change})
        prev = cur
        if change < config.tol:
            m = model.m
            C_inv = np.linalg.inv(lmm.solve(gammas, sigma2)[5])[lmm.p:, lmm.p:]
            empty = Pattern(np.zeros(0, np.int64), np.zeros(0, np.int64), m)
            moments = PosteriorMoments(b, Tier.FIRST_ORDER, empty, sigma_inv=C_inv)
            return FitResult(params, moments, None, -0.5 * float(res.fun), iterations={"pl": it}, trace=trace)
    raise NonConvergenceError(f"pseudo-likelihood did not converge in {config.max_outer} outer iterations", params)
