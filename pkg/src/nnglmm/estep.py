"""E step: conditional mode, Laplace and fully exponential posterior moments.

Notation used throughout (all restricted to rows of non-normal blocks,
since normal rows have zero third and fourth derivatives):

    A = Z Sigma^{-1}             row l is z_l' Sigma^{-1}
    q_l = z_l' Sigma^{-1} z_l
    P = Z Sigma^{-1} Z'
    u = Sigma^{-1} Z' (d3 * q)
    w = Z u

With these, for H(b) = b,

    d bhat / d c_k      = Sigma^{-1} e_k
    d Sigma / d c_k     = -Z' diag(d3 * A[:, k]) Z
    mean correction     = u / 2
    var correction k,d  = 1/2 sum_l (d4 q + d3 w)_l A_lk A_ld
                          + 1/2 sum_lj d3_l A_ld P_lj^2 d3_j A_jk

and for H_l(b) = d log f / d eta_l the expectation is
``d1 + d2 * w / 2 + d3 * q / 2``. Each trace collapses to the rank-one
identity tr(Sigma^{-1} z z') = q, the observation-space form of the
Hadamard contraction over the pattern of dSigma/dc_k.
"""

from __future__ import annotations

import enum
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import NonConvergenceError, NotPositiveDefiniteError, TierRefusedError
from .model import RKind, invert_G_blockwise
from .sparse import hadamard_trace, upper_keys

log = logging.getLogger(__name__)


class Tier(str, enum.Enum):
    FIRST_ORDER = "first-order"
    FE_MEAN = "fe-mean"
    FULL_FE = "fe"

    @property
    def rank(self):
        return [Tier.FIRST_ORDER, Tier.FE_MEAN, Tier.FULL_FE].index(self)


class PatternError(KeyError):
    """A requested posterior-variance entry is outside the computed pattern."""


@dataclass(frozen=True)
class Pattern:
    """Sorted set of upper-triangle index pairs (row <= col)."""

    rows: np.ndarray
    cols: np.ndarray
    m: int

    @classmethod
    def from_pairs(cls, rows, cols, m):
        keys = np.unique(upper_keys(rows, cols, m))
        return cls((keys // m).astype(np.int64), (keys % m).astype(np.int64), m)

    @property
    def keys(self):
        return self.rows * self.m + self.cols

    @property
    def size(self):
        return self.rows.size

    @property
    def fraction(self):
        return self.size / (self.m * (self.m + 1) / 2)

    def as_set(self):
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def union(self, other):
        return Pattern.from_pairs(np.concatenate([self.rows, other.rows]), np.concatenate([self.cols, other.cols]), self.m)


@dataclass(frozen=True)
class ModeResult:
    b_hat: np.ndarray
    Sigma: np.ndarray
    Sigma_inv: np.ndarray
    nr_iters: int
    converged: bool
    criterion: float
    kappa: float
    # non-normal rows evaluated at b_hat
    eta: np.ndarray = None
    loglik: np.ndarray = None
    d1: np.ndarray = None
    d2: np.ndarray = None
    d3: np.ndarray = None
    d4: np.ndarray = None
    logdet_sigma: float = float("nan")


@dataclass(frozen=True)
class PosteriorMoments:
    b_tilde: np.ndarray
    tier: Tier
    pattern: Pattern
    v_values: np.ndarray = None
    sigma_inv: np.ndarray = None

    def entries(self, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if self.tier is not Tier.FULL_FE:
            return self.sigma_inv[rows, cols]
        keys = upper_keys(rows, cols, self.pattern.m)
        pkeys = self.pattern.keys
        pos = np.searchsorted(pkeys, keys)
        pos = np.minimum(pos, pkeys.size - 1)
        if pkeys.size == 0 or np.any(pkeys[pos] != keys):
            raise PatternError("posterior variance entry requested outside the computed pattern")
        return self.v_values[pos]

    def block(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        r, c = np.meshgrid(idx, idx, indexing="ij")
        return self.entries(r.ravel(), c.ravel()).reshape(idx.size, idx.size)

    def dense_v(self):
        if self.tier is not Tier.FULL_FE:
            return self.sigma_inv
        m = self.pattern.m
        out = sp.coo_matrix((self.v_values, (self.pattern.rows, self.pattern.cols)), shape=(m, m)).toarray()
        return out + np.triu(out, 1).T


@dataclass
class ScoreExpectations:
    """Approximate E[d log f / d eta_l | y] for every non-normal row.

    The posterior pieces (random-effect offset Z bhat and the correction
    factors w, q) are frozen at the E step; ``evaluate`` recomputes the
    expectation at a trial beta for the M-step Newton iterations.
    """

    tier: Tier
    blocks: dict
    offsets: dict
    w: dict = field(default_factory=dict)
    q: dict = field(default_factory=dict)

    def evaluate(self, label, beta):
        block = self.blocks[label]
        eta = self.offsets[label] + (block.X @ beta if block.p else 0.0)
        der = block.family.derivatives(block.y, eta, check=False)
        if self.tier is Tier.FIRST_ORDER:
            return der.d1
        return der.d1 + 0.5 * der.d2 * self.w[label] + 0.5 * der.d3 * self.q[label]

    def values(self, params):
        return {label: self.evaluate(label, params.betas[label]) for label in self.blocks}


@dataclass(frozen=True)
class EStepResult:
    mode: ModeResult
    moments: PosteriorMoments
    scores: ScoreExpectations


# ---------------------------------------------------------------------------
# mode finding
# ---------------------------------------------------------------------------


class _Curvature:
    """Per-parameter constant pieces: G^{-1}, normal-block precisions."""

    def __init__(self, model, params, G_inv=None, tilt=None):
        self.model = model
        self.tilt = None if tilt is None else np.asarray(tilt, dtype=float)
        self.params = params
        if G_inv is None:
            G_inv, self.logdet_G = invert_G_blockwise(params.g_matrix(model.layout))
        else:
            self.logdet_G = float("nan")
        self.G_inv = sp.csr_matrix(G_inv)
        const = self.G_inv.toarray()
        self.normal = []
        for block in model.normal_blocks:
            r = params.r[block.label]
            if block.r_kind is RKind.IDENTITY:
                ZtRZ = model.ZtZ[block.label] / r.sigma2
                Rinv = None
            else:
                Rinv = r.precision(block.series)
                ZtRZ = (block.Z.T @ Rinv @ block.Z).tocsr()
            const += ZtRZ.toarray()
            resid0 = block.y - (block.X @ params.betas[block.label] if block.p else 0.0)
            self.normal.append((block, r, Rinv, resid0))
        self.const = const
        self.glm_offset = np.zeros(model.n_glm)
        for block in model.glm_blocks:
            if block.p:
                self.glm_offset[model.glm_slices[block.label]] = block.X @ params.betas[block.label]

    def glm_terms(self, b):
        model = self.model
        eta = self.glm_offset + model.Z_glm @ b
        parts = [blk.family.derivatives(blk.y, eta[model.glm_slices[blk.label]], check=False) for blk in model.glm_blocks]
        if not parts:
            z = np.zeros(0)
            return eta, z, z, z, z, z
        cat = [np.concatenate([getattr(p, f) for p in parts]) for f in ("loglik", "d1", "d2", "d3", "d4")]
        return (eta, *cat)

    def gradient_and_kappa(self, b, terms):
        """Return (-d kappa/db, kappa) with kappa the log joint up to constants."""
        eta, ll, d1 = terms[:3]
        grad = self.model.Z_glm.T @ d1
        kappa = float(np.sum(ll))
        for block, r, Rinv, resid0 in self.normal:
            res = resid0 - block.Z @ b
            Rr = res / r.sigma2 if Rinv is None else Rinv @ res
            grad = grad + block.Z.T @ Rr
            kappa -= 0.5 * float(res @ Rr)
        Gb = self.G_inv @ b
        kappa -= 0.5 * float(b @ Gb)
        if self.tilt is not None:
            grad = grad + self.tilt
            kappa += float(self.tilt @ b)
        return Gb - grad, kappa

    def sigma(self, terms):
        out = self.const.copy()
        if self.model.n_glm:
            self.model.gram_glm.add_to_dense(-terms[3], out)
        return out


def neg_gradient(model, params, b, G_inv=None):
    """L(b) = -sum_i sum_l d1 z_l + G^{-1} b."""
    cur = _Curvature(model, params, G_inv)
    b = np.asarray(b, dtype=float)
    return cur.gradient_and_kappa(b, cur.glm_terms(b))[0]


def assemble_sigma(model, params, b, G_inv=None):
    """Sigma = sum_i sum_l (-d2) z_l z_l' + G^{-1} at (c, b) = (0, b)."""
    cur = _Curvature(model, params, G_inv)
    return cur.sigma(cur.glm_terms(np.asarray(b, dtype=float)))


def log_joint_kappa(model, params, b):
    cur = _Curvature(model, params)
    return cur.gradient_and_kappa(b, cur.glm_terms(b))[1]


def _cho_inverse(cf):
    """Symmetric inverse from a lower Cholesky factor (LAPACK potri)."""
    inv, info = sla.lapack.dpotri(cf[0], lower=1)
    if info != 0:
        raise NotPositiveDefiniteError("Sigma inverse failed")
    low = np.tril(inv)
    return low + np.tril(low, -1).T


def _factor(S):
    try:
        return sla.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("Sigma is not positive definite at the current iterate") from None


def find_mode(model, params, b_init=None, max_iters=50, alpha=1e-8, raise_on_fail=True, max_halvings=10, G_inv=None,
              tilt=None, min_iters=0):
    """Newton-Raphson for the posterior mode with step halving.

    Stops when the Newton decrement L' Sigma^{-1} L falls below ``alpha``
    and at least ``min_iters`` steps have been taken.
    ``tilt`` adds c'b to the log joint, giving the mode b^(c) used by the
    fully exponential derivations (and their finite-difference checks).
    """
    cur = _Curvature(model, params, G_inv, tilt)
    m = model.m
    b = np.zeros(m) if b_init is None else np.array(b_init, dtype=float)
    terms = cur.glm_terms(b)
    L, kappa = cur.gradient_and_kappa(b, terms)
    S = cur.sigma(terms)
    cf = _factor(S)
    step = sla.cho_solve(cf, L, check_finite=False)
    crit = float(L @ step)
    iters = 0
    while (crit >= alpha or iters < min_iters) and iters < max_iters:
        t = 1.0
        for _ in range(max_halvings + 1):
            b_new = b - t * step
            terms_new = cur.glm_terms(b_new)
            L_new, kappa_new = cur.gradient_and_kappa(b_new, terms_new)
            if np.isfinite(kappa_new) and kappa_new >= kappa - 1e-12 * max(1.0, abs(kappa)):
                break
            t *= 0.5
        b, terms, L, kappa = b_new, terms_new, L_new, kappa_new
        iters += 1
        S = cur.sigma(terms)
        cf = _factor(S)
        step = sla.cho_solve(cf, L, check_finite=False)
        crit = float(L @ step)
        log.debug("nr iter=%d criterion=%.3e kappa=%.6f", iters, crit, kappa)
    converged = crit < alpha
    Sigma_inv = _cho_inverse(cf)
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    _, ll, d1, d2, d3, d4 = terms
    result = ModeResult(b, S, Sigma_inv, iters, converged, crit, kappa, terms[0], ll, d1, d2, d3, d4, logdet)
    if not converged and raise_on_fail:
        raise NonConvergenceError(f"mode finding did not converge in {max_iters} iterations (criterion {crit:.3e})", result)
    return result


# ---------------------------------------------------------------------------
# fully exponential pieces
# ---------------------------------------------------------------------------


def dbhat_dc(Sigma_inv, k, dH=None):
    """d bhat^(c) / d c_k at c = 0; column k of Sigma^{-1} when H(b) = b."""
    if dH is None:
        return np.array(Sigma_inv[:, k], dtype=float)
    return Sigma_inv @ np.asarray(dH, dtype=float)


def _A(model, mode):
    return np.asarray(model.Z_glm @ mode.Sigma_inv)


def dsigma_dc(model, mode, k):
    """dSigma^(c)/dc_k at c = 0 for H(b) = b, sparse on the pattern of Z'Z."""
    a_k = model.Z_glm @ dbhat_dc(mode.Sigma_inv, k)
    return model.gram_glm.to_sparse(-mode.d3 * a_k)


def d2bhat_dcdc(model, mode, k, d):
    a_k = model.Z_glm @ mode.Sigma_inv[:, k]
    a_d = model.Z_glm @ mode.Sigma_inv[:, d]
    return mode.Sigma_inv @ (model.Z_glm.T @ (mode.d3 * a_d * a_k))


def d2sigma_dcdc(model, mode, k, d):
    """d^2 Sigma^(c) / dc_k dc_d at c = 0 for H(b) = b."""
    Z = model.Z_glm
    a_k = Z @ mode.Sigma_inv[:, k]
    a_d = Z @ mode.Sigma_inv[:, d]
    zb2 = Z @ d2bhat_dcdc(model, mode, k, d)
    return model.gram_glm.to_sparse(-(mode.d3 * zb2 + mode.d4 * a_k * a_d))


@dataclass
class _Geometry:
    q: np.ndarray
    u: np.ndarray
    w: np.ndarray


def _geometry(model, mode):
    q = model.gram_glm.quadratic_diag(mode.Sigma_inv) if model.n_glm else np.zeros(0)
    u = mode.Sigma_inv @ (model.Z_glm.T @ (mode.d3 * q)) if model.n_glm else np.zeros(model.m)
    w = model.Z_glm @ u if model.n_glm else np.zeros(0)
    return _Geometry(q, u, w)


def fe_mean_corrections(model, mode, method="observation", geometry=None):
    """Corrections to bhat: -1/2 tr(Sigma^{-1} dSigma/dc_k) for every k.

    ``method="matrix"`` forms each dSigma/dc_k explicitly and contracts it
    against Sigma^{-1} over its sparse pattern; the default collapses the
    same trace to observation space.
    """
    if model.n_glm == 0:
        return np.zeros(model.m)
    if method == "matrix":
        out = np.empty(model.m)
        for k in range(model.m):
            out[k] = -0.5 * hadamard_trace(dsigma_dc(model, mode, k), mode.Sigma_inv)
        return out
    geo = geometry or _geometry(model, mode)
    return 0.5 * geo.u


def required_pattern(model):
    """Entries of v~ the M step reads: within-Gamma blocks plus Z'Z of sigma2*I blocks."""
    if model.has_ar1:
        raise TierRefusedError("full fully-exponential variance corrections are not available with AR(1) residuals")
    m = model.m
    rows, cols = [], []
    for grp in model.layout.groups:
        a, c = np.triu_indices(grp.V)
        rows.append(grp.index[:, a].ravel())
        cols.append(grp.index[:, c].ravel())
    for block in model.normal_blocks:
        gram = model.normal_gram[block.label]
        rows.append(gram.rows)
        cols.append(gram.cols)
    if not rows:
        return Pattern(np.zeros(0, np.int64), np.zeros(0, np.int64), m)
    return Pattern.from_pairs(np.concatenate(rows), np.concatenate(cols), m)


def _worker_count(workers):
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get("NNGLMM_WORKERS", "1")))


def fe_variance_corrections(model, mode, pattern, geometry=None, workers=None, chunk=256):
    """Fully exponential v~ on ``pattern`` only; returns values aligned with it.

    Pairs are grouped by their row index k so each k's contribution
    (the stored dSigma/dc_k, here its observation-space weights) is built
    once and reused for every d paired with it. Chunks of k are
    independent and merged in order.
    """
    if pattern.size == 0:
        return np.zeros(0)
    base = mode.Sigma_inv[pattern.rows, pattern.cols]
    if model.n_glm == 0:
        return base.copy()
    geo = geometry or _geometry(model, mode)
    A = _A(model, mode)
    P = np.asarray((model.Z_glm @ A.T))
    P2 = P * P
    d3, d4 = mode.d3, mode.d4
    c = d4 * geo.q + d3 * geo.w
    ks = np.unique(pattern.rows)
    order = np.argsort(pattern.rows, kind="stable")
    bounds = np.searchsorted(pattern.rows[order], ks)
    bounds = np.append(bounds, order.size)
    chunks = [range(s, min(s + chunk, ks.size)) for s in range(0, ks.size, chunk)]

    def run(rng):
        kk = ks[rng.start:rng.stop]
        Ak = A[:, kk]
        Gk = c[:, None] * Ak + d3[:, None] * (P2 @ (d3[:, None] * Ak))
        sel = order[bounds[rng.start]:bounds[rng.stop]]
        kpos = np.searchsorted(kk, pattern.rows[sel])
        vals = 0.5 * np.einsum("ij,ij->j", A[:, pattern.cols[sel]], Gk[:, kpos])
        return sel, vals

    n_workers = _worker_count(workers)
    if n_workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(r) for r in chunks]
    corr = np.zeros(pattern.size)
    for sel, vals in results:
        corr[sel] = vals
    return base + corr


def fe_variance_entry_matrix(model, mode, k, d):
    """Single v~_kd from explicit dSigma and d2Sigma matrices (reference path)."""
    Si = mode.Sigma_inv
    dk = dsigma_dc(model, mode, k).toarray()
    dd = dsigma_dc(model, mode, d).toarray()
    d2 = d2sigma_dcdc(model, mode, k, d).toarray()
    return Si[k, d] - 0.5 * (np.sum(Si * d2) - np.trace(Si @ dd @ Si @ dk))


def score_expectations(model, params, mode, tier, geometry=None):
    tier = Tier(tier)
    blocks = {b.label: b for b in model.glm_blocks}
    zb = model.Z_glm @ mode.b_hat
    offsets = {lab: zb[model.glm_slices[lab]] for lab in blocks}
    if tier is Tier.FIRST_ORDER:
        return ScoreExpectations(tier, blocks, offsets)
    geo = geometry or _geometry(model, mode)
    w = {lab: geo.w[model.glm_slices[lab]] for lab in blocks}
    q = {lab: geo.q[model.glm_slices[lab]] for lab in blocks}
    return ScoreExpectations(tier, blocks, offsets, w, q)


def posterior_moments(model, params, mode, tier, pattern=None, workers=None):
    """Moments and score expectations at a given mode for one accuracy tier."""
    tier = Tier(tier)
    if pattern is None:
        pattern = required_pattern(model) if not model.has_ar1 else Pattern(np.zeros(0, np.int64), np.zeros(0, np.int64), model.m)
    if tier is Tier.FIRST_ORDER:
        moments = PosteriorMoments(mode.b_hat, tier, pattern, sigma_inv=mode.Sigma_inv)
        return EStepResult(mode, moments, score_expectations(model, params, mode, tier))
    geo = _geometry(model, mode)
    b_tilde = mode.b_hat + fe_mean_corrections(model, mode, geometry=geo)
    scores = score_expectations(model, params, mode, tier, geometry=geo)
    if tier is Tier.FE_MEAN:
        moments = PosteriorMoments(b_tilde, tier, pattern, sigma_inv=mode.Sigma_inv)
    else:
        vals = fe_variance_corrections(model, mode, pattern, geometry=geo, workers=workers)
        moments = PosteriorMoments(b_tilde, tier, pattern, v_values=vals, sigma_inv=mode.Sigma_inv)
    return EStepResult(mode, moments, scores)


def e_step(model, params, tier, b_init=None, max_iters=50, alpha=1e-8, single_step=False, pattern=None, workers=None, G_inv=None):
    tier = Tier(tier)
    if tier is Tier.FULL_FE and model.has_ar1:
        raise TierRefusedError("full fully-exponential tier refused: AR(1) residual blocks make the variance pattern dense")
    mode = find_mode(model, params, b_init, max_iters=1 if single_step else max_iters, alpha=alpha,
                     raise_on_fail=not single_step, G_inv=G_inv, min_iters=0 if b_init is None else 1)
    return posterior_moments(model, params, mode, tier, pattern, workers)
