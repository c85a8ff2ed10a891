"""EM driver with a staged accuracy schedule, log-likelihood monitoring and
central-difference standard errors."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import GLMMError, NonConvergenceError, NotPositiveDefiniteError, TierRefusedError
from .estep import Tier, e_step
from .model import RKind, invert_G_blockwise
from .mstep import ar1_scores, check_gammas, m_step
from .sparse import hadamard_trace

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class FitConfig:
    tier_schedule: tuple = (Tier.FIRST_ORDER, Tier.FE_MEAN, Tier.FULL_FE)
    em_tol: float = 1e-6
    max_em_iters: int = 10000
    # one NR step per E step until the EM relative change drops below this; None disables
    single_step_until: float | None = 1e-3
    nr_max_iters: int = 50
    alpha: float = 1e-8
    workers: int | None = None
    seed: int = 0
    monotone_slack: float = 1e-4

    def __post_init__(self):
        sched = tuple(Tier(t) for t in self.tier_schedule)
        if not sched:
            raise ValueError("tier schedule is empty")
        if any(b.rank <= a.rank for a, b in zip(sched, sched[1:])):
            raise ValueError("tier schedule must be strictly increasing in accuracy")
        self.tier_schedule = sched


@dataclass
class StageResult:
    tier: Tier
    params: object
    iterations: int
    converged: bool
    loglik_approx: float
    seconds: float


@dataclass
class FitResult:
    params: object
    moments: object
    mode: object
    loglik_approx: float
    se: np.ndarray | None = None
    iterations: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    converged: bool = True

    def stage(self, tier):
        tier = Tier(tier)
        for s in self.stages:
            if s.tier is tier:
                return s
        raise KeyError(tier.value)


def approx_loglik(model, params, mode, logdet_G=None):
    """First-order Laplace value of the marginal log-likelihood at b_hat.

    sum log f(y | b_hat) - 1/2 b_hat' G^-1 b_hat - 1/2 log|G| - 1/2 log|Sigma|;
    exact when every block is normal.
    """
    G_inv, ld = invert_G_blockwise(params.g_matrix(model.layout))
    if logdet_G is None:
        logdet_G = ld
    b = mode.b_hat
    total = float(np.sum(mode.loglik)) if mode.loglik is not None else 0.0
    for block in model.normal_blocks:
        r = params.r[block.label]
        res = block.y - block.Z @ b
        if block.p:
            res = res - block.X @ params.betas[block.label]
        Q = r.precision(block.series)
        total += -0.5 * block.n * _LOG_2PI - 0.5 * r.logdet(block.series) - 0.5 * float(res @ (Q @ res))
    total -= 0.5 * float(b @ (G_inv @ b)) + 0.5 * logdet_G + 0.5 * mode.logdet_sigma
    return total


def relative_change(new, old):
    return float(np.max(np.abs(new - old) / (np.abs(old) + 1e-8))) if old.size else 0.0


def fit(model, init=None, config=None, callback=None):
    """Run every stage of the schedule to convergence, warm-starting each from the last."""
    config = config or FitConfig()
    if model.has_ar1 and Tier.FULL_FE in config.tier_schedule:
        raise TierRefusedError("full fully-exponential tier refused: model has an AR(1) residual block")
    params = (init or model.default_params()).copy()
    check_gammas(model.layout, params.gammas)
    b = np.zeros(model.m)
    trace, stages, iterations = [], [], {}
    est = None
    for tier in config.tier_schedule:
        t_stage = time.perf_counter()
        change = np.inf
        prev_ll = None
        converged = False
        it = 0
        for it in range(1, config.max_em_iters + 1):
            t0 = time.perf_counter()
            single = config.single_step_until is not None and change > config.single_step_until
            est = e_step(model, params, tier, b_init=b, max_iters=config.nr_max_iters, alpha=config.alpha,
                         single_step=single, workers=config.workers)
            t_e = time.perf_counter() - t0
            ll = approx_loglik(model, params, est.mode)
            new = m_step(model, params, est, alpha=config.alpha)
            check_gammas(model.layout, new.gammas)
            change = relative_change(new.flatten(), params.flatten())
            if tier is Tier.FIRST_ORDER and prev_ll is not None and ll < prev_ll - config.monotone_slack:
                log.warning("approximate log-likelihood decreased from %.6f to %.6f at iteration %d", prev_ll, ll, it)
            prev_ll = ll
            rec = {
                "stage": tier.value,
                "iteration": it,
                "loglik_approx": ll,
                "max_rel_change": change,
                "gamma_min_eig": min(float(np.linalg.eigvalsh(g)[0]) for g in new.gammas),
                "nr_iters": est.mode.nr_iters,
                "single_step": single,
                "seconds": time.perf_counter() - t0,
                "estep_seconds": t_e,
            }
            trace.append(rec)
            if callback is not None:
                callback(rec)
            log.debug("%s", rec)
            b = est.mode.b_hat
            params = new
            if change < config.em_tol:
                converged = True
                break
        iterations[tier.value] = it
        stage_ll = trace[-1]["loglik_approx"] if trace else float("nan")
        stages.append(StageResult(tier, params.copy(), it, converged, stage_ll, time.perf_counter() - t_stage))
        if not converged:
            partial = FitResult(params, est.moments, est.mode, stage_ll, iterations=iterations, trace=trace, stages=stages,
                                converged=False)
            raise NonConvergenceError(f"EM stage '{tier.value}' did not converge in {config.max_em_iters} iterations", partial)
    # moments and log-likelihood at the final estimates
    final_tier = config.tier_schedule[-1]
    est = e_step(model, params, final_tier, b_init=b, max_iters=config.nr_max_iters, alpha=config.alpha,
                 workers=config.workers)
    ll = approx_loglik(model, params, est.mode)
    return FitResult(params, est.moments, est.mode, ll, iterations=iterations, trace=trace, stages=stages)


# ---------------------------------------------------------------------------
# standard errors
# ---------------------------------------------------------------------------


def observed_score(model, params, tier, b_init=None, alpha=1e-20, workers=None):
    """Expected complete-data score at Psi, aligned with ``params.flatten()``.

    With the E step evaluated at the same Psi this is the observed-data
    score (Fisher's identity), approximated at the chosen tier.
    """
    est = e_step(model, params, tier, b_init=b_init, alpha=alpha, workers=workers)
    mom, scores = est.moments, est.scores
    parts = []
    for label, beta in params.betas.items():
        block = model.block(label)
        if not block.p:
            continue
        if block.is_normal:
            r = params.r[label]
            res = block.y - block.X @ beta - block.Z @ mom.b_tilde
            parts.append(block.X.T @ (r.precision(block.series) @ res))
        else:
            parts.append(block.X.T @ scores.evaluate(label, beta))
    for grp, gamma in zip(model.layout.groups, params.gammas):
        V = grp.V
        idx = grp.index
        bt = mom.b_tilde[idx]
        S = bt.T @ bt + sum(mom.block(idx[j]) for j in range(grp.M))
        Gi = np.linalg.inv(gamma)
        D = 0.5 * Gi @ (S - grp.M * gamma) @ Gi
        a, c = np.triu_indices(V)
        parts.append(np.where(a == c, 1.0, 2.0) * D[a, c])
    for label, r in params.r.items():
        block = model.block(label)
        beta = params.betas[label]
        if r.kind is RKind.AR1:
            parts.append(ar1_scores(block, beta, mom, r.sigma2, r.rho))
        else:
            res = block.y - block.Z @ mom.b_tilde
            if block.p:
                res = res - block.X @ beta
            ZtZ = model.ZtZ[label]
            tr = hadamard_trace(ZtZ, mom.dense_v()) if mom.tier is not Tier.FULL_FE else _pattern_trace(model, label, mom)
            parts.append(np.array([-0.5 * block.n / r.sigma2 + 0.5 * (float(res @ res) + tr) / r.sigma2**2]))
    return np.concatenate(parts) if parts else np.zeros(0), est


def _pattern_trace(model, label, mom):
    gram = model.normal_gram[label]
    vals = gram.values(np.ones(gram.n))
    return float(np.sum(vals * mom.entries(gram.rows, gram.cols) * np.where(gram.rows == gram.cols, 1.0, 2.0)))


def score_jacobian(model, params, tier, b_init=None, workers=None):
    """Central-difference Jacobian dS/dPsi with h_j = 1e-4 (|Psi_j| + 1e-4)."""
    psi = params.flatten()
    h = 1e-4 * (np.abs(psi) + 1e-4)
    cols = []
    for j in range(psi.size):
        up, dn = psi.copy(), psi.copy()
        up[j] += h[j]
        dn[j] -= h[j]
        s_up, _ = observed_score(model, params.unflatten(up), tier, b_init, workers=workers)
        s_dn, _ = observed_score(model, params.unflatten(dn), tier, b_init, workers=workers)
        cols.append((s_up - s_dn) / (2.0 * h[j]))
    return np.column_stack(cols)


def standard_errors(model, params, tier=Tier.FULL_FE, b_init=None, workers=None, return_info=False):
    tier = Tier(tier)
    if model.has_ar1 and tier is Tier.FULL_FE:
        tier = Tier.FE_MEAN
    try:
        J = score_jacobian(model, params, tier, b_init, workers)
    except (GLMMError, np.linalg.LinAlgError) as exc:
        raise GLMMError(f"standard errors unavailable: {exc}") from exc
    info = -0.5 * (J + J.T)
    if not np.all(np.isfinite(info)):
        raise NotPositiveDefiniteError("observed information contains non-finite entries")
    w, vecs = np.linalg.eigh(info)
    if w.min() <= 0:
        names = params.index_map()
        bad = []
        for k in np.flatnonzero(w <= 0):
            top = np.argsort(-np.abs(vecs[:, k]))[:3]
            bad.append(f"eigenvalue {w[k]:.3e} along " + ", ".join(names[i] for i in top))
        raise NotPositiveDefiniteError("observed information is not positive definite: " + "; ".join(bad))
    cov = (vecs / w) @ vecs.T
    se = np.sqrt(np.diag(cov))
    return (se, info) if return_info else se


def fit_with_se(model, init=None, config=None):
    result = fit(model, init, config)
    tier = (config or FitConfig()).tier_schedule[-1]
    result.se = standard_errors(model, result.params, tier, b_init=result.mode.b_hat)
    return result


__all__ = [
    "FitConfig",
    "FitResult",
    "StageResult",
    "approx_loglik",
    "fit",
    "fit_with_se",
    "observed_score",
    "standard_errors",
    "relative_change",
]
