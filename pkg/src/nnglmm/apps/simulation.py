"""Binary home-win simulation: random 4-home/4-away schedules, four estimators."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..em import FitConfig, fit
from ..errors import GLMMError
from ..estep import Tier
from ..families import Family
from ..model import Model, ParameterSet, RandomEffectsLayout, ResponseBlock
from ..pl import PLConfig, pl_fit

log = logging.getLogger(__name__)

ESTIMATORS = ("pl", "laplace", "fe-mean", "fe")
_TIER_OF = {"laplace": Tier.FIRST_ORDER, "fe-mean": Tier.FE_MEAN, "fe": Tier.FULL_FE}


@dataclass(frozen=True)
class SimConfig:
    runs: int = 500
    teams: int = 100
    games_per_team: int = 8
    dist: str = "normal"
    variance: float = 0.5
    home_effect: float = 0.1
    estimators: tuple = ESTIMATORS
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.teams < 3:
            raise ValueError("need at least 3 teams")
        if self.games_per_team < 2 or self.games_per_team % 2:
            raise ValueError("games_per_team must be a positive even number")
        if self.dist not in ("normal", "t3"):
            raise ValueError(f"unknown rating distribution '{self.dist}'")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad or not self.estimators:
            raise ValueError(f"unknown estimators {bad}; choose from {', '.join(ESTIMATORS)}")
        object.__setattr__(self, "estimators", tuple(e for e in ESTIMATORS if e in self.estimators))


def derangement(p, rng):
    while True:
        perm = rng.permutation(p)
        if not np.any(perm == np.arange(p)):
            return perm


def random_schedule(p, games_per_team, rng):
    """Every team hosts games_per_team/2 games and visits as many."""
    home, away = [], []
    for _ in range(games_per_team // 2):
        perm = derangement(p, rng)
        home.append(np.arange(p))
        away.append(perm)
    return np.concatenate(home), np.concatenate(away)


def draw_ratings(p, dist, variance, rng):
    if dist == "normal":
        return rng.normal(0.0, np.sqrt(variance), p)
    # t3 has variance 3; scale to the target variance
    return rng.standard_t(3, p) * np.sqrt(variance / 3.0)


def simulate_data(cfg, rng):
    home, away = random_schedule(cfg.teams, cfg.games_per_team, rng)
    ratings = draw_ratings(cfg.teams, cfg.dist, cfg.variance, rng)
    latent = cfg.home_effect + ratings[home] - ratings[away] + rng.standard_normal(home.size)
    y = (latent > 0).astype(float)
    return home, away, y, ratings


def build_binary_model(p, home, away, y):
    n = y.size
    layout = RandomEffectsLayout.contiguous([("team", ("w",), p)])
    Z = sp.csr_matrix((np.tile([1.0, -1.0], n), (np.repeat(np.arange(n), 2), np.column_stack([home, away]).ravel())), shape=(n, p))
    block = ResponseBlock("win", Family.binary(), y, np.ones((n, 1)), Z)
    return Model([block], layout)


def run_once(cfg, run_index, seed_seq=None):
    """One replicate; returns {estimator: (sigma2_w, beta) or None on failure}."""
    seed_seq = seed_seq or np.random.SeedSequence(cfg.seed).spawn(run_index + 1)[run_index]
    rng = np.random.default_rng(seed_seq)
    home, away, y, _ = simulate_data(cfg, rng)
    model = build_binary_model(cfg.teams, home, away, y)
    init = ParameterSet({"win": model.default_params().betas["win"]}, [np.array([[cfg.variance]])])
    out = {"run": run_index, "paths": []}
    if "pl" in cfg.estimators:
        try:
            res = pl_fit(model, init, PLConfig())
            out["pl"] = (float(res.params.gammas[0][0, 0]), float(res.params.betas["win"][0]))
        except GLMMError as exc:
            log.warning("run %d: pl failed: %s", run_index, exc)
            out["pl"] = None
        out["paths"].append("pl")
    tiers = [t for e, t in _TIER_OF.items() if e in cfg.estimators]
    if tiers:
        try:
            res = fit(model, init, FitConfig(tier_schedule=tuple(tiers)))
            out["paths"].append("laplace")
            for e, t in _TIER_OF.items():
                if e in cfg.estimators:
                    st = res.stage(t)
                    out[e] = (float(st.params.gammas[0][0, 0]), float(st.params.betas["win"][0]))
        except GLMMError as exc:
            log.warning("run %d: laplace fit failed: %s", run_index, exc)
            for e in _TIER_OF:
                if e in cfg.estimators:
                    out[e] = None
    return out


def _worker(args):
    cfg, i, ss = args
    return run_once(cfg, i, ss)


def worker_count(requested=None):
    if requested:
        return max(1, int(requested))
    return max(1, int(os.environ.get("NNGLMM_WORKERS", "1")))


def simulate(cfg, progress=None):
    """All replicates in run order; returns (per-run records, medians table)."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.runs)
    jobs = [(cfg, i, seeds[i]) for i in range(cfg.runs)]
    n_workers = worker_count(cfg.workers)
    records = []
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            for rec in pool.map(_worker, jobs):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        for job in jobs:
            rec = _worker(job)
            records.append(rec)
            if progress:
                progress(rec)
    return records, medians(records, cfg.estimators)


def medians(records, estimators):
    table = {}
    for e in estimators:
        vals = np.array([r[e] for r in records if r.get(e) is not None])
        if vals.size == 0:
            table[e] = {"sigma2_w": float("nan"), "beta": float("nan"), "runs": 0}
        else:
            table[e] = {"sigma2_w": float(np.median(vals[:, 0])), "beta": float(np.median(vals[:, 1])), "runs": int(vals.shape[0])}
    return table
