"""Command-line entry point: ``rank``, ``simulate`` and ``fit`` subcommands.

Exit codes: 0 success, 2 invalid input or model, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from ..em import FitConfig, fit, standard_errors
from ..errors import DomainError, GLMMError, NonConvergenceError, ValidationError
from ..estep import Tier
from ..pl import pl_fit
from . import generic, simulation, sports

log = logging.getLogger("nnglmm")

TIERS = ("pl", "first-order", "fe-mean", "fe")
EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGENCE = 0, 2, 3


def schedule_for(tier):
    order = [Tier.FIRST_ORDER, Tier.FE_MEAN, Tier.FULL_FE]
    return tuple(order[: order.index(Tier(tier)) + 1])


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def params_payload(model, params, se=None):
    names = params.index_map()
    flat = params.flatten()
    gammas = [{"group": g.name, "components": list(g.components), "matrix": gamma}
              for g, gamma in zip(model.layout.groups, params.gammas)]
    r = {k: {"kind": v.kind.value, "sigma2": v.sigma2, "rho": v.rho} for k, v in params.r.items()}
    table = [{"name": n, "estimate": float(x), "se": (float(se[i]) if se is not None else None)} for i, (n, x) in enumerate(zip(names, flat))]
    return {"betas": dict(params.betas), "gammas": gammas, "r": r, "table": table}


def eblup_rows(model, moments):
    rows = []
    diag = None
    try:
        diag = moments.entries(np.arange(model.m), np.arange(model.m))
    except KeyError:
        diag = None
    for g in model.layout.groups:
        for j, lev in enumerate(g.levels):
            for v, comp in enumerate(g.components):
                k = int(g.index[j, v])
                rows.append([g.name, lev, comp, float(moments.b_tilde[k]), float(diag[k]) if diag is not None else ""])
    return rows


def write_fit_outputs(out, model, result, extra=None):
    os.makedirs(out, exist_ok=True)
    payload = {
        "parameters": params_payload(model, result.params, result.se),
        "loglik_approx": result.loglik_approx,
        "iterations": result.iterations,
        "converged": result.converged,
        "trace": result.trace,
    }
    if extra:
        payload.update(extra)
    write_json(os.path.join(out, "results.json"), payload)
    write_csv(os.path.join(out, "parameters.csv"), ["name", "estimate", "se"],
              [[t["name"], t["estimate"], "" if t["se"] is None else t["se"]] for t in payload["parameters"]["table"]])
    write_csv(os.path.join(out, "eblups.csv"), ["group", "level", "component", "estimate", "variance"], eblup_rows(model, result.moments))
    if result.trace:
        keys = sorted({k for rec in result.trace for k in rec})
        write_csv(os.path.join(out, "trace.csv"), keys, [[rec.get(k, "") for k in keys] for rec in result.trace])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def run_fit(model, tier, em_tol=1e-6, init=None, workers=None):
    if tier == "pl":
        return pl_fit(model, init)
    return fit(model, init, FitConfig(tier_schedule=schedule_for(tier), em_tol=em_tol, workers=workers))


def read_team_map(path):
    mapping = {}
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh), start=1):
            if not row or (i == 1 and [c.strip() for c in row[:2]] == ["team", "mapped"]):
                continue
            if len(row) < 2:
                raise ValidationError(f"{path}:{i}: expected team,mapped")
            mapping[row[0].strip()] = row[1].strip()
    return mapping


def cmd_rank(args):
    teams = None
    if args.teams:
        with open(args.teams) as fh:
            teams = [t.strip() for t in fh if t.strip()]
    games = sports.read_games(args.data, teams)
    if args.team_map:
        mp = read_team_map(args.team_map)
        games = [sports.GameRecord(g.game_id, mp.get(g.home, g.home), mp.get(g.away, g.away), g.home_score, g.away_score, g.neutral)
                 for g in games]
        if teams is not None:
            teams = list(dict.fromkeys(mp.get(t, t) for t in teams))
    model, teams = sports.build_model(games, teams, home_effect=args.home_effect)
    result = run_fit(model, args.tier, args.em_tol, workers=args.workers)
    rows = sports.ranking_table(teams, result.moments.b_tilde, model.layout)
    extra = {"tier": args.tier, "teams": teams, "G_star": result.params.gammas[0]}
    if args.independent:
        score_model, win_model = sports.independent_models(games, teams, args.home_effect)
        r1 = run_fit(score_model, args.tier, args.em_tol, workers=args.workers)
        r2 = run_fit(win_model, args.tier, args.em_tol, workers=args.workers)
        extra["independent"] = {"score_gamma": r1.params.gammas[0], "win_gamma": r2.params.gammas[0],
                                "score_beta": r1.params.betas[sports.SCORE_BLOCK], "win_beta": r2.params.betas[sports.WIN_BLOCK]}
    write_fit_outputs(args.out, model, result, extra)
    write_csv(os.path.join(args.out, "rankings.csv"), ["rank", "team", "offense", "defense", "win_propensity"],
              [[r.rank, r.team, r.offense, r.defense, r.win_propensity] for r in sorted(rows, key=lambda r: r.rank)])
    print(f"ranked {len(teams)} teams from {len(games)} games; output in {args.out}")
    return EXIT_OK


def cmd_simulate(args):
    estimators = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
    cfg = simulation.SimConfig(runs=args.runs, teams=args.teams, games_per_team=args.games_per_team, dist=args.dist,
                               estimators=estimators, seed=args.seed, workers=args.workers or 0)

    def progress(rec):
        log.info("run %d done", rec["run"])

    records, table = simulation.simulate(cfg, progress)
    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "medians.csv"), ["estimator", "sigma2_w", "beta", "runs"],
              [[e, table[e]["sigma2_w"], table[e]["beta"], table[e]["runs"]] for e in cfg.estimators])
    rows = []
    for rec in records:
        for e in cfg.estimators:
            val = rec.get(e)
            rows.append([rec["run"], e, "" if val is None else val[0], "" if val is None else val[1]])
    write_csv(os.path.join(args.out, "runs.csv"), ["run", "estimator", "sigma2_w", "beta"], rows)
    write_json(os.path.join(args.out, "results.json"), {
        "config": {"runs": cfg.runs, "teams": cfg.teams, "games_per_team": cfg.games_per_team, "dist": cfg.dist,
                   "estimators": list(cfg.estimators), "seed": cfg.seed},
        "medians": table,
        "paths": [rec["paths"] for rec in records],
    })
    for e in cfg.estimators:
        print(f"{e:8s} sigma2_w={table[e]['sigma2_w']:.4f} beta={table[e]['beta']:.4f} runs={table[e]['runs']}")
    return EXIT_OK


def cmd_fit(args):
    model, opts = generic.load_model(args.model)
    tiers = opts.get("tiers")
    tier = args.tier or (tiers[-1] if tiers else "fe")
    if model.has_ar1 and tier == "fe" and not args.tier:
        tier = "fe-mean"
    if tier == "pl":
        result = pl_fit(model)
    else:
        sched = tuple(Tier(t) for t in tiers) if tiers and not args.tier else schedule_for(tier)
        cfg = FitConfig(tier_schedule=sched, em_tol=float(opts.get("em_tol", 1e-6)),
                        max_em_iters=int(opts.get("max_em_iters", 10000)), workers=args.workers)
        result = fit(model, None, cfg)
        if args.se:
            result.se = standard_errors(model, result.params, sched[-1], b_init=result.mode.b_hat, workers=args.workers)
    write_fit_outputs(args.out, model, result, {"tier": tier})
    print(f"fitted {len(model.blocks)} response blocks, m={model.m}; output in {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="nnglmm", description="Multiresponse GLMM fitting by EM with Laplace E steps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration trace records")
    p.add_argument("--workers", type=int, default=None, help="worker count (default: NNGLMM_WORKERS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rank", help="fit the Poisson-binary rating model to a game file")
    r.add_argument("--data", required=True, help="CSV with game_id,home,away,home_score,away_score,neutral")
    r.add_argument("--tier", choices=TIERS, default="fe")
    r.add_argument("--independent", action="store_true", help="also fit the score and win models separately")
    r.add_argument("--home-effect", action="store_true", help="add a home-field fixed effect to the win model")
    r.add_argument("--teams", help="file with one allowed team id per line")
    r.add_argument("--team-map", help="CSV team,mapped consolidating team ids (e.g. lower divisions)")
    r.add_argument("--em-tol", type=float, default=1e-6)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rank)

    s = sub.add_parser("simulate", help="run the binary home-win simulation study")
    s.add_argument("--runs", type=int, default=500)
    s.add_argument("--teams", type=int, default=100)
    s.add_argument("--games-per-team", type=int, default=8)
    s.add_argument("--dist", choices=("normal", "t3"), default="normal")
    s.add_argument("--estimators", default=",".join(simulation.ESTIMATORS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a model described by a JSON config")
    f.add_argument("--model", required=True, help="model config (JSON)")
    f.add_argument("--tier", choices=TIERS, default=None)
    f.add_argument("--se", action="store_true", help="compute central-difference standard errors")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ValidationError, DomainError, GLMMError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
