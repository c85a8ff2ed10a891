"""Poisson-binary sports rating model: game ingestion and ranking tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import ValidationError
from ..families import Family
from ..model import Model, RandomEffectsLayout, ResponseBlock

HEADER = ("game_id", "home", "away", "home_score", "away_score", "neutral")
COMPONENTS = ("o", "d", "w")
SCORE_BLOCK = "score"
WIN_BLOCK = "win"
_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n", ""}


@dataclass(frozen=True)
class GameRecord:
    game_id: str
    home: str
    away: str
    home_score: int
    away_score: int
    neutral: bool = False


@dataclass(frozen=True)
class RankingRow:
    team: str
    offense: float
    defense: float
    win_propensity: float
    rank: int


def _fail(msg, line=None):
    where = f"line {line}: " if line is not None else ""
    raise ValidationError(where + msg, [{"code": "bad_games", "block": None, "message": where + msg, "level": "error", "line": line}])


def _parse_int(text, name, line):
    try:
        val = int(text)
    except ValueError:
        _fail(f"{name} '{text}' is not an integer", line)
    if val < 0:
        _fail(f"{name} must be nonnegative, got {val}", line)
    return val


def _parse_bool(text, line):
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    _fail(f"neutral flag '{text}' is not a boolean", line)


def read_games(path, teams=None):
    """Parse and validate a game CSV; ``teams`` optionally restricts allowed ids."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        _fail("no games")
    header = tuple(c.strip() for c in rows[0])
    if header[:5] != HEADER[:5] or (len(header) > 5 and header[5] != "neutral"):
        _fail(f"expected header {','.join(HEADER)}, got {','.join(header)}", 1)
    games = []
    seen = set()
    allowed = None if teams is None else set(teams)
    for line, row in enumerate(rows[1:], start=2):
        if len(row) < 5:
            _fail(f"expected at least 5 fields, got {len(row)}", line)
        gid, home, away = (c.strip() for c in row[:3])
        if gid in seen:
            _fail(f"duplicate game_id '{gid}'", line)
        seen.add(gid)
        if home == away:
            _fail(f"team '{home}' cannot play itself", line)
        for t in (home, away):
            if allowed is not None and t not in allowed:
                _fail(f"unknown team '{t}'", line)
        hs = _parse_int(row[3].strip(), "home_score", line)
        as_ = _parse_int(row[4].strip(), "away_score", line)
        if hs == as_:
            _fail(f"game '{gid}' is tied; ties must be resolved before fitting", line)
        neutral = _parse_bool(row[5], line) if len(row) > 5 else False
        games.append(GameRecord(gid, home, away, hs, as_, neutral))
    if not games:
        _fail("no games")
    return games


def write_games(path, games):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for g in games:
            w.writerow([g.game_id, g.home, g.away, g.home_score, g.away_score, int(g.neutral)])


def team_order(games):
    """Teams in order of first appearance (home before away within a game)."""
    order = {}
    for g in games:
        for t in (g.home, g.away):
            order.setdefault(t, len(order))
    return list(order)


def build_model(games, teams=None, home_effect=False, scores=True, wins=True):
    """Assemble the joint model: Poisson scores (2 rows/game) and probit home wins.

    Each team owns three adjacent coordinates (o, d, w). A score row for
    team T against opponent O loads +1 on o_T and -1 on d_O; the two rows
    of a game are ordered by team index. The win row loads +1 on the home
    team's w and -1 on the visitor's.
    """
    if not games:
        _fail("no games")
    teams = list(teams) if teams is not None else team_order(games)
    pos = {t: i for i, t in enumerate(teams)}
    for g in games:
        for t in (g.home, g.away):
            if t not in pos:
                _fail(f"unknown team '{t}' in game '{g.game_id}'")
    layout = RandomEffectsLayout.contiguous([("team", COMPONENTS, tuple(teams))])
    idx = layout.groups[0].index
    m = layout.m
    n = len(games)
    blocks = []
    if scores:
        rows, cols, vals, y = [], [], [], []
        for gi, g in enumerate(games):
            pair = [(g.home, g.away, g.home_score), (g.away, g.home, g.away_score)]
            pair.sort(key=lambda p: pos[p[0]])
            for k, (team, opp, pts) in enumerate(pair):
                r = 2 * gi + k
                rows += [r, r]
                cols += [idx[pos[team], 0], idx[pos[opp], 1]]
                vals += [1.0, -1.0]
                y.append(pts)
        Z1 = sp.csr_matrix((vals, (rows, cols)), shape=(2 * n, m))
        blocks.append(ResponseBlock(SCORE_BLOCK, Family.poisson(), np.array(y, float), np.ones((2 * n, 1)), Z1))
    if wins:
        rows = np.repeat(np.arange(n), 2)
        cols = np.array([[idx[pos[g.home], 2], idx[pos[g.away], 2]] for g in games]).ravel()
        vals = np.tile([1.0, -1.0], n)
        Z2 = sp.csr_matrix((vals, (rows, cols)), shape=(n, m))
        y2 = np.array([1.0 if g.home_score > g.away_score else 0.0 for g in games])
        if home_effect:
            X2 = np.array([[0.0 if g.neutral else 1.0] for g in games])
        else:
            X2 = np.zeros((n, 0))
        blocks.append(ResponseBlock(WIN_BLOCK, Family.binary(), y2, X2, Z2))
    return Model(blocks, layout), teams


def independent_models(games, teams=None, home_effect=False):
    """Scores-only and wins-only models with their own (o, d) and (w) layouts."""
    teams = list(teams) if teams is not None else team_order(games)
    joint, _ = build_model(games, teams, home_effect)
    idx = joint.layout.groups[0].index
    out = []
    for block, comps in zip(joint.blocks, (("o", "d"), ("w",))):
        keep = idx[:, [COMPONENTS.index(c) for c in comps]]
        layout = RandomEffectsLayout.contiguous([("team", comps, tuple(teams))])
        Z = block.Z[:, keep.ravel()]
        out.append(Model([ResponseBlock(block.label, block.family, block.y, block.X, Z)], layout))
    return out


def ranking_table(teams, b_tilde, layout):
    """Rows sorted by win propensity (descending); ties broken by team id."""
    idx = layout.groups[0].index
    comps = layout.groups[0].components
    get = {c: b_tilde[idx[:, comps.index(c)]] if c in comps else np.full(len(teams), np.nan) for c in COMPONENTS}
    order = sorted(range(len(teams)), key=lambda i: (-get["w"][i], teams[i]))
    rank = {i: r + 1 for r, i in enumerate(order)}
    return [RankingRow(teams[i], float(get["o"][i]), float(get["d"][i]), float(get["w"][i]), rank[i]) for i in range(len(teams))]


def simulate_season(p, rng, gamma, beta_score=3.0, beta_home=0.0, games_per_team=None, rounds=2):
    """Synthetic season with correlated (o, d, w) ratings.

    Scores are Poisson on (o, d); the winner is drawn from the probit on w
    and the two scores are ordered to agree with it. ``games_per_team``
    (even) gives a random home/away schedule, otherwise a repeated
    round-robin is played.
    """
    L = np.linalg.cholesky(np.asarray(gamma, float))
    ratings = rng.standard_normal((p, 3)) @ L.T
    teams = [f"T{i:03d}" for i in range(p)]
    if games_per_team:
        from .simulation import random_schedule

        home, away = random_schedule(p, games_per_team, rng)
        pairs = list(zip(home.tolist(), away.tolist()))
    else:
        pairs = [(i, j) if (rnd + i + j) % 2 == 0 else (j, i) for rnd in range(rounds) for i in range(p) for j in range(i + 1, p)]
    games = []
    for h, a in pairs:
        while True:
            hs = int(rng.poisson(np.exp(beta_score + ratings[h, 0] - ratings[a, 1])))
            as_ = int(rng.poisson(np.exp(beta_score + ratings[a, 0] - ratings[h, 1])))
            if hs != as_:
                break
        win = rng.standard_normal() < beta_home + ratings[h, 2] - ratings[a, 2]
        hi, lo = max(hs, as_), min(hs, as_)
        games.append(GameRecord(f"g{len(games) + 1}", teams[h], teams[a], hi if win else lo, lo if win else hi))
    return games, teams, ratings
