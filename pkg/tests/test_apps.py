import csv
import json
import os

import numpy as np
import pytest
import scipy.sparse as sp

from nnglmm.apps import cli, generic, simulation, sports
from nnglmm.em import FitConfig, fit
from nnglmm.errors import ValidationError
from nnglmm.estep import Tier, e_step
from nnglmm.families import Family
from nnglmm.model import Model, ParameterSet, RandomEffectsLayout, ResponseBlock, RKind
from nnglmm.oracle import QuadratureSpec, quadrature

GAMMA = np.array([[0.1, 0.02, 0.1], [0.02, 0.1, 0.0], [0.1, 0.0, 1.0]])


def two_team_games():
    return [sports.GameRecord("1", "A", "B", 17, 10), sports.GameRecord("2", "B", "A", 24, 21)]


@pytest.fixture(scope="module")
def season(tmp_path_factory):
    games, teams, _ = sports.simulate_season(16, np.random.default_rng(0), GAMMA, rounds=2)
    path = tmp_path_factory.mktemp("season") / "games.csv"
    sports.write_games(path, games)
    return str(path), games, teams


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- construction ----------------------------------------------------------------


def test_two_team_construction_is_exact(tmp_path):
    path = tmp_path / "g.csv"
    sports.write_games(path, two_team_games())
    model, teams = sports.build_model(sports.read_games(path))
    score, win = model.blocks
    assert teams == ["A", "B"]
    assert np.array_equal(score.y, [17, 10, 21, 24])
    assert np.array_equal(win.y, [1, 1])
    Z1 = [[1, 0, 0, 0, -1, 0], [0, -1, 0, 1, 0, 0], [1, 0, 0, 0, -1, 0], [0, -1, 0, 1, 0, 0]]
    Z2 = [[0, 0, 1, 0, 0, -1], [0, 0, -1, 0, 0, 1]]
    assert np.array_equal(score.Z.toarray(), Z1)
    assert np.array_equal(win.Z.toarray(), Z2)
    assert np.array_equal(score.X, np.ones((4, 1))) and win.X.shape == (2, 0)
    grp = model.layout.groups[0]
    assert grp.components == sports.COMPONENTS and grp.M == 2


def test_linear_predictor_example():
    model, _ = sports.build_model(two_team_games())
    b = np.arange(1.0, 7.0)
    assert np.array_equal(model.blocks[0].Z @ b, [-4, 2, -4, 2])


def test_home_effect_column_and_neutral_games():
    games = [sports.GameRecord("1", "A", "B", 3, 1, neutral=True), sports.GameRecord("2", "A", "B", 1, 3)]
    model, _ = sports.build_model(games, home_effect=True)
    win = model.block(sports.WIN_BLOCK)
    assert np.array_equal(win.X, [[0.0], [1.0]])
    assert np.array_equal(win.Z.toarray()[0], win.Z.toarray()[1])


def test_two_team_posterior_against_reduced_quadrature():
    # the data load on three contrasts only, so their posterior is a 3-d integral
    model, _ = sports.build_model(two_team_games())
    beta = np.log(18.0)
    params = ParameterSet({"score": np.array([beta]), "win": np.zeros(0)}, [np.array([[0.1, 0, 0.1], [0, 0.1, 0], [0.1, 0, 0.5]])])
    C = np.array([[1, 0, 0, 0, -1, 0], [0, -1, 0, 1, 0, 0], [0, 0, 1, 0, 0, -1]], float)
    Gu = C @ np.kron(np.eye(2), params.gammas[0]) @ C.T
    layout = RandomEffectsLayout.contiguous([("u", 3, 1)])
    Z1 = sp.csr_matrix(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0], [0, 1, 0]], float))
    Z2 = sp.csr_matrix(np.array([[0, 0, 1], [0, 0, -1]], float))
    reduced = Model([ResponseBlock("score", Family.poisson(), [17, 10, 21, 24], np.ones((4, 1)), Z1),
                     ResponseBlock("win", Family.binary(), [1, 1], np.zeros((2, 0)), Z2)], layout)
    q = quadrature(reduced, ParameterSet(dict(params.betas), [Gu]), QuadratureSpec(31))
    fe = C @ e_step(model, params, Tier.FULL_FE).moments.b_tilde
    fo = C @ e_step(model, params, Tier.FIRST_ORDER).moments.b_tilde
    assert np.allclose(fe, q.mean, rtol=1e-2)
    assert np.max(np.abs(fe - q.mean)) < np.max(np.abs(fo - q.mean))
    # team A outscored B over the two games and o is positively tied to w
    assert fe[2] > 0


# --- ingestion errors ------------------------------------------------------------------

HEAD = "game_id,home,away,home_score,away_score,neutral\n"


@pytest.mark.parametrize(
    "body,needle",
    [
        ("", "no games"),
        (HEAD, "no games"),
        ("id,h,a,x,y\n1,A,B,1,2\n", "expected header"),
        (HEAD + "1,A,B,1,2,0\n1,B,A,3,2,0\n", "duplicate game_id"),
        (HEAD + "1,A,A,1,2,0\n", "cannot play itself"),
        (HEAD + "1,A,B,-1,2,0\n", "nonnegative"),
        (HEAD + "1,A,B,1.5,2,0\n", "not an integer"),
        (HEAD + "1,A,B,2,2,0\n", "tied"),
        (HEAD + "1,A,B,3,2,maybe\n", "not a boolean"),
        (HEAD + "1,A,B,3\n", "at least 5 fields"),
    ],
)
def test_bad_game_files(tmp_path, body, needle):
    path = _write(tmp_path / "g.csv", body)
    with pytest.raises(ValidationError, match=needle):
        sports.read_games(path)


def test_error_messages_carry_line_numbers(tmp_path):
    path = _write(tmp_path / "g.csv", HEAD + "1,A,B,1,2,0\n2,A,C,1,2,0\n")
    with pytest.raises(ValidationError, match="line 3: unknown team 'C'"):
        sports.read_games(path, teams=["A", "B"])


def test_game_file_round_trip(tmp_path, season):
    _, games, _ = season
    path = tmp_path / "copy.csv"
    sports.write_games(path, games)
    assert sports.read_games(path) == games


def test_ranking_table_ranks_and_ties():
    layout = RandomEffectsLayout.contiguous([("team", sports.COMPONENTS, ("B", "A", "C"))])
    b = np.array([0, 0, 1.0, 0, 0, 1.0, 0, 0, -2.0])
    rows = sports.ranking_table(["B", "A", "C"], b, layout)
    assert {r.team: r.rank for r in rows} == {"A": 1, "B": 2, "C": 3}
    assert sorted(r.rank for r in rows) == [1, 2, 3]


def test_independent_models_split_layout(season):
    _, games, teams = season
    joint, _ = sports.build_model(games, teams)
    s, w = sports.independent_models(games, teams)
    assert s.m == 2 * len(teams) and w.m == len(teams)
    idx = joint.layout.groups[0].index
    assert np.array_equal(s.blocks[0].Z.toarray(), joint.blocks[0].Z.toarray()[:, idx[:, :2].ravel()])


def test_game_order_does_not_change_estimates(season):
    _, games, teams = season
    cfg = FitConfig(tier_schedule=(Tier.FIRST_ORDER,), em_tol=1e-6)
    a = fit(sports.build_model(games, teams)[0], None, cfg)
    perm = np.random.default_rng(1).permutation(len(games))
    b = fit(sports.build_model([games[i] for i in perm], teams)[0], None, cfg)
    assert a.iterations == b.iterations
    assert np.allclose(a.params.flatten(), b.params.flatten(), rtol=1e-8, atol=1e-10)
    assert np.allclose(a.moments.b_tilde, b.moments.b_tilde, atol=1e-8)


# --- generic configuration ---------------------------------------------------------------


def test_generic_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    n = 12
    layout = RandomEffectsLayout.contiguous([("s", ("g", "m"), 4), ("c", 1, 3)])
    Z1 = np.zeros((n, layout.m))
    Z1[:, :8] = np.round(rng.random((n, 8)) * (rng.random((n, 8)) < 0.4), 3)
    Z2 = np.zeros((n, layout.m))
    Z2[np.arange(n), 8 + np.arange(n) % 3] = 1.0
    Z1, Z2 = sp.csr_matrix(Z1), sp.csr_matrix(Z2)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    blocks = [ResponseBlock("grade", Family.normal(), rng.normal(size=n), X, Z1, RKind.AR1, (5, 7)),
              ResponseBlock("pass", Family.binary(), rng.integers(0, 2, n), X[:, :1], Z2)]
    model = Model(blocks, layout, validate=False)
    path = generic.write_model(model, tmp_path, {"tiers": ["first-order", "fe-mean"]})
    back, opts = generic.load_model(path)
    assert opts == {"tiers": ["first-order", "fe-mean"]}
    assert back.layout.groups[0].levels == layout.groups[0].levels
    for a, b in zip(model.blocks, back.blocks):
        assert a.label == b.label and a.family.kind == b.family.kind
        assert np.array_equal(a.y, b.y) and np.array_equal(a.X, b.X)
        assert (a.Z != b.Z).nnz == 0
        assert a.r_kind == b.r_kind and tuple(a.series or ()) == tuple(b.series or ())


def test_generic_errors(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        generic.load_model(str(tmp_path / "missing.json"))
    cfg = {"groups": [{"name": "g", "components": ["a"]}],
           "responses": [{"label": "y", "family": "normal", "data": "y.csv", "y": "y", "z": "z.jsonl"}]}
    _write(tmp_path / "model.json", json.dumps(cfg))
    with pytest.raises(ValidationError, match="data file not found"):
        generic.load_model(str(tmp_path / "model.json"))
    _write(tmp_path / "y.csv", "y\n1.0\n2.0\n")
    _write(tmp_path / "z.jsonl", '[{"effect_id": "g/l1/a", "weight": 1}]\n[{"effect_id": "g/l1/b", "weight": 1}]\n')
    with pytest.raises(ValidationError, match=r"z.jsonl:2: unknown component 'b'"):
        generic.load_model(str(tmp_path / "model.json"))
    _write(tmp_path / "z.jsonl", '[{"effect_id": "g/l1/a", "weight": 1}]\n{oops\n')
    with pytest.raises(ValidationError, match=r"z.jsonl:2: invalid JSON"):
        generic.load_model(str(tmp_path / "model.json"))
    _write(tmp_path / "y.csv", "y\n1.0\nabc\n")
    _write(tmp_path / "z.jsonl", '[{"effect_id": "g/l1/a", "weight": 1}]\n[{"effect_id": "g/l2/a", "weight": 1}]\n')
    with pytest.raises(ValidationError, match=r"y.csv:3: column 'y' value 'abc'"):
        generic.load_model(str(tmp_path / "model.json"))


# --- command line ------------------------------------------------------------------------------


def test_cli_rank_outputs(tmp_path, season):
    path, games, teams = season
    out = tmp_path / "rank"
    code = cli.main(["rank", "--data", path, "--tier", "first-order", "--out", str(out), "--independent"])
    assert code == 0
    rows = _read_csv(out / "rankings.csv")
    assert sorted(int(r["rank"]) for r in rows) == list(range(1, len(teams) + 1))
    res = json.load(open(out / "results.json"))
    assert res["converged"] and res["tier"] == "first-order"
    G = np.array(res["G_star"])
    assert G.shape == (3, 3) and np.allclose(G, G.T)
    assert len(res["independent"]["score_gamma"]) == 2 and len(res["independent"]["win_gamma"]) == 1
    for name in ("parameters.csv", "eblups.csv", "trace.csv"):
        assert os.path.exists(out / name)


def test_cli_generic_config_matches_rank(tmp_path, season):
    path, games, teams = season
    code = cli.main(["rank", "--data", path, "--tier", "first-order", "--out", str(tmp_path / "rank")])
    assert code == 0
    model, _ = sports.build_model(sports.read_games(path))
    cfg = generic.write_model(model, tmp_path / "generic")
    code = cli.main(["fit", "--model", cfg, "--tier", "first-order", "--out", str(tmp_path / "fit")])
    assert code == 0
    a = _read_csv(tmp_path / "rank" / "parameters.csv")
    b = _read_csv(tmp_path / "fit" / "parameters.csv")
    assert [float(r["estimate"]) for r in a] == [float(r["estimate"]) for r in b]


def test_cli_team_map_consolidates(tmp_path, season):
    path, games, teams = season
    mp = _write(tmp_path / "map.csv", "team,mapped\n" + "".join(f"{t},lower\n" for t in teams[12:]))
    out = tmp_path / "mapped"
    assert cli.main(["rank", "--data", path, "--tier", "first-order", "--team-map", mp, "--out", str(out)]) == 0
    ranked = {r["team"] for r in _read_csv(out / "rankings.csv")}
    assert ranked == set(teams[:12]) | {"lower"}


def test_cli_exit_codes(tmp_path, season, capsys):
    bad = _write(tmp_path / "bad.csv", HEAD + "1,A,A,1,2,0\n")
    assert cli.main(["rank", "--data", bad, "--out", str(tmp_path / "o")]) == 2
    assert "cannot play itself" in capsys.readouterr().err
    assert cli.main(["rank", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 2
    path, games, teams = season
    model, _ = sports.build_model(games, teams)
    cfg = generic.write_model(model, tmp_path / "slow", {"tiers": ["first-order"], "max_em_iters": 2})
    assert cli.main(["fit", "--model", cfg, "--out", str(tmp_path / "o2")]) == 3
    with pytest.raises(SystemExit):
        cli.main(["rank"])


def test_cli_fit_with_standard_errors(tmp_path):
    rng = np.random.default_rng(5)
    K, per = 15, 6
    n = K * per
    g = np.repeat(np.arange(K), per)
    layout = RandomEffectsLayout.contiguous([("g", 1, K)])
    Z = sp.csr_matrix((np.ones(n), (np.arange(n), g)), shape=(n, K))
    y = 1.0 + rng.normal(0, 0.8, K)[g] + rng.normal(0, 0.5, n)
    model = Model([ResponseBlock("y", Family.normal(), y, np.ones((n, 1)), Z)], layout)
    cfg = generic.write_model(model, tmp_path / "lmm", {"em_tol": 1e-8})
    assert cli.main(["fit", "--model", cfg, "--se", "--out", str(tmp_path / "out")]) == 0
    rows = _read_csv(tmp_path / "out" / "parameters.csv")
    assert all(float(r["se"]) > 0 for r in rows)
    res = json.load(open(tmp_path / "out" / "results.json"))
    assert res["tier"] == "fe"


# --- simulation --------------------------------------------------------------------------------


def test_schedule_is_balanced():
    rng = np.random.default_rng(0)
    assert not np.any(simulation.derangement(50, rng) == np.arange(50))
    home, away = simulation.random_schedule(30, 8, rng)
    assert np.all(np.bincount(home, minlength=30) == 4) and np.all(np.bincount(away, minlength=30) == 4)
    assert not np.any(home == away)


def test_rating_distributions_have_target_scale():
    rng = np.random.default_rng(0)
    x = simulation.draw_ratings(200000, "normal", 0.5, rng)
    assert np.var(x) == pytest.approx(0.5, rel=0.02)
    t = simulation.draw_ratings(200000, "t3", 0.5, rng)
    from scipy import stats

    iqr = np.subtract(*np.percentile(t, [75, 25]))
    assert iqr == pytest.approx(np.sqrt(0.5 / 3) * 2 * stats.t.ppf(0.75, 3), rel=0.02)


def test_sim_config_validation():
    for kw in ({"runs": 0}, {"teams": 2}, {"games_per_team": 3}, {"dist": "cauchy"}, {"estimators": ("pl", "mcmc")}):
        with pytest.raises(ValueError):
            simulation.SimConfig(**kw)
    assert simulation.SimConfig(estimators=("fe", "pl")).estimators == ("pl", "fe")


def test_simulation_is_deterministic_and_order_independent():
    cfg = simulation.SimConfig(runs=3, teams=30, estimators=("pl", "laplace"), seed=11)
    recs, table = simulation.simulate(cfg)
    again = simulation.run_once(cfg, 2)
    assert again == recs[2]
    assert table["pl"]["runs"] == 3
    assert recs[0]["paths"] == ["pl", "laplace"]


def test_pl_only_simulation_skips_laplace():
    cfg = simulation.SimConfig(runs=1, teams=30, estimators=("pl",), seed=2)
    rec = simulation.run_once(cfg, 0)
    assert rec["paths"] == ["pl"] and "laplace" not in rec


def test_cli_simulate_repeatable(tmp_path):
    args = ["simulate", "--runs", "1", "--teams", "30", "--estimators", "pl,laplace", "--seed", "4"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a = json.load(open(tmp_path / "a" / "results.json"))
    b = json.load(open(tmp_path / "b" / "results.json"))
    assert a == b
    assert [r["estimator"] for r in _read_csv(tmp_path / "a" / "medians.csv")] == ["pl", "laplace"]
