import numpy as np
import pytest
import scipy.sparse as sp
from conftest import normal_joint

from nnglmm.em import FitConfig, approx_loglik, fit, observed_score, relative_change, standard_errors
from nnglmm.errors import NonConvergenceError, TierRefusedError
from nnglmm.estep import Tier, e_step, find_mode
from nnglmm.families import Family
from nnglmm.model import Model, ParameterSet, RandomEffectsLayout, ResponseBlock, RKind, RStructure
from nnglmm.mstep import m_step
from nnglmm.oracle import QuadratureSpec, dense_normal_marginal, fd_check, quad_marginal_loglik


def league(seed=1, teams=3, reps=8, sigma2=0.5, beta=0.3):
    """Probit home-win data with an intercept: every ordered pair meets ``reps`` times."""
    rng = np.random.default_rng(seed)
    w = rng.normal(0, np.sqrt(sigma2), teams)
    pairs = [(i, j) for i in range(teams) for j in range(teams) if i != j] * reps
    n = len(pairs)
    h = np.array([a for a, _ in pairs])
    a = np.array([b for _, b in pairs])
    y = (beta + w[h] - w[a] + rng.standard_normal(n) > 0).astype(float)
    Z = sp.csr_matrix((np.tile([1.0, -1.0], n), (np.repeat(np.arange(n), 2), np.column_stack([h, a]).ravel())), shape=(n, teams))
    layout = RandomEffectsLayout.contiguous([("team", ("w",), teams)])
    return Model([ResponseBlock("win", Family.binary(), y, np.ones((n, 1)), Z)], layout)


def random_intercept(seed=0, groups=15, per=6):
    rng = np.random.default_rng(seed)
    n = groups * per
    g = np.repeat(np.arange(groups), per)
    x = rng.normal(size=n)
    y = 1.0 + 0.5 * x + rng.normal(0, 0.9, groups)[g] + rng.normal(0, 0.7, n)
    layout = RandomEffectsLayout.contiguous([("g", 1, groups)])
    Z = sp.csr_matrix((np.ones(n), (np.arange(n), g)), shape=(n, groups))
    return Model([ResponseBlock("y", Family.normal(), y, np.column_stack([np.ones(n), x]), Z)], layout), x, g


@pytest.fixture(scope="module")
def normal_fit():
    model = normal_joint()
    return model, fit(model, None, FitConfig(em_tol=1e-9))


def test_config_rejects_bad_schedules():
    with pytest.raises(ValueError):
        FitConfig(tier_schedule=(Tier.FULL_FE, Tier.FIRST_ORDER))
    with pytest.raises(ValueError):
        FitConfig(tier_schedule=())
    assert FitConfig(tier_schedule=("first-order", "fe")).tier_schedule == (Tier.FIRST_ORDER, Tier.FULL_FE)


def test_relative_change_floor():
    assert relative_change(np.array([1e-9]), np.array([0.0])) == pytest.approx(0.1)
    assert relative_change(np.zeros(0), np.zeros(0)) == 0.0


def test_laplace_value_exact_for_normal_model():
    model = normal_joint(2)
    params = model.default_params()
    mode = find_mode(model, params)
    assert approx_loglik(model, params, mode) == pytest.approx(dense_normal_marginal(model, params), abs=1e-8)


def test_normal_fit_is_stationary_point_of_exact_likelihood(normal_fit):
    model, res = normal_fit
    assert res.converged
    psi = res.params.flatten()
    g = fd_check(lambda x: dense_normal_marginal(model, res.params.unflatten(x)), psi, 1e-6).ravel()
    assert np.max(np.abs(g)) < 1e-3
    assert res.loglik_approx == pytest.approx(dense_normal_marginal(model, res.params), abs=1e-8)


def test_normal_fit_is_em_fixed_point(normal_fit):
    model, res = normal_fit
    est = e_step(model, res.params, Tier.FULL_FE, alpha=1e-20)
    again = m_step(model, res.params, est)
    assert relative_change(again.flatten(), res.params.flatten()) < 1e-7


def test_tiers_coincide_for_normal_model(normal_fit):
    _, res = normal_fit
    fo = res.stage(Tier.FIRST_ORDER).params.flatten()
    assert np.allclose(res.params.flatten(), fo, rtol=1e-7, atol=1e-9)
    assert res.iterations["fe"] == 1


def test_normal_standard_errors_match_exact_information(normal_fit):
    model, res = normal_fit
    psi = res.params.flatten()
    H = fd_check(lambda x: fd_check(lambda z: dense_normal_marginal(model, res.params.unflatten(z)), x, 1e-4).ravel(), psi, 1e-4)
    ref = np.sqrt(np.diag(np.linalg.inv(-0.5 * (H + H.T))))
    se = standard_errors(model, res.params, Tier.FULL_FE, b_init=res.mode.b_hat)
    assert np.allclose(se, ref, rtol=1e-3)


def test_score_vanishes_at_normal_fit(normal_fit):
    model, res = normal_fit
    s, _ = observed_score(model, res.params, Tier.FIRST_ORDER)
    g = fd_check(lambda x: dense_normal_marginal(model, res.params.unflatten(x)), res.params.flatten(), 1e-6).ravel()
    assert np.allclose(s, g, atol=1e-4)


def test_random_intercept_matches_statsmodels():
    sm = pytest.importorskip("statsmodels.formula.api")
    import pandas as pd

    model, x, g = random_intercept()
    res = fit(model, None, FitConfig(tier_schedule=(Tier.FIRST_ORDER,), em_tol=1e-10))
    df = pd.DataFrame({"y": model.blocks[0].y, "x": x, "g": g})
    ref = sm.mixedlm("y ~ x", df, groups=df["g"]).fit(reml=False, method="lbfgs")
    assert np.allclose(res.params.betas["y"], ref.fe_params.values, atol=1e-5)
    assert res.params.gammas[0][0, 0] == pytest.approx(float(ref.cov_re.iloc[0, 0]), rel=1e-4)
    assert res.params.r["y"].sigma2 == pytest.approx(ref.scale, rel=1e-4)
    assert res.loglik_approx == pytest.approx(ref.llf, abs=1e-5)
    se = standard_errors(model, res.params, Tier.FIRST_ORDER, b_init=res.mode.b_hat)
    assert np.allclose(se[:2], ref.bse_fe.values, rtol=1e-3)


def test_probit_fit_standard_errors_against_quadrature():
    model = league()
    res = fit(model, None, FitConfig(em_tol=1e-8))
    assert [s.tier for s in res.stages] == [Tier.FIRST_ORDER, Tier.FE_MEAN, Tier.FULL_FE]
    spec = QuadratureSpec(21)

    def ll(x):
        return quad_marginal_loglik(model, res.params.unflatten(x), spec)

    psi = res.params.flatten()
    H = fd_check(lambda x: fd_check(ll, x, 1e-3).ravel(), psi, 1e-3)
    ref = np.sqrt(np.diag(np.linalg.inv(-0.5 * (H + H.T))))
    se = standard_errors(model, res.params, Tier.FULL_FE, b_init=res.mode.b_hat)
    assert np.allclose(se, ref, rtol=1e-2)
    # the fully exponential fit sits closer to the quadrature score root than the first-order fit
    g_fe = fd_check(ll, psi, 1e-4).ravel()
    g_fo = fd_check(ll, res.stage(Tier.FIRST_ORDER).params.flatten(), 1e-4).ravel()
    assert np.linalg.norm(g_fe) < np.linalg.norm(g_fo)


def test_trace_records_and_callback():
    model = normal_joint(1, M=6, n1=30, n2=25)
    seen = []
    res = fit(model, None, FitConfig(tier_schedule=(Tier.FIRST_ORDER,), em_tol=1e-5), callback=seen.append)
    assert len(seen) == len(res.trace) == res.iterations["first-order"]
    with pytest.raises(KeyError):
        res.stage(Tier.FULL_FE)
    for key in ("stage", "iteration", "loglik_approx", "max_rel_change", "nr_iters", "seconds"):
        assert key in seen[0]
    lls = [r["loglik_approx"] for r in res.trace]
    assert all(b >= a - 1e-8 for a, b in zip(lls, lls[1:]))


def test_nonconvergence_carries_partial_result():
    model = normal_joint()
    with pytest.raises(NonConvergenceError) as exc:
        fit(model, None, FitConfig(max_em_iters=3, em_tol=1e-12))
    partial = exc.value.last
    assert partial.converged is False
    assert partial.iterations["first-order"] == 3


def test_ar1_refuses_full_tier_and_fits_lower_tiers():
    rng = np.random.default_rng(0)
    K, T = 10, 6
    n = K * T
    g = np.repeat(np.arange(K), T)
    layout = RandomEffectsLayout.contiguous([("g", 1, K)])
    Z = sp.csr_matrix((np.ones(n), (np.arange(n), g)), shape=(n, K))
    y = 1.0 + rng.normal(0, 1.0, K)[g] + rng.normal(0, 0.5, n)
    model = Model([ResponseBlock("y", Family.normal(), y, np.ones((n, 1)), Z, RKind.AR1, (T,) * K)], layout)
    with pytest.raises(TierRefusedError):
        fit(model)
    init = ParameterSet({"y": np.zeros(1)}, [np.eye(1)], {"y": RStructure(RKind.AR1, 1.0, 0.0)})
    res = fit(model, init, FitConfig(tier_schedule=(Tier.FIRST_ORDER, Tier.FE_MEAN), em_tol=1e-7))
    assert res.loglik_approx == pytest.approx(dense_normal_marginal(model, res.params), abs=1e-6)
    psi = res.params.flatten()
    grad = fd_check(lambda x: dense_normal_marginal(model, res.params.unflatten(x)), psi, 1e-6).ravel()
    assert np.max(np.abs(grad)) < 1e-2
