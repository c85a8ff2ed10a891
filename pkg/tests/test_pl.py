import numpy as np
import pytest
import scipy.sparse as sp
from test_em import league, random_intercept

from nnglmm.errors import TierRefusedError
from nnglmm.families import Family
from nnglmm.model import Model, RandomEffectsLayout, ResponseBlock, RKind
from nnglmm.pl import PLConfig, _Theta, pl_fit


def test_theta_round_trip():
    layout = RandomEffectsLayout.contiguous([("g", 2, 3), ("h", 1, 2)])
    th = _Theta(layout, ["y"])
    gammas = [np.array([[0.9, 0.4], [0.4, 0.5]]), np.array([[0.3]])]
    t = th.pack(gammas, {"y": 0.7})
    assert t.size == th.size() == 5
    g2, s2 = th.unpack(t)
    assert np.allclose(g2[0], gammas[0], atol=1e-14) and np.allclose(g2[1], gammas[1])
    assert s2["y"] == pytest.approx(0.7)


def test_normal_model_reduces_to_reml():
    sm = pytest.importorskip("statsmodels.formula.api")
    import pandas as pd

    model, x, g = random_intercept(3)
    res = pl_fit(model, config=PLConfig(tol=1e-9))
    df = pd.DataFrame({"y": model.blocks[0].y, "x": x, "g": g})
    ref = sm.mixedlm("y ~ x", df, groups=df["g"]).fit(reml=True, method="lbfgs")
    assert res.params.gammas[0][0, 0] == pytest.approx(float(ref.cov_re.iloc[0, 0]), rel=1e-4)
    assert res.params.r["y"].sigma2 == pytest.approx(ref.scale, rel=1e-4)
    assert np.allclose(res.params.betas["y"], ref.fe_params.values, atol=1e-5)
    assert np.allclose(res.moments.b_tilde, np.asarray([v.iloc[0] for v in ref.random_effects.values()]), atol=1e-4)
    assert res.mode is None and res.iterations["pl"] <= 5


def test_binary_pl_is_a_fixed_point():
    model = league(1, teams=4, reps=5)
    res = pl_fit(model, config=PLConfig(tol=1e-8))
    again = pl_fit(model, res.params, PLConfig(tol=1e-8))
    assert np.allclose(again.params.flatten(), res.params.flatten(), rtol=1e-5)
    assert res.trace[-1]["max_rel_change"] < 1e-8


def test_pl_refuses_ar1():
    n = 6
    layout = RandomEffectsLayout.contiguous([("g", 1, 2)])
    Z = sp.csr_matrix((np.ones(n), (np.arange(n), np.arange(n) % 2)), shape=(n, 2))
    model = Model([ResponseBlock("y", Family.normal(), np.arange(6.0), np.ones((n, 1)), Z, RKind.AR1, (3, 3))], layout)
    with pytest.raises(TierRefusedError):
        pl_fit(model)
