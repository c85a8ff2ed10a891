import logging

import numpy as np
import pytest
import scipy.sparse as sp

from nnglmm.families import Family
from nnglmm.model import Model, ParameterSet, RandomEffectsLayout, ResponseBlock, RKind, RStructure


@pytest.fixture(autouse=True)
def _quiet_em_warnings():
    logging.getLogger("nnglmm").setLevel(logging.ERROR)
    yield


def random_glmm(seed=0, n_pois=12, n_bin=10, with_normal=False):
    """Small Poisson + probit (+ optional normal) model with a 1x1 and a 2x2 group."""
    rng = np.random.default_rng(seed)
    layout = RandomEffectsLayout.contiguous([("g", 1, 2), ("h", 2, 1)])
    m = layout.m
    Z1 = sp.csr_matrix(rng.integers(-1, 2, size=(n_pois, m)).astype(float))
    Z2 = sp.csr_matrix(rng.integers(0, 2, size=(n_bin, m)).astype(float))
    blocks = [
        ResponseBlock("p", Family.poisson(), rng.poisson(2, n_pois), np.ones((n_pois, 1)), Z1),
        ResponseBlock("b", Family.binary(), rng.integers(0, 2, n_bin), np.ones((n_bin, 1)), Z2),
    ]
    if with_normal:
        Z3 = sp.csr_matrix(rng.normal(size=(8, m)) * (rng.random((8, m)) < 0.5))
        blocks.append(ResponseBlock("n", Family.normal(), rng.normal(size=8), np.ones((8, 1)), Z3))
    model = Model(blocks, layout, validate=False)
    params = model.default_params(0.5)
    params.gammas[1] = np.array([[0.5, 0.2], [0.2, 0.4]])
    params.betas["p"] = np.array([0.3])
    params.betas["b"] = np.array([-0.2])
    if with_normal:
        params.r["n"] = RStructure(RKind.IDENTITY, 0.7)
    return model, params


def three_team_toy(reps=4, sigma2=0.5, beta=None):
    """Binary probit toy: 3 teams, V=1, each of 6 home/away pairings played ``reps`` times."""
    base = [(0, 1, 1), (1, 2, 1), (0, 2, 1), (1, 0, 0), (2, 1, 1), (2, 0, 0)]
    games = base * reps
    n = len(games)
    layout = RandomEffectsLayout.contiguous([("team", ("w",), ("A", "B", "C"))])
    Z = sp.csr_matrix(
        (np.tile([1.0, -1.0], n), (np.repeat(np.arange(n), 2), np.array([[h, a] for h, a, _ in games]).ravel())),
        shape=(n, 3),
    )
    y = np.array([g[2] for g in games], float)
    X = np.zeros((n, 0)) if beta is None else np.ones((n, 1))
    model = Model([ResponseBlock("win", Family.binary(), y, X, Z)], layout)
    betas = {"win": np.zeros(0) if beta is None else np.array([beta])}
    return model, ParameterSet(betas, [np.array([[sigma2]])])


def normal_joint(seed=0, M=12, n1=60, n2=50):
    """Two normal responses sharing a 2-component group (joint LMM)."""
    rng = np.random.default_rng(seed)
    layout = RandomEffectsLayout.contiguous([("g", ("a", "b"), M)])
    idx = layout.groups[0].index
    gam = np.array([[0.8, 0.3], [0.3, 0.5]])
    b = (rng.standard_normal((M, 2)) @ np.linalg.cholesky(gam).T)
    g1 = rng.integers(0, M, n1)
    g2 = rng.integers(0, M, n2)
    Z1 = sp.csr_matrix((np.ones(n1), (np.arange(n1), idx[g1, 0])), shape=(n1, layout.m))
    Z2 = sp.csr_matrix((np.ones(n2), (np.arange(n2), idx[g2, 1])), shape=(n2, layout.m))
    X1 = np.column_stack([np.ones(n1), rng.normal(size=n1)])
    X2 = np.ones((n2, 1))
    y1 = X1 @ [1.0, 0.5] + b[g1, 0] + rng.normal(0, 0.8, n1)
    y2 = 2.0 + b[g2, 1] + rng.normal(0, 0.6, n2)
    blocks = [ResponseBlock("y1", Family.normal(), y1, X1, Z1), ResponseBlock("y2", Family.normal(), y2, X2, Z2)]
    return Model(blocks, layout)
