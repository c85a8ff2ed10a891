"""Joint multiresponse GLMM data model.

All random-effects design matrices share one global coordinate system:
every ``Z`` has ``m`` columns, one per entry of the stacked effect vector
``b``, with zeros outside the block's own effects. The layout groups the
coordinates into U groups of M_u members with V_u correlated components
each, which makes ``G`` block diagonal with M_u copies of each Gamma_u.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DomainError, NotPositiveDefiniteError, ValidationError
from .families import Family
from .sparse import GramPattern, as_csr


class RKind(str, enum.Enum):
    NONE = "none"
    IDENTITY = "identity"
    AR1 = "ar1"


@dataclass(frozen=True)
class RStructure:
    """Residual covariance of one normal block: sigma2*I or AR(1)."""

    kind: RKind
    sigma2: float = 1.0
    rho: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", RKind(self.kind))
        if self.kind is not RKind.NONE and not self.sigma2 > 0:
            raise DomainError(f"residual variance must be positive, got {self.sigma2}")
        if not abs(self.rho) < 1:
            raise DomainError(f"AR(1) correlation must lie in (-1, 1), got {self.rho}")

    def precision(self, series):
        """R^{-1} as a sparse matrix; AR(1) inverses are tridiagonal."""
        n = int(sum(series))
        if self.kind is RKind.IDENTITY:
            return sp.identity(n, format="csr") / self.sigma2
        scale = 1.0 / (self.sigma2 * (1.0 - self.rho**2))
        diag, off = _ar1_bands(series, self.rho)
        return sp.diags([off, diag, off], [-1, 0, 1], format="csr") * scale

    def precision_drho(self, series):
        """Derivative of R^{-1} with respect to rho (equals -R^-1 dR/drho R^-1)."""
        rho, s2 = self.rho, self.sigma2
        diag, off = _ar1_bands(series, rho)
        ddiag, doff = _ar1_band_derivs(series, rho)
        a = 1.0 / (s2 * (1.0 - rho**2))
        da = 2.0 * rho / (s2 * (1.0 - rho**2) ** 2)
        return sp.diags([da * off + a * doff, da * diag + a * ddiag, da * off + a * doff], [-1, 0, 1], format="csr")

    def logdet(self, series):
        series = np.asarray(series)
        n = series.sum()
        out = n * np.log(self.sigma2)
        if self.kind is RKind.AR1:
            out += np.sum(np.maximum(series - 1, 0)) * np.log(1.0 - self.rho**2)
        return float(out)

    def dense(self, series):
        blocks = []
        for t in series:
            lag = np.abs(np.subtract.outer(np.arange(t), np.arange(t)))
            blocks.append(self.sigma2 * (self.rho**lag if self.kind is RKind.AR1 else np.eye(t)))
        return sla.block_diag(*blocks) if blocks else np.zeros((0, 0))


def _ar1_bands(series, rho):
    diag, off = [], []
    for t in series:
        if t == 1:
            diag.append(np.array([1.0 - rho**2]))
        elif t > 1:
            d = np.full(t, 1.0 + rho**2)
            d[0] = d[-1] = 1.0
            diag.append(d)
        off.append(np.full(max(t - 1, 0), -rho))
        off.append(np.zeros(1))
    diag = np.concatenate(diag) if diag else np.zeros(0)
    off = np.concatenate(off)[:-1] if off else np.zeros(0)
    return diag, off


def _ar1_band_derivs(series, rho):
    diag, off = [], []
    for t in series:
        if t == 1:
            diag.append(np.array([-2.0 * rho]))
        elif t > 1:
            d = np.full(t, 2.0 * rho)
            d[0] = d[-1] = 0.0
            diag.append(d)
        off.append(np.full(max(t - 1, 0), -1.0))
        off.append(np.zeros(1))
    diag = np.concatenate(diag) if diag else np.zeros(0)
    off = np.concatenate(off)[:-1] if off else np.zeros(0)
    return diag, off


def ar1_trace_identity(n, rho):
    """tr(R^-1 dR/drho) for one complete AR(1) series of length n."""
    return -2.0 * rho * (n - 1) / (1.0 - rho**2)


@dataclass(eq=False)
class ResponseBlock:
    label: str
    family: Family
    y: np.ndarray
    X: np.ndarray
    Z: sp.csr_matrix
    r_kind: RKind = RKind.NONE
    series: tuple = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.y.size
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(n, -1) if n else X.reshape(0, X.size)
        self.X = X
        self.Z = as_csr(self.Z)
        self.r_kind = RKind(self.r_kind)
        if self.family.is_normal and self.r_kind is RKind.NONE:
            self.r_kind = RKind.IDENTITY
        if self.series is None:
            self.series = (n,) if n else ()
        self.series = tuple(int(t) for t in self.series)

    @property
    def n(self):
        return self.y.size

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def is_normal(self):
        return self.family.is_normal

    def effect_columns(self):
        return np.unique(self.Z.indices)


@dataclass(frozen=True)
class EffectGroup:
    """One group u: ``index[j, v]`` is the coordinate of component v of member j."""

    name: str
    index: np.ndarray
    components: tuple = ()
    levels: tuple = ()

    @property
    def V(self):
        return self.index.shape[1]

    @property
    def M(self):
        return self.index.shape[0]


class RandomEffectsLayout:
    def __init__(self, groups, m=None):
        self.groups = tuple(groups)
        total = sum(g.index.size for g in self.groups)
        self.m = total if m is None else int(m)

    @classmethod
    def contiguous(cls, specs):
        """Build a layout with each member's V components stored adjacently.

        ``specs`` is a sequence of ``(name, V, M)`` or
        ``(name, components, levels)`` tuples.
        """
        groups, start = [], 0
        for name, a, b in specs:
            components = tuple(a) if not isinstance(a, (int, np.integer)) else tuple(f"c{v}" for v in range(a))
            levels = tuple(b) if not isinstance(b, (int, np.integer)) else tuple(str(j) for j in range(b))
            V, M = len(components), len(levels)
            idx = start + np.arange(V * M).reshape(M, V)
            groups.append(EffectGroup(name, idx, components, levels))
            start += V * M
        return cls(groups)

    def group(self, name):
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def coordinate(self, group, level, component):
        g = self.group(group)
        return int(g.index[g.levels.index(level), g.components.index(component)])

    def diagnostics(self):
        diags = []
        flat = np.concatenate([g.index.ravel() for g in self.groups]) if self.groups else np.zeros(0, int)
        if flat.size != self.m or not np.array_equal(np.sort(flat), np.arange(self.m)):
            diags.append(_diag("layout_partition", None, "member index map does not partition 0..m-1"))
        return diags


def _diag(code, block, message, level="error"):
    return {"code": code, "block": block, "message": message, "level": level}


@dataclass
class GMatrix:
    gammas: list
    layout: RandomEffectsLayout


def _chol(gamma, name):
    try:
        return np.linalg.cholesky(gamma)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"Gamma for group '{name}' is not positive definite", group=name) from None


def expand_G(g):
    """Block-diagonal G as a sparse matrix in global coordinates."""
    rows, cols, vals = [], [], []
    for grp, gamma in zip(g.layout.groups, g.gammas):
        idx = grp.index
        V = grp.V
        a, c = np.meshgrid(np.arange(V), np.arange(V), indexing="ij")
        rows.append(idx[:, a.ravel()].ravel())
        cols.append(idx[:, c.ravel()].ravel())
        vals.append(np.tile(np.asarray(gamma, float)[a.ravel(), c.ravel()], grp.M))
    m = g.layout.m
    if not rows:
        return sp.csr_matrix((m, m))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))


def invert_G_blockwise(g):
    """Return (G^{-1} sparse, log|G|) using one V_u x V_u factorisation per group."""
    inv_gammas, logdet = [], 0.0
    for grp, gamma in zip(g.layout.groups, g.gammas):
        L = _chol(np.asarray(gamma, float), grp.name)
        Linv = sla.solve_triangular(L, np.eye(grp.V), lower=True)
        inv_gammas.append(Linv.T @ Linv)
        logdet += grp.M * 2.0 * np.sum(np.log(np.diag(L)))
    return expand_G(GMatrix(inv_gammas, g.layout)), float(logdet)


@dataclass
class ParameterSet:
    """All free parameters; flattening order is betas, Gamma upper triangles, R."""

    betas: dict
    gammas: list
    r: dict = field(default_factory=dict)

    def copy(self):
        return ParameterSet(
            {k: np.array(v, dtype=float) for k, v in self.betas.items()},
            [np.array(g, dtype=float) for g in self.gammas],
            dict(self.r),
        )

    def g_matrix(self, layout):
        return GMatrix(self.gammas, layout)

    def index_map(self):
        names = []
        for label, beta in self.betas.items():
            names += [f"beta[{label}][{j}]" for j in range(np.size(beta))]
        for u, gamma in enumerate(self.gammas):
            a, c = np.triu_indices(np.shape(gamma)[0])
            names += [f"gamma[{u}][{i},{j}]" for i, j in zip(a, c)]
        for label, r in self.r.items():
            names.append(f"sigma2[{label}]")
            if r.kind is RKind.AR1:
                names.append(f"rho[{label}]")
        return names

    def flatten(self):
        parts = [np.asarray(b, float).ravel() for b in self.betas.values()]
        for gamma in self.gammas:
            gamma = np.asarray(gamma, float)
            parts.append(gamma[np.triu_indices(gamma.shape[0])])
        for r in self.r.values():
            parts.append(np.array([r.sigma2, r.rho] if r.kind is RKind.AR1 else [r.sigma2]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, vec):
        vec = np.asarray(vec, dtype=float)
        pos = 0
        betas = {}
        for label, beta in self.betas.items():
            k = np.size(beta)
            betas[label] = vec[pos:pos + k].copy()
            pos += k
        gammas = []
        for gamma in self.gammas:
            V = np.shape(gamma)[0]
            a, c = np.triu_indices(V)
            new = np.zeros((V, V))
            new[a, c] = vec[pos:pos + a.size]
            new[c, a] = vec[pos:pos + a.size]
            gammas.append(new)
            pos += a.size
        r = {}
        for label, old in self.r.items():
            if old.kind is RKind.AR1:
                r[label] = RStructure(old.kind, vec[pos], vec[pos + 1])
                pos += 2
            else:
                r[label] = RStructure(old.kind, vec[pos])
                pos += 1
        if pos != vec.size:
            raise ValueError(f"parameter vector has length {vec.size}, expected {pos}")
        return ParameterSet(betas, gammas, r)


def linear_predictor(block, beta, b):
    beta = np.asarray(beta, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if beta.size != block.p:
        raise ValueError(f"block '{block.label}': beta has length {beta.size}, X has {block.p} columns")
    if b.size != block.Z.shape[1]:
        raise ValueError(f"block '{block.label}': b has length {b.size}, Z has {block.Z.shape[1]} columns")
    if block.n == 0:
        return np.zeros(0)
    return block.X @ beta + block.Z @ b


def validate_model(blocks, layout, params=None):
    """Check every structural invariant; returns a list of diagnostic dicts."""
    diags = list(layout.diagnostics())
    m = layout.m
    owner = {}
    labels = set()
    for block in blocks:
        lab = block.label
        if lab in labels:
            diags.append(_diag("duplicate_label", lab, f"block label '{lab}' used twice"))
        labels.add(lab)
        n = block.n
        if block.X.shape[0] != n:
            diags.append(_diag("x_row_mismatch", lab, f"X has {block.X.shape[0]} rows, y has {n}"))
        if block.Z.shape[0] != n:
            diags.append(_diag("z_row_mismatch", lab, f"Z has {block.Z.shape[0]} rows, y has {n}"))
        if block.Z.shape[1] != m:
            diags.append(_diag("z_column_mismatch", lab, f"Z column mismatch: {block.Z.shape[1]} columns, layout has m={m}"))
        if block.p and n and np.linalg.matrix_rank(block.X) < block.p:
            diags.append(_diag("x_rank_deficient", lab, f"X for block '{lab}' is not of full column rank"))
        try:
            block.family.validate_y(block.y)
        except DomainError as exc:
            diags.append(_diag("invalid_response", lab, str(exc)))
        if block.is_normal and sum(block.series) != n:
            diags.append(_diag("series_mismatch", lab, "AR(1) series lengths do not sum to n"))
        if not block.is_normal and block.r_kind is not RKind.NONE:
            diags.append(_diag("r_on_non_normal", lab, "residual structure given for a non-normal block"))
        for col in block.effect_columns():
            other = owner.setdefault(int(col), lab)
            if other != lab:
                diags.append(_diag("shared_effect_columns", lab, f"effect column {col} used by blocks '{other}' and '{lab}'"))
                break
    if params is not None:
        if len(params.gammas) != len(layout.groups):
            diags.append(_diag("gamma_count", None, f"{len(params.gammas)} Gamma matrices for {len(layout.groups)} groups"))
        for grp, gamma in zip(layout.groups, params.gammas):
            gamma = np.asarray(gamma, float)
            if gamma.shape != (grp.V, grp.V):
                diags.append(_diag("gamma_shape", grp.name, f"Gamma shape {gamma.shape}, expected {(grp.V, grp.V)}"))
                continue
            if not np.allclose(gamma, gamma.T):
                diags.append(_diag("gamma_asymmetric", grp.name, "Gamma is not symmetric"))
            try:
                np.linalg.cholesky(gamma)
            except np.linalg.LinAlgError:
                diags.append(_diag("gamma_not_pd", grp.name, f"Gamma for group '{grp.name}' is not positive definite"))
        for block in blocks:
            beta = params.betas.get(block.label)
            if beta is None or np.size(beta) != block.p:
                diags.append(_diag("beta_shape", block.label, "missing or mis-sized fixed effects"))
            if block.is_normal:
                r = params.r.get(block.label)
                if r is None or r.kind is not block.r_kind:
                    diags.append(_diag("r_params", block.label, "missing or mismatched residual parameters"))
    return diags


class Model:
    """Validated, immutable bundle of response blocks and layout with cached sparse structure."""

    def __init__(self, blocks, layout, validate=True):
        self.blocks = tuple(blocks)
        self.layout = layout
        self.m = layout.m
        if validate:
            errors = [d for d in validate_model(self.blocks, layout) if d["level"] == "error"]
            if errors:
                raise ValidationError("; ".join(d["message"] for d in errors), errors)
        self.normal_blocks = tuple(b for b in self.blocks if b.is_normal)
        self.glm_blocks = tuple(b for b in self.blocks if not b.is_normal)
        self.has_ar1 = any(b.r_kind is RKind.AR1 for b in self.normal_blocks)
        # stacked rows of every non-normal block; FE corrections live here
        self.glm_slices = {}
        start = 0
        for b in self.glm_blocks:
            self.glm_slices[b.label] = slice(start, start + b.n)
            start += b.n
        self.n_glm = start
        if self.glm_blocks:
            self.Z_glm = sp.vstack([b.Z for b in self.glm_blocks], format="csr")
        else:
            self.Z_glm = sp.csr_matrix((0, self.m))
        self.gram_glm = GramPattern(self.Z_glm)
        self.normal_gram = {b.label: GramPattern(b.Z) for b in self.normal_blocks}
        self.ZtZ = {b.label: (b.Z.T @ b.Z).tocsr() for b in self.normal_blocks}

    def block(self, label):
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def default_params(self, gamma_scale=0.1):
        """Family-specific analytic intercept starts, Gamma = 0.1 I, sigma2 = var(y), rho = 0."""
        from scipy.special import ndtri

        betas, r = {}, {}
        for b in self.blocks:
            beta = np.zeros(b.p)
            if b.p and b.n:
                ybar = float(np.mean(b.y))
                if b.family.kind.value == "poisson":
                    target = np.log(max(ybar, 1e-3))
                elif b.family.kind.value == "binary":
                    target = float(ndtri(np.clip(ybar, 1e-3, 1 - 1e-3)))
                else:
                    target = ybar
                coef, *_ = np.linalg.lstsq(b.X, np.full(b.n, target), rcond=None)
                beta = coef
            betas[b.label] = beta
            if b.is_normal:
                var = float(np.var(b.y)) if b.n > 1 else 1.0
                r[b.label] = RStructure(b.r_kind, var if var > 0 else 1.0, 0.0)
        gammas = [gamma_scale * np.eye(g.V) for g in self.layout.groups]
        return ParameterSet(betas, gammas, r)
