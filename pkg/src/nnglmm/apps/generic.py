"""Generic model specification: a JSON config, per-response CSV data and
JSON-lines random-effect edge lists.

Config layout::

    {
      "groups": [{"name": "student", "components": ["g", "m"], "levels": ["s1", "s2"]}],
      "responses": [
        {"label": "grade", "family": "normal", "data": "grade.csv", "y": "y",
         "x": ["intercept", "age"], "z": "grade_z.jsonl",
         "residual": "identity" | "ar1", "series": "subject"}
      ],
      "fit": {"tiers": ["first-order", "fe-mean", "fe"], "em_tol": 1e-6, "max_em_iters": 10000}
    }

Each line of an edge-list file is the list of effects loaded by one
observation: ``[{"effect_id": "student/s1/g", "weight": 1.0}, ...]``.
An ``effect_id`` is ``group/level/component``. Paths are relative to the
config file. ``levels`` may be omitted, in which case they are collected
from the edge lists in order of first appearance.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np
import scipy.sparse as sp

from ..errors import ValidationError
from ..families import Family
from ..model import Model, RandomEffectsLayout, RKind, ResponseBlock

INTERCEPT = "intercept"


def _err(msg, path=None, line=None):
    where = ""
    if path is not None:
        where = f"{path}" + (f":{line}" if line is not None else "") + ": "
    raise ValidationError(where + msg, [{"code": "config", "block": None, "message": where + msg, "level": "error",
                                         "path": path, "line": line}])


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        _err("file not found", path)
    except json.JSONDecodeError as exc:
        _err(f"invalid JSON: {exc.msg}", path, exc.lineno)


def read_table(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        _err("data file not found", path)
    if not rows:
        _err("empty data file", path)
    header = [h.strip() for h in rows[0]]
    data = rows[1:]
    for i, r in enumerate(data, start=2):
        if len(r) != len(header):
            _err(f"expected {len(header)} fields, got {len(r)}", path, i)
    return header, data


def _column(header, data, name, path):
    if name not in header:
        _err(f"missing column '{name}'", path, 1)
    j = header.index(name)
    out = np.empty(len(data))
    for i, r in enumerate(data):
        try:
            out[i] = float(r[j])
        except ValueError:
            _err(f"column '{name}' value '{r[j]}' is not numeric", path, i + 2)
    return out


def read_edges(path):
    """List (one per observation) of [(group, level, component, weight), ...]."""
    out = []
    try:
        fh = open(path)
    except FileNotFoundError:
        _err("edge-list file not found", path)
    with fh:
        for ln, text in enumerate(fh, start=1):
            text = text.strip()
            if not text:
                continue
            try:
                items = json.loads(text)
            except json.JSONDecodeError as exc:
                _err(f"invalid JSON: {exc.msg}", path, ln)
            if not isinstance(items, list):
                _err("each line must be a JSON list of edges", path, ln)
            row = []
            for it in items:
                try:
                    eid, w = it["effect_id"], float(it["weight"])
                except (KeyError, TypeError, ValueError):
                    _err("edges need 'effect_id' and numeric 'weight'", path, ln)
                parts = str(eid).split("/")
                if len(parts) < 3:
                    _err(f"effect_id '{eid}' is not group/level/component", path, ln)
                row.append((parts[0], "/".join(parts[1:-1]), parts[-1], w, ln))
            out.append(row)
    return out


def _family(spec, path):
    name = str(spec).lower()
    if name in ("poisson", "poisson-log"):
        return Family.poisson()
    if name in ("binary", "probit", "binary-probit"):
        return Family.binary()
    if name in ("normal", "gaussian"):
        return Family.normal()
    _err(f"unknown family '{spec}'", path)


def load_model(config_path):
    """Return (model, fit_options) from a config file."""
    cfg = load_json(config_path)
    base = os.path.dirname(os.path.abspath(config_path))
    if not isinstance(cfg, dict) or "groups" not in cfg or "responses" not in cfg:
        _err("config needs 'groups' and 'responses'", config_path)
    responses = []
    for spec in cfg["responses"]:
        for key in ("label", "family", "data", "y", "z"):
            if key not in spec:
                _err(f"response is missing '{key}'", config_path)
        data_path = os.path.join(base, spec["data"])
        header, data = read_table(data_path)
        edges = read_edges(os.path.join(base, spec["z"]))
        if len(edges) != len(data):
            _err(f"edge list has {len(edges)} observations, data has {len(data)}", os.path.join(base, spec["z"]))
        responses.append((spec, data_path, header, data, edges))
    # layout
    group_specs = []
    seen_levels = {g["name"]: [] for g in cfg["groups"]}
    for *_, edges in responses:
        for row in edges:
            for grp, level, comp, _, ln in row:
                if grp not in seen_levels:
                    _err(f"unknown group '{grp}'", config_path, None)
                if level not in seen_levels[grp]:
                    seen_levels[grp].append(level)
    for g in cfg["groups"]:
        if "name" not in g or "components" not in g:
            _err("group needs 'name' and 'components'", config_path)
        levels = g.get("levels") or seen_levels[g["name"]]
        if not levels:
            _err(f"group '{g['name']}' has no levels", config_path)
        group_specs.append((g["name"], tuple(g["components"]), tuple(str(v) for v in levels)))
    layout = RandomEffectsLayout.contiguous(group_specs)
    blocks = []
    for spec, data_path, header, data, edges in responses:
        n = len(data)
        family = _family(spec["family"], config_path)
        y = _column(header, data, spec["y"], data_path)
        cols = []
        for name in spec.get("x", []):
            cols.append(np.ones(n) if name == INTERCEPT else _column(header, data, name, data_path))
        X = np.column_stack(cols) if cols else np.zeros((n, 0))
        zr, zc, zv = [], [], []
        z_path = os.path.join(base, spec["z"])
        for i, row in enumerate(edges):
            for grp, level, comp, w, ln in row:
                g = layout.group(grp)
                if level not in g.levels:
                    _err(f"unknown level '{level}' for group '{grp}'", z_path, ln)
                if comp not in g.components:
                    _err(f"unknown component '{comp}' for group '{grp}'", z_path, ln)
                zr.append(i)
                zc.append(layout.coordinate(grp, level, comp))
                zv.append(w)
        Z = sp.csr_matrix((zv, (zr, zc)), shape=(n, layout.m))
        r_kind = RKind.NONE
        series = None
        if family.is_normal:
            r_kind = RKind(spec.get("residual", "identity"))
            if r_kind is RKind.AR1 and "series" in spec:
                if spec["series"] not in header:
                    _err(f"missing column '{spec['series']}'", data_path, 1)
                sid = [r[header.index(spec["series"])] for r in data]
                series, seen = [], set()
                for i, s in enumerate(sid):
                    if i and s == sid[i - 1]:
                        series[-1] += 1
                        continue
                    if s in seen:
                        _err(f"series '{s}' rows are not contiguous", data_path, i + 2)
                    seen.add(s)
                    series.append(1)
        blocks.append(ResponseBlock(spec["label"], family, y, X, Z, r_kind, series))
    return Model(blocks, layout), dict(cfg.get("fit", {}))


def write_model(model, directory, fit_options=None):
    """Serialise a model into the config/CSV/JSONL format; returns the config path."""
    os.makedirs(directory, exist_ok=True)
    groups = [{"name": g.name, "components": list(g.components), "levels": list(g.levels)} for g in model.layout.groups]
    coord = {}
    for g in model.layout.groups:
        for j, lev in enumerate(g.levels):
            for v, comp in enumerate(g.components):
                coord[int(g.index[j, v])] = f"{g.name}/{lev}/{comp}"
    responses = []
    for block in model.blocks:
        data_name = f"{block.label}.csv"
        z_name = f"{block.label}_z.jsonl"
        xnames = [f"x{j}" for j in range(block.p)]
        with open(os.path.join(directory, data_name), "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["y"] + xnames + (["series"] if block.r_kind is RKind.AR1 else [])
            w.writerow(header)
            sid = np.repeat(np.arange(len(block.series)), block.series) if block.r_kind is RKind.AR1 else None
            for i in range(block.n):
                row = [repr(float(block.y[i]))] + [repr(float(v)) for v in block.X[i]]
                if sid is not None:
                    row.append(int(sid[i]))
                w.writerow(row)
        Z = block.Z.tocsr()
        with open(os.path.join(directory, z_name), "w") as fh:
            for i in range(block.n):
                lo, hi = Z.indptr[i], Z.indptr[i + 1]
                edges = [{"effect_id": coord[int(c)], "weight": float(v)} for c, v in zip(Z.indices[lo:hi], Z.data[lo:hi])]
                fh.write(json.dumps(edges) + "\n")
        spec = {"label": block.label, "family": block.family.kind.value, "data": data_name, "y": "y", "x": xnames, "z": z_name}
        if block.is_normal:
            spec["residual"] = block.r_kind.value
            if block.r_kind is RKind.AR1:
                spec["series"] = "series"
        responses.append(spec)
    cfg = {"groups": groups, "responses": responses}
    if fit_options:
        cfg["fit"] = fit_options
    path = os.path.join(directory, "model.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return path
