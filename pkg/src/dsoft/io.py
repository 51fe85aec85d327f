"""JSON model files and CSV helpers.

Floats are written with ``repr`` (shortest round-tripping decimal), so a
saved model reloads bit-exactly. Files are written to a temporary sibling and
renamed into place, so readers never see partial output.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, fields

import numpy as np

from .families import get_family
from .forest import ForestModel
from .optimizer import ShrinkageConfig
from .tree import Dataset, DistModel, FitConfig, SoftTree, Standardizer

FORMAT = "dsoft-model"
FOREST_FORMAT = "dsoft-forest"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def atomic_write(path, text):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _plain(obj):
    """Recursively convert numpy scalars/arrays to JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def dumps(obj):
    return json.dumps(_plain(obj), indent=1, sort_keys=False) + "\n"


# --- config --------------------------------------------------------------------


def config_to_dict(config):
    d = asdict(config)
    return d


def config_from_dict(d):
    d = dict(d)
    shr = d.get("shrinkage")
    if isinstance(shr, dict) and "lam" in shr:
        d["shrinkage"] = ShrinkageConfig(**shr)
    elif isinstance(shr, dict):
        d["shrinkage"] = {k: ShrinkageConfig(**v) for k, v in shr.items()}
    known = {f.name for f in fields(FitConfig)}
    unknown = set(d) - known
    if unknown:
        raise ModelFormatError(f"unknown config keys: {sorted(unknown)}")
    return FitConfig(**d)


# --- single models -------------------------------------------------------------


def model_to_dict(model):
    fam = model.family
    trees = {}
    for k, t in sorted(model.trees.items()):
        nodes = []
        for j in range(t.n_nodes):
            nodes.append({
                "id": j,
                "parent": int(t.parent[j]),
                "side": t.side[j],
                "omega": [float(v) for v in t.omega[j]] if j in t.omega else None,
            })
        trees[fam.param_names[k]] = {
            "features": [int(f) for f in t.features],
            "nodes": nodes,
            "beta": [float(b) for b in t.beta],
        }
    return {
        "format": FORMAT,
        "version": VERSION,
        "family": fam.name,
        "param_names": list(fam.param_names),
        "links": [lk.kind for lk in fam.links],
        "columns": list(model.columns),
        "standardization": {
            "mean": [float(v) for v in model.standardizer.mean],
            "sd": [float(v) for v in model.standardizer.sd],
        },
        "trees": trees,
        "fixed_params": {fam.param_names[k]: float(v) for k, v in sorted(model.fixed_params.items())},
        "fit_report": model.fit_report,
        "seed": None if model.config is None else int(model.config.seed),
        "config": None if model.config is None else config_to_dict(model.config),
    }


def model_from_dict(d):
    if d.get("format") != FORMAT:
        raise ModelFormatError(f"not a {FORMAT} file")
    if d.get("version") != VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
    fam = get_family(d["family"])
    if list(d["param_names"]) != list(fam.param_names):
        raise ModelFormatError("parameter names do not match the family")
    idx = {name: k for k, name in enumerate(fam.param_names)}
    trees = {}
    for name, td in d["trees"].items():
        nodes = sorted(td["nodes"], key=lambda n: n["id"])
        if [n["id"] for n in nodes] != list(range(len(nodes))):
            raise ModelFormatError(f"tree {name}: node ids must be 0..J")
        tree = SoftTree(
            features=[int(f) for f in td["features"]],
            parent=[int(n["parent"]) for n in nodes],
            side=[n["side"] for n in nodes],
            omega={n["id"]: np.array(n["omega"], dtype=float) for n in nodes if n["omega"] is not None},
            beta=np.array(td["beta"], dtype=float),
        )
        tree.validate(len(d["columns"]))
        trees[idx[name]] = tree
    std = Standardizer(np.array(d["standardization"]["mean"], dtype=float),
                       np.array(d["standardization"]["sd"], dtype=float))
    cfg = None if d.get("config") is None else config_from_dict(d["config"])
    return DistModel(
        family=fam,
        columns=list(d["columns"]),
        standardizer=std,
        trees=trees,
        fixed_params={idx[n]: float(v) for n, v in d["fixed_params"].items()},
        fit_report=d.get("fit_report", {}),
        config=cfg,
    )


# --- forests -------------------------------------------------------------------


def forest_to_dict(forest):
    return {
        "format": FOREST_FORMAT,
        "version": VERSION,
        "n_trees": forest.n_trees,
        "bag_fraction": forest.bag_fraction,
        "seed": forest.seed,
        "subsamples": [s.tolist() for s in forest.subsamples],
        "members": [model_to_dict(m) for m in forest.members],
    }


def forest_from_dict(d):
    if d.get("format") != FOREST_FORMAT or d.get("version") != VERSION:
        raise ModelFormatError("not a supported forest file")
    members = [model_from_dict(m) for m in d["members"]]
    return ForestModel(members, float(d["bag_fraction"]), int(d["n_trees"]), int(d["seed"]),
                       [np.array(s, dtype=int) for s in d["subsamples"]])


def save(obj, path):
    d = forest_to_dict(obj) if isinstance(obj, ForestModel) else model_to_dict(obj)
    atomic_write(path, dumps(d))


def load(path):
    """Load a single model or a forest."""
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: invalid JSON ({exc})") from exc
    if d.get("format") == FOREST_FORMAT:
        return forest_from_dict(d)
    return model_from_dict(d)


# --- CSV -------------------------------------------------------------------------


def read_csv(path):
    """Comma-separated file with a header row -> (header, float matrix)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    if len(set(header)) != len(header):
        raise ValueError(f"{path}: duplicate column names")
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def read_dataset(path, response, features=None):
    header, M = read_csv(path)
    if response not in header:
        raise KeyError(f"response column {response!r} not found in {path}")
    cols = features or [h for h in header if h != response]
    missing = [c for c in cols if c not in header]
    if missing:
        raise KeyError(f"feature columns not found in {path}: {missing}")
    X = M[:, [header.index(c) for c in cols]]
    return Dataset(X, M[:, header.index(response)], cols)


def read_features(path, columns):
    header, M = read_csv(path)
    missing = [c for c in columns if c not in header]
    if missing:
        raise KeyError(f"feature columns not found in {path}: {missing}")
    return M[:, [header.index(c) for c in columns]]


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format_value(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write(path, csv_text(header, rows))
