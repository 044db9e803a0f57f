"""JSON documents for models, statistics, parameters and configs; triplet text files.

Matrices are stored as nested row-major lists.  Every loader validates
through the owning type's constructor, so a file that round-trips is
guaranteed to satisfy the same invariants as an object built in memory.
"""

import json
from pathlib import Path

import numpy as np

from .hmm import HmmModel, TripletDataset
from .mestimator import FitConfig
from .moments import ObservableStats
from .spectral import ParamTriplet

__all__ = [
    "model_to_dict",
    "model_from_dict",
    "stats_to_dict",
    "stats_from_dict",
    "params_to_dict",
    "params_from_dict",
    "save_json",
    "load_json",
    "save_model",
    "load_model",
    "save_stats",
    "load_stats",
    "save_params",
    "load_params",
    "save_config",
    "load_config",
    "write_triplets",
    "read_triplets",
]


def _matrix(doc, key, shape):
    arr = np.asarray(doc[key], dtype=float)
    if arr.shape != shape:
        raise ValueError(f"field {key!r} has shape {arr.shape}, expected {shape}")
    return arr


def _require(doc, keys, kind):
    missing = [k for k in keys if k not in doc]
    if missing:
        raise ValueError(f"{kind} document is missing {', '.join(missing)}")


def model_to_dict(model):
    return {
        "kind": "hmm",
        "n_obs": model.n_obs,
        "n_hidden": model.n_hidden,
        "transition": model.transition.tolist(),
        "observation": model.observation.tolist(),
        "initial": model.initial.tolist(),
    }


def model_from_dict(doc):
    _require(doc, ("n_obs", "n_hidden", "transition", "observation", "initial"), "model")
    n, m = int(doc["n_obs"]), int(doc["n_hidden"])
    return HmmModel(
        _matrix(doc, "transition", (m, m)),
        _matrix(doc, "observation", (n, m)),
        _matrix(doc, "initial", (m,)),
    )


def stats_to_dict(stats):
    return {
        "kind": "stats",
        "n_obs": stats.n_obs,
        "sample_count": stats.sample_count,
        "p1": stats.p1.tolist(),
        "p21": stats.p21.tolist(),
        "p3": stats.p3.tolist(),
    }


def stats_from_dict(doc):
    _require(doc, ("n_obs", "p1", "p21", "p3"), "statistics")
    n = int(doc["n_obs"])
    return ObservableStats(
        _matrix(doc, "p1", (n,)),
        _matrix(doc, "p21", (n, n)),
        _matrix(doc, "p3", (n, n, n)),
        sample_count=int(doc.get("sample_count", 0)),
    )


def params_to_dict(params):
    doc = {
        "kind": "params",
        "dim": params.dim,
        "n_obs": params.n_obs,
        "b1": params.b1.tolist(),
        "b_inf": params.b_inf.tolist(),
        "b_ops": params.b_ops.tolist(),
    }
    if params.projection is not None:
        doc["projection"] = params.projection.tolist()
    return doc


def params_from_dict(doc):
    _require(doc, ("dim", "n_obs", "b1", "b_inf", "b_ops"), "parameter")
    d, n = int(doc["dim"]), int(doc["n_obs"])
    proj = doc.get("projection")
    return ParamTriplet(
        _matrix(doc, "b1", (d,)),
        _matrix(doc, "b_inf", (d,)),
        _matrix(doc, "b_ops", (n, d, d)),
        projection=None if proj is None else _matrix(doc, "projection", (n, d)),
    )


def save_json(doc, path):
    """Write ``doc`` with sorted keys so identical content gives identical bytes."""
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc


def save_model(model, path):
    save_json(model_to_dict(model), path)


def load_model(path):
    return model_from_dict(load_json(path))


def save_stats(stats, path):
    save_json(stats_to_dict(stats), path)


def load_stats(path):
    return stats_from_dict(load_json(path))


def save_params(params, path):
    save_json(params_to_dict(params), path)


def load_params(path):
    return params_from_dict(load_json(path))


def save_config(config, path):
    save_json(config.to_dict(), path)


def load_config(path):
    """Read a FitConfig; absent keys take defaults and unknown keys are rejected."""
    return FitConfig.from_dict(load_json(path))


def write_triplets(data, path):
    """One ``x1 x2 x3`` line per triplet."""
    lines = (" ".join(str(int(v)) for v in row) for row in data.triplets)
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_triplets(path, n_obs=None):
    """Parse a triplet file.  ``n_obs`` defaults to one more than the largest symbol."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected three integers, got {len(parts)} fields")
        try:
            rows.append([int(p) for p in parts])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-integer symbol") from exc
    if not rows:
        raise ValueError(f"{path}: no triplets")
    trip = np.array(rows, dtype=np.int64)
    if n_obs is None:
        n_obs = int(trip.max()) + 1
    return TripletDataset(trip, n_obs)
