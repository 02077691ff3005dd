"""CSV/JSON persistence with fixed column orders."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__

FORMAT_VERSION = 1


def data_columns(d: int) -> list:
    return [f"x{i}" for i in range(d)]


def write_samples(path, x: np.ndarray, labels=None):
    """One row per sample; the label column, when given, comes last."""
    x = np.atleast_2d(x)
    cols = data_columns(x.shape[1]) + (["label"] if labels is not None else [])
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for i, row in enumerate(x):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.append(str(int(labels[i])))
            w.writerow(vals)


def read_samples(path):
    """Returns ``(x, labels)``; ``labels`` is None when the file has no label column."""
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        rows = [row for row in r if row]
    has_label = header[-1] == "label"
    d = len(header) - int(has_label)
    if header[:d] != data_columns(d):
        raise ValueError(f"{path}: unexpected header {header}")
    x = np.array([[float(v) for v in row[:d]] for row in rows], dtype=float).reshape(-1, d)
    labels = np.array([int(row[d]) for row in rows]) if has_label else None
    return x, labels


def write_records(path, records, columns):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            row = rec if isinstance(rec, dict) else asdict(rec)
            w.writerow([_fmt(row[c]) for c in columns])


def read_records(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def manifest(command: str, config: dict, seed: int, **extra) -> dict:
    return {"command": command, "format_version": FORMAT_VERSION, "code_version": __version__,
            "seed": seed, "config": config, **extra}
