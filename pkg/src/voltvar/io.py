"""Atomic file output and the metrics CSV schema."""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from pathlib import Path

import numpy as np

METRICS_COLUMNS = [
    "episode",
    "mean_loss_mw",
    "mean_cost_pu",
    "alpha",
    "lambda",
    "critic_loss",
    "cost_critic_loss",
    "entropy_estimate",
]


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def metrics_csv(rows: list[dict], columns=METRICS_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()


def write_metrics(path, rows: list[dict], columns=METRICS_COLUMNS):
    atomic_write_text(path, metrics_csv(rows, columns))


def read_csv_columns(path) -> tuple[list[str], dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = rows[0]
    body = rows[1:]
    cols = {}
    for j, name in enumerate(header):
        try:
            cols[name] = np.array([float(r[j]) for r in body])
        except ValueError:
            cols[name] = np.array([r[j] for r in body], dtype=object)
    return header, cols


def average_metrics(per_seed: list[list[dict]], columns=METRICS_COLUMNS) -> list[dict]:
    """Column-wise arithmetic mean across seeds, episode by episode."""
    n = min(len(rows) for rows in per_seed)
    out = []
    for i in range(n):
        row = {"episode": per_seed[0][i]["episode"]}
        for c in columns:
            if c == "episode":
                continue
            row[c] = float(np.mean([rows[i][c] for rows in per_seed]))
        out.append(row)
    return out
