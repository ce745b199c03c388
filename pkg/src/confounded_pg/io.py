"""Text formats for datasets, policy parameters, matrices and result tables.

Dataset files start with a header line ``#T=2,obs_dim=1,action_count=2,seed=7``
followed by one trajectory per line::

    o0_1,...,o0_k, o_1 (k values), a_1, r_1, ..., o_T, a_T, r_T

Floats are written with ``repr`` (shortest round-trip form), so reading and
re-writing a file reproduces it byte for byte.
"""

from __future__ import annotations

import csv
import os
import sys
from pathlib import Path

import numpy as np

from .env import OfflineDataset
from .errors import InputError
from .policy import PolicyParams

CSV_DIGITS = 12


def _fmt(x: float) -> str:
    return repr(float(x))


def format_dataset(ds: OfflineDataset) -> str:
    header = f"#T={ds.horizon},obs_dim={ds.obs_dim},action_count={ds.action_count}"
    if ds.seed is not None:
        header += f",seed={int(ds.seed)}"
    lines = [header]
    for i in range(ds.n):
        fields = [_fmt(v) for v in ds.o0[i]]
        for t in range(ds.horizon):
            fields += [_fmt(v) for v in ds.obs[i, t]]
            fields += [str(int(ds.actions[i, t])), _fmt(ds.rewards[i, t])]
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def write_dataset(ds: OfflineDataset, path) -> None:
    Path(path).write_text(format_dataset(ds), encoding="utf-8")


def _parse_header(line: str) -> dict:
    if not line.startswith("#"):
        raise InputError("dataset file must start with a '#' header line")
    meta = {}
    for item in line[1:].strip().split(","):
        key, sep, val = item.partition("=")
        if not sep:
            raise InputError(f"malformed header field {item!r}")
        try:
            meta[key.strip()] = int(val)
        except ValueError as exc:
            raise InputError(f"header field {key!r} is not an integer") from exc
    missing = {"T", "obs_dim", "action_count"} - meta.keys()
    if missing:
        raise InputError(f"header lacks {sorted(missing)}")
    return meta


def parse_dataset(text: str) -> OfflineDataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InputError("empty dataset file")
    meta = _parse_header(lines[0])
    horizon, k = meta["T"], meta["obs_dim"]
    width = k + horizon * (k + 2)
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != width:
            raise InputError(f"line {lineno}: expected {width} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise InputError(f"line {lineno}: {exc}") from exc
    if not rows:
        raise InputError("dataset has no trajectories")
    arr = np.array(rows)
    n = arr.shape[0]
    steps = arr[:, k:].reshape(n, horizon, k + 2)
    actions = steps[:, :, k]
    if np.any(actions != np.round(actions)):
        raise InputError("action indices must be integers")
    return OfflineDataset(arr[:, :k], steps[:, :, :k], actions.astype(int), steps[:, :, k + 1],
                          meta["action_count"], meta.get("seed"))


def read_dataset(path) -> OfflineDataset:
    return parse_dataset(Path(path).read_text(encoding="utf-8"))


def format_params(params: PolicyParams) -> str:
    """Header ``#blocks=4,4`` then one coordinate per line."""
    head = "#blocks=" + ",".join(str(b) for b in params.block_sizes)
    return "\n".join([head] + [_fmt(v) for v in params.theta]) + "\n"


def parse_params(text: str) -> PolicyParams:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#blocks="):
        raise InputError("policy file must start with '#blocks=' header")
    try:
        blocks = tuple(int(b) for b in lines[0][len("#blocks="):].split(","))
        theta = np.array([float(v) for v in lines[1:]])
    except ValueError as exc:
        raise InputError(f"malformed policy file: {exc}") from exc
    return PolicyParams(theta, blocks)


def write_params(params: PolicyParams, path) -> None:
    Path(path).write_text(format_params(params), encoding="utf-8")


def read_params(path) -> PolicyParams:
    return parse_params(Path(path).read_text(encoding="utf-8"))


def format_matrix(m) -> str:
    """Header ``#rows,cols`` then one comma-separated row per line."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    lines = [f"#{m.shape[0]},{m.shape[1]}"]
    lines += [",".join(_fmt(v) for v in row) for row in m]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise InputError("matrix file must start with '#rows,cols'")
    rows, cols = (int(v) for v in lines[0][1:].split(","))
    body = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    m = np.array(body, dtype=float).reshape(len(body), -1) if body else np.zeros((0, cols))
    if m.shape != (rows, cols):
        raise InputError(f"matrix body has shape {m.shape}, header says {(rows, cols)}")
    return m


def fmt_number(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.{CSV_DIGITS}g}"
    return str(x)


def write_csv(path, header: list[str], rows) -> None:
    """UTF-8 CSV with numbers at 12 significant digits; ``path='-'`` writes to stdout."""
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_number(v) for v in row])

    if path in (None, "-"):
        emit(sys.stdout)
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        emit(fh)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path} is empty")
    return rows[0], rows[1:]
