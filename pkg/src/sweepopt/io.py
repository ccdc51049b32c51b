"""File formats: trajectory/control CSV, JSON documents and key=value configs.

Every writer goes through a temporary file in the target directory followed
by ``os.replace``, so readers never observe partial files. Numbers are
written with 17 significant digits, which round-trips doubles exactly.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .controls import GridControl
from .errors import SweepError

FLOAT_FMT = "%.16e"


class ParseError(SweepError):
    """Malformed input file."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_rows(header, rows) -> str:
    buf = _io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(FLOAT_FMT % float(v) for v in row) + "\n")
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, format_rows(header, rows))


def read_csv(path, expect_prefix=None):
    """Return ``(header, data)`` with ``data`` a float array of shape ``(rows, cols)``."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if expect_prefix is not None and header[: len(expect_prefix)] != list(expect_prefix):
        raise ParseError(f"{path}: header {header} does not start with {list(expect_prefix)}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not data:
        raise ParseError(f"{path}: no data rows")
    arr = np.array(data)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{path}: non-finite values")
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise ParseError(f"{path}: time column is not strictly increasing")
    return header, arr


def trajectory_header(n: int, m: int):
    return ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + ["xi"]


def write_trajectory(path, traj, controls: GridControl = None) -> None:
    """Rows ``t, x1..xn, u1..um, xi``."""
    u = controls if controls is not None else traj.controls
    if u is None:
        raise ValueError("trajectory CSV needs the control")
    header = trajectory_header(traj.n, u.m)
    rows = np.column_stack([traj.grid, traj.states, u.values, traj.xi])
    write_csv(path, header, rows)


def read_trajectory(path):
    """Return ``(grid, states, controls, xi)`` from a trajectory CSV."""
    header, data = read_csv(path, expect_prefix=["t"])
    if header[-1] != "xi":
        raise ParseError(f"{path}: last column must be xi")
    n = sum(1 for h in header if h.startswith("x") and h[1:].isdigit())
    m = sum(1 for h in header if h.startswith("u") and h[1:].isdigit())
    if header != trajectory_header(n, m):
        raise ParseError(f"{path}: unexpected header {header}")
    grid = data[:, 0]
    return grid, data[:, 1:1 + n], GridControl(grid, data[:, 1 + n:1 + n + m]), data[:, -1]


def write_control(path, u: GridControl) -> None:
    header = ["t"] + [f"u{j + 1}" for j in range(u.m)]
    write_csv(path, header, np.column_stack([u.grid, u.values]))


def read_control(path) -> GridControl:
    header, data = read_csv(path, expect_prefix=["t"])
    if not all(h == f"u{j + 1}" for j, h in enumerate(header[1:])):
        raise ParseError(f"{path}: unexpected header {header}")
    return GridControl(data[:, 0], data[:, 1:])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, doc) -> None:
    atomic_write_text(path, json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None


def parse_kv(lines, source="<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_config(path) -> dict:
    try:
        with open(path) as fh:
            return parse_kv(fh, source=str(path))
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
