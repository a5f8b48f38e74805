"""CSV/JSON writers with full double precision and stable formatting."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_table(path: str | Path, header: Sequence[str], columns: Sequence[np.ndarray],
                int_columns: int = 0) -> Path:
    """Write equal-length columns; the first ``int_columns`` are written as integers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [np.asarray(c) for c in columns]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in zip(*cols):
            writer.writerow([str(int(v)) for v in row[:int_columns]] + [fmt(v) for v in row[int_columns:]])
    return path


def read_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    if not rows:
        raise ConfigError(f"{path}: empty CSV")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return rows[0], data.reshape(-1, len(rows[0]))


def write_json(path: str | Path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: str | Path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
