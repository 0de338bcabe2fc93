"""Plain-text writers and run manifests.

Payload files never contain timestamps, so a rerun with the manifest's
parameters reproduces them byte for byte.  Every file is written to a
temporary sibling first and renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__

OUTPUT_DIR_ENV = "APCRE_OUTPUT_DIR"


def fmt(x) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def atomic_write_text(path: Path, text: str) -> Path:
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
    return path


def delimited(rows: Iterable[Sequence], header: Sequence[str] | None = None, delimiter: str = ",") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    if header is not None:
        writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_matrix_csv(path, M: np.ndarray) -> Path:
    """Headerless comma-separated matrix, one line per row."""
    return atomic_write_text(path, delimited(np.asarray(M).tolist()))


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if np.isfinite(x):
            return x
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return obj


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n")


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Records one command invocation: parameters, seed, version, timing and outputs."""

    FILENAME = "manifest.json"

    def __init__(self, command: str, params: dict, seed: int | None = None):
        self.command = command
        self.params = params
        self.seed = seed
        self.started = now()
        self.finished: str | None = None
        self.outputs: list[str] = []

    def add(self, path: Path) -> Path:
        self.outputs.append(Path(path).name)
        return path

    def as_dict(self) -> dict:
        return {
            "command": self.command,
            "params": self.params,
            "seed": self.seed,
            "version": __version__,
            "started": self.started,
            "finished": self.finished,
            "outputs": self.outputs,
        }

    def write(self, out_dir: Path) -> Path:
        self.finished = now()
        return write_json(Path(out_dir) / self.FILENAME, self.as_dict())


def load_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
