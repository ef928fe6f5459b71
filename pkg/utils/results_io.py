from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from modules.errors import DatasetIoError

RESULTS_SCHEMA_VERSION = 1


def content_hash(path: Path | str) -> str:
    h = hashlib.sha256()
    try:
        with Path(path).open("rb") as f:
            for chunk in iter(lambda: f.read(1 << 16), b""):
                h.update(chunk)
    except OSError as exc:
        raise DatasetIoError(f"cannot hash {path}: {exc}") from exc
    return h.hexdigest()


def config_hash(config: Dict[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def ensure_dir(path: Path | str) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIoError(f"cannot create output directory {path}: {exc}") from exc
    if not path.is_dir():
        raise DatasetIoError(f"output path {path} is not a directory")
    return path


def write_json(path: Path | str, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    body = dict(payload)
    body.setdefault("schema_version", RESULTS_SCHEMA_VERSION)
    try:
        text = json.dumps(body, sort_keys=True, ensure_ascii=False, indent=2, default=_json_default)
        path.write_text(text + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetIoError(f"cannot write {path}: {exc}") from exc
    return path


def write_csv(path: Path | str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(row.get(k)) for k in columns})
    except OSError as exc:
        raise DatasetIoError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path: Path | str) -> List[Dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _cell(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else value


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
