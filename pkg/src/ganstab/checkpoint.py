"""Versioned JSON checkpoint documents.

Arrays are written flat, row-major, each value with 17 significant digits so
float64 parameters round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _format_array(a: np.ndarray) -> str:
    flat = np.asarray(a, dtype=np.float64).ravel()
    if not np.all(np.isfinite(flat)):
        raise CheckpointError("refusing to serialize non-finite parameters")
    return "[" + ",".join(format(float(v), ".17g") for v in flat) + "]"


def dumps(doc: dict) -> str:
    arrays: list[np.ndarray] = []

    def strip(obj):
        if isinstance(obj, np.ndarray):
            arrays.append(obj)
            return f"@@array{len(arrays) - 1}@@"
        if isinstance(obj, dict):
            return {k: strip(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [strip(v) for v in obj]
        if isinstance(obj, np.generic):
            return obj.item()
        return obj

    text = json.dumps(strip(doc), indent=1, sort_keys=True)
    for i, a in enumerate(arrays):
        text = text.replace(f'"@@array{i}@@"', _format_array(a), 1)
    return text + "\n"


def write(doc: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dumps({"format_version": FORMAT_VERSION, **doc})
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(body, encoding="utf-8")
    os.replace(tmp, path)


def read(path, model_kind: str | None = None) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version "
                              f"{doc.get('format_version') if isinstance(doc, dict) else None!r}")
    if model_kind is not None and doc.get("model_kind") != model_kind:
        raise CheckpointError(f"{path}: model_kind {doc.get('model_kind')!r}, expected {model_kind!r}")
    return doc


def array(doc: dict, key: str, size: int) -> np.ndarray:
    try:
        a = np.array(doc[key], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad or missing array {key!r}: {exc}") from None
    if a.ndim != 1 or a.size != size:
        raise CheckpointError(f"array {key!r} has {a.size} values, expected {size}")
    return a
