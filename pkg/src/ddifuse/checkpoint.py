"""Checkpoint directories: ``params.npz`` plus ``manifest.json``."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import FormatError

FORMAT_VERSION = 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(directory, kind: str, arrays: dict, manifest: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savez(d / "params.npz", **{k: np.asarray(v) for k, v in arrays.items()})
    meta = {"format_version": FORMAT_VERSION, "kind": kind, **manifest,
            "params_sha256": file_sha256(d / "params.npz")}
    with open(d / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return d


def load_checkpoint(directory) -> tuple[dict, dict]:
    d = Path(directory)
    try:
        with open(d / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError("checkpoint has no manifest.json", str(d)) from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('format_version')}", str(d))
    with np.load(d / "params.npz") as data:
        arrays = {k: data[k].copy() for k in data.files}
    return arrays, manifest


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
