"""Versioned JSON documents holding named arrays (checkpoints and heads)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError, IncompatibleVersionError

FORMAT_VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    return {"dtype": str(a.dtype), "shape": list(a.shape), "data": a.astype(np.float64).reshape(-1).tolist()}


def decode_array(d: dict) -> np.ndarray:
    try:
        return np.asarray(d["data"], dtype=np.float64).astype(d["dtype"]).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array entry: {exc}") from None


def write_document(path, kind: str, body: dict) -> Path:
    """Serialise ``body`` under a header naming the document kind and version.

    Floats are written by ``repr`` (shortest round-trip form), so every
    float32/float64 entry reloads bit-identically.
    """
    doc = {"format_version": FORMAT_VERSION, "kind": kind, **body}
    text = json.dumps(doc, indent=1, sort_keys=True, allow_nan=False)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text + "\n")
    tmp.replace(path)
    return path


def read_document(path, kind: str) -> dict:
    raw = Path(path).read_text()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"{path}: parse error at byte offset {len(raw[:exc.pos].encode())}: {exc.msg}"
        ) from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError(f"{path}: missing format_version header")
    version = doc["format_version"]
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(
            f"{path}: format_version {version} is not supported by this build "
            f"(expects format_version {FORMAT_VERSION})"
        )
    if doc.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} document, found {doc.get('kind')!r}")
    return doc
