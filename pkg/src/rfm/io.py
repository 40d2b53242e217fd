"""Small file helpers: atomic writes and canonical JSON."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .errors import IOFailure


def atomic_write_bytes(path, data: bytes):
    """Write to a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace variation, repr-exact floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def jsonl(records) -> str:
    return "".join(canonical_json(r) + "\n" for r in records)


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
