"""Versioned binary checkpoints.

Layout::

    b"RFMCKPT\\0"  uint32 version  uint32 header_length  header (canonical JSON)
    float64 arrays in header["arrays"] order

The header holds the config echo, the parameter layout, the iteration
counter, the optimiser step and the RNG state; arrays are the live and EMA
parameters and the two Adam moments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointMismatch, IOFailure
from .io import atomic_write_bytes, canonical_json
from .nn import ParameterSet

MAGIC = b"RFMCKPT\x00"
VERSION = 1
ARRAYS = ("live", "ema", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    config: dict
    space_tag: str
    live: ParameterSet
    ema: ParameterSet
    adam_m: np.ndarray
    adam_v: np.ndarray
    iteration: int = 0
    adam_step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "arrays": list(ARRAYS),
            "config": self.config,
            "space": self.space_tag,
            "layout": self.live.layout(),
            "size": self.live.size,
            "iteration": int(self.iteration),
            "adam_step": int(self.adam_step),
            "rng_state": _jsonable(self.rng_state),
            "extra": self.extra,
        }

    def to_bytes(self) -> bytes:
        head = canonical_json(self.header()).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
        for arr in (self.live.data, self.ema.data, self.adam_m, self.adam_v):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointMismatch("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != VERSION:
            raise CheckpointMismatch(f"unsupported checkpoint version {version}")
        head = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        size = int(head["size"])
        body = np.frombuffer(data[16 + hlen :], dtype="<f8")
        if body.size != size * len(ARRAYS):
            raise CheckpointMismatch("checkpoint is truncated or has the wrong parameter count")
        arrays = {name: body[i * size : (i + 1) * size].copy() for i, name in enumerate(head["arrays"])}
        spec = [(n, tuple(s)) for n, s in head["layout"]]
        return cls(
            config=head["config"],
            space_tag=head["space"],
            live=ParameterSet(spec, arrays["live"]),
            ema=ParameterSet(spec, arrays["ema"]),
            adam_m=arrays["adam_m"],
            adam_v=arrays["adam_v"],
            iteration=head["iteration"],
            adam_step=head["adam_step"],
            rng_state=_from_jsonable(head["rng_state"]),
            extra=head.get("extra", {}),
        )

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)

    def check_layout(self, expected: ParameterSet):
        if not self.live.same_layout(expected):
            raise CheckpointMismatch("checkpoint parameter layout does not match the configured network")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
