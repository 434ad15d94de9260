"""Single-file checkpoints: JSON header followed by a little-endian float64 payload.

Layout::

    b"SRCK" | uint64 header length | header JSON (utf-8) | payload

The header lists every array by name with its shape and offset into the
payload (in float64 elements), plus the config text, iteration counter,
optimizer step counts and the serialized generator state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig

MAGIC = b"SRCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    arrays: dict[str, np.ndarray]
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays stored under ``prefix/``, with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


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


def rng_state(rng: np.random.Generator) -> dict:
    return _jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    state = _from_jsonable(state)
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    names = sorted(ckpt.arrays)
    entries, offset, chunks = [], 0, []
    for n in names:
        a = np.ascontiguousarray(ckpt.arrays[n], dtype="<f8")
        entries.append({"name": n, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes(order="C"))
    header = {
        "version": VERSION,
        "config": ckpt.config.dumps(),
        "iteration": int(ckpt.iteration),
        "rng_state": ckpt.rng_state,
        "extra": _jsonable(ckpt.extra),
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    if header["version"] != VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    payload = np.frombuffer(raw[12 + n:], dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return Checkpoint(RunConfig.loads(header["config"]), arrays, header["iteration"],
                      header["rng_state"], _from_jsonable(header["extra"]))
