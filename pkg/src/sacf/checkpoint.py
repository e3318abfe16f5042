"""Checkpoint files: one JSON manifest line followed by a little-endian float32 payload."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Adam, ContractViolation
from .nets import Module

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    digest: str
    update: int
    arrays: dict[str, np.ndarray]
    adam_t: int = 0


def _entries(arrays: dict[str, np.ndarray]):
    offset = 0
    for name, arr in arrays.items():
        nbytes = int(arr.size) * _DTYPE.itemsize
        yield {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes}
        offset += nbytes


def encode(ckpt: Checkpoint) -> bytes:
    entries = list(_entries(ckpt.arrays))
    manifest = {
        "format": FORMAT_VERSION,
        "digest": ckpt.digest,
        "update": int(ckpt.update),
        "adam_t": int(ckpt.adam_t),
        "params": entries,
        "payload_bytes": sum(e["nbytes"] for e in entries),
    }
    payload = b"".join(np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for a in ckpt.arrays.values())
    return json.dumps(manifest, sort_keys=True).encode() + b"\n" + payload


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    head, sep, payload = blob.partition(b"\n")
    if not sep:
        raise ContractViolation(f"{source}: missing checkpoint manifest")
    try:
        manifest = json.loads(head)
    except json.JSONDecodeError as e:
        raise ContractViolation(f"{source}: unreadable manifest ({e})") from e
    if manifest.get("format") != FORMAT_VERSION:
        raise ContractViolation(f"{source}: unsupported checkpoint format {manifest.get('format')}")
    if len(payload) != manifest["payload_bytes"]:
        raise ContractViolation(
            f"{source}: payload is {len(payload)} bytes, manifest declares {manifest['payload_bytes']}")
    arrays = {}
    for e in manifest["params"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=_DTYPE).reshape(e["shape"]).astype(np.float32)
    return Checkpoint(manifest["digest"], manifest["update"], arrays, manifest.get("adam_t", 0))


def capture(model: Module, digest: str, opt: Adam | None = None) -> Checkpoint:
    arrays = {name: p.values for name, p in model.named_parameters()}
    update = adam_t = 0
    if opt is not None:
        names = list(arrays)
        for k, name in enumerate(names):
            arrays[f"adam.m.{name}"] = opt.m[k]
            arrays[f"adam.v.{name}"] = opt.v[k]
        update, adam_t = opt.update, opt.t
    return Checkpoint(digest, update, arrays, adam_t)


def save(path: str | Path, model: Module, digest: str, opt: Adam | None = None) -> None:
    p = Path(path)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_bytes(encode(capture(model, digest, opt)))
    tmp.replace(p)


def load(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return decode(p.read_bytes(), str(p))


def restore(ckpt: Checkpoint, model: Module, digest: str, opt: Adam | None = None) -> None:
    """Copy parameters (and optimiser state) into ``model``; refuses a mismatched config."""
    if ckpt.digest != digest:
        raise ContractViolation(f"checkpoint digest {ckpt.digest} does not match config digest {digest}")
    named = model.named_parameters()
    for name, p in named:
        if name not in ckpt.arrays:
            raise ContractViolation(f"checkpoint lacks parameter {name}")
        if ckpt.arrays[name].shape != p.values.shape:
            raise ContractViolation(f"checkpoint shape mismatch for {name}")
        p.values[...] = ckpt.arrays[name]
    if opt is not None:
        for k, (name, _) in enumerate(named):
            try:
                opt.m[k][...] = ckpt.arrays[f"adam.m.{name}"]
                opt.v[k][...] = ckpt.arrays[f"adam.v.{name}"]
            except KeyError as e:
                raise ContractViolation(f"checkpoint lacks optimiser state for {name}") from e
        opt.update, opt.t = ckpt.update, ckpt.adam_t
