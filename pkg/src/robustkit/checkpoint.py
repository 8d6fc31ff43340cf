"""Versioned binary checkpoint container.

Byte layout (all integers little-endian) is described in
``docs/checkpoint_format.md``; keep the two in sync.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import crossmax as cm
from .model import Backbone, BackboneConfig, Classifier, LinearProbe, SelfEnsemble
from .multires import MultiResConfig

MAGIC = b"RKCKPT\r\n"
VERSION = 1

# dtype code -> numpy dtype; codes are frozen, only ever append
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<i4"), 5: np.dtype("u1")}
CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def write_container(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(meta_raw)) + meta_raw
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        key = name.encode()
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    Path(path).write_bytes(bytes(out))


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 16 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<II", raw, pos)
    if version > VERSION:
        raise CheckpointError(f"{path}: version {version} is newer than supported {VERSION}")
    pos += 8
    meta = json.loads(raw[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + klen].decode()
        pos += klen
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dt = DTYPES.get(code)
        if dt is None:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        numel = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(raw, dt, numel, pos).reshape(shape).copy()
        pos += numel * dt.itemsize
    if pos != len(raw) - 4:
        raise CheckpointError(f"{path}: {len(raw) - 4 - pos} trailing bytes")
    return tensors, meta


def _classifier_meta(clf: Classifier) -> dict:
    return {
        "backbone": asdict(clf.backbone.config),
        "multires": None if clf.multires is None else asdict(clf.multires),
    }


def _state(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save(path: str | Path, model: Classifier | SelfEnsemble, extra: dict | None = None) -> None:
    """Write a classifier or a self-ensemble (backbone plus probes)."""
    if isinstance(model, SelfEnsemble):
        meta = {"kind": "selfensemble", **_classifier_meta(model.classifier)}
        meta["probes"] = [
            {"layer_index": p.layer_index, "pool": p.pool, "features": p.weight.shape[1]} for p in model.probes
        ]
        meta["mode"] = asdict(model.mode)
        tensors = _state(model.classifier, "classifier.")
        for i, p in enumerate(model.probes):
            tensors.update(_state(p, f"probes.{i}."))
    elif isinstance(model, Classifier):
        meta = {"kind": "classifier", **_classifier_meta(model)}
        tensors = _state(model, "classifier.")
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    meta["extra"] = extra or {}
    write_container(path, tensors, meta)


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _load_state(module: torch.nn.Module, tensors: dict, prefix: str) -> None:
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(str(e)) from None


def load(path: str | Path) -> tuple[Classifier | SelfEnsemble, dict]:
    tensors, meta = read_container(path)
    try:
        bcfg = BackboneConfig(**_tuplify(meta["backbone"]))
        mr = None if meta["multires"] is None else MultiResConfig(**_tuplify(meta["multires"]))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad metadata: {e}") from None
    clf = Classifier(Backbone(bcfg), mr)
    _load_state(clf, tensors, "classifier.")
    clf.eval()
    if meta["kind"] == "classifier":
        return clf, meta
    if meta["kind"] != "selfensemble":
        raise CheckpointError(f"{path}: unknown kind {meta['kind']!r}")
    probes = []
    for i, p in enumerate(meta["probes"]):
        pool = p["pool"]
        # rebuild with a fake activation shape giving the stored feature count
        shape = (p["features"], 1, 1) if pool in ("avg", "flatten") else (p["features"] // (pool * pool), 1, 1)
        probe = LinearProbe(p["layer_index"], shape, bcfg.class_count, pool)
        _load_state(probe, tensors, f"probes.{i}.")
        probes.append(probe)
    return SelfEnsemble(clf, probes, cm.AggregationMode(**meta["mode"])), meta
