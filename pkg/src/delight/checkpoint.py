"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    b"DLGTCKPT"  magic
    u32          format version
    u64          header length
    header       UTF-8 JSON, sorted keys: stage, epoch, val_score, config,
                 meta, optimizer param groups, tensor table (name, dtype, shape)
    tensors      raw little-endian bytes, in tensor-table order
    32 bytes     SHA-256 of everything above

Writes go to a temporary file that is fsynced and then renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

MAGIC = b"DLGTCKPT"
VERSION = 1
_DTYPES = {"float32", "float64", "int64", "int32", "uint8", "bool"}


@dataclass
class Checkpoint:
    stage: int
    params: dict                      # network name -> state_dict
    optim: dict = field(default_factory=dict)   # optimizer name -> optimizer state_dict
    epoch: int = 0
    val_score: float = float("nan")
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().contiguous().numpy()
    if arr.dtype.name not in _DTYPES:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    return arr


def _flatten(ckpt: Checkpoint):
    tensors = []
    for net, state in ckpt.params.items():
        for name, t in state.items():
            tensors.append((f"param/{net}/{name}", t))
    groups = {}
    for opt_name, sd in ckpt.optim.items():
        groups[opt_name] = sd["param_groups"]
        for idx in sorted(sd["state"]):
            for key, t in sd["state"][idx].items():
                tensors.append((f"optim/{opt_name}/{idx}/{key}", torch.as_tensor(t)))
    return tensors, groups


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors, groups = _flatten(ckpt)
    table, blobs = [], []
    for name, t in tensors:
        arr = _to_numpy(t)
        table.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    header = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "val_score": None if ckpt.val_score != ckpt.val_score else ckpt.val_score,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "optim_groups": groups,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes, source="checkpoint") -> Checkpoint:
    if len(data) < len(MAGIC) + 12 + 32 or data[:len(MAGIC)] != MAGIC:
        raise ConfigError(f"{source} is not a checkpoint file")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise ConfigError(f"{source} failed its integrity check (hash trailer mismatch)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise ConfigError(f"{source} has unsupported format version {version}")
    off = len(MAGIC) + 12
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    params: dict = {}
    opt_state: dict = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=n // dt.itemsize, offset=off).reshape(entry["shape"])
        off += n
        t = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        kind, rest = entry["name"].split("/", 1)
        if kind == "param":
            net, name = rest.split("/", 1)
            params.setdefault(net, OrderedDict())[name] = t
        else:
            opt_name, idx, key = rest.split("/")
            opt_state.setdefault(opt_name, {}).setdefault(int(idx), {})[key] = t
    if off != len(body):
        raise ConfigError(f"{source} has trailing or missing tensor bytes")
    optim = {name: {"state": opt_state.get(name, {}), "param_groups": groups}
             for name, groups in header["optim_groups"].items()}
    val = header["val_score"]
    return Checkpoint(stage=header["stage"], params=params, optim=optim, epoch=header["epoch"],
                      val_score=float("nan") if val is None else val,
                      config=header["config"], meta=header["meta"])


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), str(path))
