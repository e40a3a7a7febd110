"""
Single-file checkpoint container.

Byte layout (format version 1)::

    b"LONGIDIFF-CKPT 1\\n"            magic line with the format version
    b"<N>\\n"                         header length in bytes, ASCII decimal
    <N bytes of UTF-8 JSON>          header, keys sorted, no whitespace
    <payload>                        tensors, float64 little-endian, C order

The header is ``{"format_version": 1, "meta": {...}, "sections": {name:
{"config": {...}, "dtype": "float32", ...}}, "tensors": [{"name":
"<section>/<param>", "shape": [...], "offset": <byte offset into payload>}]}``.
Tensors appear in the payload in header order with no padding. Parameters
stored in single precision widen to float64 exactly, so save/load is
bit-exact for either dtype.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"LONGIDIFF-CKPT"
FORMAT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)  # name -> header dict (config, dtype, ...)
    tensors: dict = field(default_factory=dict)  # "<section>/<param>" -> float64 ndarray

    def add_module(self, name: str, module: nn.Module, config: Optional[dict] = None, **extra) -> None:
        if "/" in name:
            raise CheckpointError("section names may not contain '/'")
        params = module.state_dict()
        dtype = next(iter(params.values())).dtype if params else torch.float32
        self.sections[name] = {"config": config or {}, "dtype": str(dtype).replace("torch.", ""), **extra}
        for k, v in params.items():
            self.tensors[f"{name}/{k}"] = v.detach().cpu().to(torch.float64).numpy().copy()

    def state_dict(self, name: str) -> dict:
        if name not in self.sections:
            raise CheckpointError(f"checkpoint has no section {name!r}")
        dtype = _DTYPES[self.sections[name]["dtype"]]
        prefix = name + "/"
        return {k[len(prefix):]: torch.from_numpy(v.copy()).to(dtype)
                for k, v in self.tensors.items() if k.startswith(prefix)}

    def load_into(self, name: str, module: nn.Module) -> nn.Module:
        sd = self.state_dict(name)
        module.to(dtype=next(iter(sd.values())).dtype)
        module.load_state_dict(sd, strict=True)
        return module

    def has(self, name: str) -> bool:
        return name in self.sections


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": ckpt.meta,
                         "sections": ckpt.sections, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n")
        fh.write(str(len(header)).encode() + b"\n")
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    first = data.find(b"\n")
    magic = data[:first].split(b" ")
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(magic[1]) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {magic[1].decode()}")
    second = data.find(b"\n", first + 1)
    n = int(data[first + 1:second])
    start = second + 1
    header = json.loads(data[start:start + n].decode("utf-8"))
    payload = memoryview(data)[start + n:]
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(meta=header["meta"], sections=header["sections"], tensors=tensors)


def parameter_digest(module: nn.Module, exclude_prefixes=()) -> str:
    """SHA-256 over the raw bytes of a module's parameters (sorted by name)."""
    import hashlib
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        if any(k.startswith(p) for p in exclude_prefixes):
            continue
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
