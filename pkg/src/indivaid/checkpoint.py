"""Checkpoint directory layout: ``params/<group>.bin`` blobs plus ``meta.json``.

Each blob is a magic tag, a JSON index of parameter names to shapes and
offsets, then the raw little-endian buffers concatenated in sorted name order.
The format is deliberately position-independent and pickle-free so that two
identical training runs produce byte-identical checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

_MAGIC = b"IAIDPG01"

_DTYPES = {
    torch.float64: "<f8",
    torch.float32: "<f4",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def save_group(path, tensors: dict[str, torch.Tensor]) -> None:
    index = {}
    buffers = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {t.dtype} for parameter {name}")
        dtype = _DTYPES[t.dtype]
        raw = np.ascontiguousarray(t.numpy(), dtype=np.dtype(dtype)).tobytes()
        index[name] = {"shape": list(t.shape), "dtype": dtype, "offset": offset}
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)


def load_group(path) -> dict[str, torch.Tensor]:
    blob = Path(path).read_bytes()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a parameter group file")
    (header_len,) = struct.unpack_from("<Q", blob, len(_MAGIC))
    start = len(_MAGIC) + 8
    index = json.loads(blob[start : start + header_len].decode("utf-8"))
    data_start = start + header_len
    out = {}
    for name, entry in index.items():
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        begin = data_start + entry["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=begin)
        tensor = torch.from_numpy(arr.copy()).reshape(entry["shape"])
        out[name] = tensor.to(_TORCH_DTYPES[entry["dtype"]])
    return out


def save_checkpoint(directory, groups: dict[str, dict[str, torch.Tensor]], meta: dict) -> Path:
    directory = Path(directory)
    params_dir = directory / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    for group, tensors in groups.items():
        save_group(params_dir / f"{group}.bin", tensors)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no checkpoint at {directory} (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    groups = {}
    for blob in sorted((directory / "params").glob("*.bin")):
        groups[blob.stem] = load_group(blob)
    return meta, groups


def fingerprint(tensors: dict[str, torch.Tensor]) -> str:
    """Order-independent digest of named tensors, for freezing-contract checks."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("utf-8"))
        h.update(np.ascontiguousarray(t.numpy(), dtype="<f8").tobytes())
    return h.hexdigest()
