"""Versioned checkpoint container.

Layout::

    b"VBCKPT"  2-byte format version (little-endian uint16)
    8-byte header length (little-endian uint64)
    header: UTF-8 JSON, keys sorted
    payload: raw little-endian tensors, concatenated

The header carries the model config, training step and history, the vocab
checksum, free-form ``extra`` metadata and a ``tensors`` manifest of
``{name, dtype, shape, offset, nbytes}`` with offsets relative to the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .errors import CheckpointError

__all__ = ["FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "file_sha256", "read_header"]

MAGIC = b"VBCKPT"
FORMAT_VERSION = 1
_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}
_TORCH_TO_NAME = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.uint8: "uint8",
}


def _to_array(t) -> Tuple[str, np.ndarray]:
    if isinstance(t, torch.Tensor):
        if t.dtype not in _TORCH_TO_NAME:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
        name = _TORCH_TO_NAME[t.dtype]
        arr = t.detach().cpu().contiguous().numpy()
    else:
        arr = np.asarray(t)
        name = arr.dtype.name
        if name not in _DTYPES:
            raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    return name, np.ascontiguousarray(arr, dtype=_DTYPES[name])


def save_checkpoint(path, tensors: Dict[str, object], header: dict) -> str:
    """Write tensors (torch or numpy) plus a JSON header; returns the file's sha256."""
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        dtype, arr = _to_array(tensors[name])
        raw = arr.tobytes()
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["tensors"] = manifest
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQ", FORMAT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)
    return file_sha256(path)


def _read_prefix(fh, path) -> dict:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    prefix = fh.read(10)
    if len(prefix) != 10:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<HQ", prefix)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    raw = fh.read(hlen)
    if len(raw) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_prefix(fh, path)


def load_checkpoint(path) -> Tuple[dict, Dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        header = _read_prefix(fh, path)
        payload = fh.read()
    tensors = {}
    for entry in header.get("tensors", []):
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise CheckpointError(f"{path}: unknown dtype {entry['dtype']!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        if start + nbytes > len(payload) or nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} is truncated or mis-sized")
        arr = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=start)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(shape).astype(dt.newbyteorder("="), copy=True))
    return header, tensors


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def check_state_shapes(module: torch.nn.Module, tensors: Dict[str, torch.Tensor],
                       prefix: str = "model.", path: Optional[str] = None) -> Dict[str, torch.Tensor]:
    """Match ``prefix``-named tensors against a module's state dict, shape by shape."""
    expected = module.state_dict()
    got = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path or 'checkpoint'}: missing {missing[:5]} unexpected {extra[:5]}")
    for name, t in expected.items():
        if tuple(got[name].shape) != tuple(t.shape):
            raise CheckpointError(
                f"{path or 'checkpoint'}: {name} has shape {tuple(got[name].shape)}, "
                f"config expects {tuple(t.shape)}")
    return got
