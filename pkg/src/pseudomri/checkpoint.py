"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"PMRICKPT" | u32 version | u32 header_len | header (UTF-8 JSON) | u32 n_tensors
    n_tensors x { u16 name_len | name | u8 ndim | ndim x u32 dims | prod(dims) x f32 }
    sha256 of everything above (32 bytes)

Writes go to a temporary file in the target directory and are renamed into place,
so a crash never leaves a truncated file under the final name.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"PMRICKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(header: dict, tensors: Mapping[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} must be float32, got {arr.dtype}")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)) + key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def _decode(raw: bytes):
    if len(raw) < len(MAGIC) + 44 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<II", body, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(body[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return header, tensors


def save_checkpoint(path, header: dict, tensors: Mapping[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = _encode(header, tensors)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
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


def load_checkpoint(path):
    """Return ``(header, {name: float32 tensor})``."""
    return _decode(Path(path).read_bytes())


def flatten_state(prefix: str, state: Mapping[str, torch.Tensor]) -> dict:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def unflatten_state(prefix: str, tensors: Mapping[str, torch.Tensor]) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}


def optimizer_to_tensors(prefix: str, opt: torch.optim.Optimizer, names: list[str]):
    """Split an optimizer state into named float tensors plus JSON-able scalars.

    ``names`` gives the parameter names in the optimizer's parameter order.
    """
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, st in sd["state"].items():
        name = names[idx]
        for key, val in st.items():
            if torch.is_tensor(val) and val.ndim > 0:
                tensors[f"{prefix}/{name}/{key}"] = val
            else:
                scalars[f"{name}/{key}"] = float(val)
    groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, {"scalars": scalars, "param_groups": groups}


def optimizer_from_tensors(prefix: str, opt: torch.optim.Optimizer, names: list[str], tensors, meta) -> None:
    state = {}
    for idx, name in enumerate(names):
        st = {}
        for key, val in tensors.items():
            head = f"{prefix}/{name}/"
            if key.startswith(head):
                st[key[len(head):]] = val.clone()
        for key, val in meta["scalars"].items():
            pname, _, field = key.rpartition("/")
            if pname == name:
                st[field] = torch.tensor(val, dtype=torch.float32)
        if st:
            state[idx] = st
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
