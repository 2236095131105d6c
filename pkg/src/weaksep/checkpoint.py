"""Self-describing parameter checkpoints.

Layout::

    b"WSEPCKPT" | u32 version | u64 header length | JSON header | tensor bytes | sha256

The header stores the producing network spec, free-form run state, and for
each named tensor its dtype, shape, byte offset and byte length. Float
tensors are stored as little-endian float32, integer buffers as int64.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"WSEPCKPT"
VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _to_numpy(t) -> np.ndarray:
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.issubdtype(a.dtype, np.floating):
        return a.astype("<f4")
    if np.issubdtype(a.dtype, np.integer):
        return a.astype("<i8")
    raise CheckpointError(f"cannot store tensors of dtype {a.dtype}")


def save_checkpoint(path, params: dict, spec: dict, run_state: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in params.items():
        a = np.ascontiguousarray(_to_numpy(value))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"spec": spec, "run_state": run_state or {}, "tensors": entries},
                        sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expected_spec: dict | None = None):
    """Return ``(params, spec, run_state)``; ``params`` maps names to numpy arrays."""
    data = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(data) < fixed + 32 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file or truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupt)")
    version, header_len = struct.unpack("<IQ", body[len(MAGIC):fixed])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[fixed:fixed + header_len])
    if expected_spec is not None and header["spec"] != expected_spec:
        raise CheckpointError(f"{path}: checkpoint was produced by a different spec: {header['spec']}")
    blob = body[fixed + header_len:]
    params = {}
    for e in header["tensors"]:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None or e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"{path}: malformed tensor entry {e['name']!r}")
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).copy()
    return params, header["spec"], header["run_state"]


def params_checksum(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(_to_numpy(params[name])).tobytes())
    return h.hexdigest()
