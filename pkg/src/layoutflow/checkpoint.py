"""Named-tensor checkpoint archive.

Layout of a checkpoint file::

    bytes 0..8    magic b"LFCKPT01"
    bytes 8..16   manifest length, unsigned 64-bit little-endian
    manifest      UTF-8 JSON: {"meta": {...}, "tensors": [{name, shape,
                  dtype, offset}, ...]}, offsets into the payload
    payload       raw little-endian float32 tensor data, concatenated

A `<file>.sha256` sidecar holds the hex digest of the full file (sha256sum
format); when present it is verified on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"LFCKPT01"
_DTYPE = "f4"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], meta: dict[str, Any]) -> None:
    entries = []
    payload = bytearray()
    for name, tensor in tensors.items():
        # astype (not ascontiguousarray) keeps 0-d shapes; tobytes is C-order
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": _DTYPE,
                "offset": len(payload),
            }
        )
        payload += arr.tobytes()
    manifest = json.dumps({"meta": meta, "tensors": entries}).encode("utf-8")
    blob = MAGIC + struct.pack("<Q", len(manifest)) + manifest + bytes(payload)
    with open(path, "wb") as fh:
        fh.write(blob)
    digest = hashlib.sha256(blob).hexdigest()
    with open(f"{os.fspath(path)}.sha256", "w", encoding="utf-8") as fh:
        fh.write(f"{digest}  {os.path.basename(os.fspath(path))}\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    sidecar = f"{os.fspath(path)}.sha256"
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as fh:
            expected = fh.read().split()[0]
        actual = hashlib.sha256(blob).hexdigest()
        if actual != expected:
            raise CheckpointError(f"checksum mismatch for {path}")
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + mlen > len(blob):
        raise CheckpointError(f"{path} is truncated")
    manifest = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
    payload = blob[16 + mlen :]
    tensors: dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != _DTYPE:
            raise CheckpointError(f"unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).view(shape)
    return tensors, manifest["meta"]


def save_model_checkpoint(
    path: str | os.PathLike,
    model: torch.nn.Module,
    *,
    step: int,
    phase: str,
    config: dict[str, Any],
) -> None:
    meta = {"step": step, "phase": phase, "config": config}
    save_checkpoint(path, model.state_dict(), meta)


def load_state_into(
    model: torch.nn.Module,
    tensors: Mapping[str, torch.Tensor],
    *,
    allow_missing: bool = False,
) -> None:
    """Load tensors by name.  Unknown names always fail; absent model
    tensors fail unless allow_missing (used when seeding a layout-phase
    model from a base-only checkpoint)."""
    missing, unexpected = model.load_state_dict(dict(tensors), strict=False)
    if unexpected:
        raise CheckpointError(f"checkpoint has unknown tensors: {sorted(unexpected)[:5]}")
    if missing and not allow_missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
