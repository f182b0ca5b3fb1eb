"""MGCK checkpoint format.

Layout: magic "MGCK", u32 format version, u32 header length, UTF-8 JSON
header (model config, extra state, named tensor manifest with shapes and
byte offsets), then raw little-endian float32 buffers in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"MGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, extra: dict | None = None,
                    extra_tensors: dict | None = None) -> None:
    """Write the model (plus optional training state) to an MGCK file."""
    path = Path(path)
    tensors: dict[str, np.ndarray] = {
        name: t.data for name, t in model.named_params().items()
    }
    for name, arr in (extra_tensors or {}).items():
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.asarray(arr)

    manifest = []
    offset = 0
    for name in tensors:
        arr = tensors[name]
        nbytes = arr.size * 4
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes

    header = {
        "config": model.cfg.to_dict(),
        "extra": extra or {},
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for name in tensors:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path, seed: int = 0) -> tuple[Model, dict, dict]:
    """Read an MGCK file; returns (model, extra header state, extra tensors).

    The tensor manifest is validated against the shapes the config implies.
    """
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        data = fh.read()

    cfg = ModelConfig.from_dict(header["config"])
    model = Model(cfg, seed=seed)
    params = model.named_params()

    loaded: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        loaded[name] = raw.reshape(shape)

    for name, tensor in params.items():
        if name not in loaded:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if loaded[name].shape != tensor.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {loaded[name].shape}, "
                f"config implies {tensor.shape}"
            )
        tensor.data = loaded[name].astype(tensor.dtype)

    extra_tensors = {k: v for k, v in loaded.items() if k not in params}
    return model, header.get("extra", {}), extra_tensors
