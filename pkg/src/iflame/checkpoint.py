"""Single-file weight container: magic, JSON header, raw little-endian float32.

Layout: ``IFLAMECKPT1\n`` | uint32 header length (LE) | UTF-8 JSON header |
concatenated tensor payloads. The header carries the model config and a
manifest of (name, shape, dtype, offset) entries; offsets are relative to
the start of the payload region.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np
import torch

from .hourglass import ModelConfig, build_model

MAGIC = b"IFLAMECKPT1\n"
FORMAT_VERSION = 1


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Write the model's config and weights; ``extra`` lands in the header."""
    manifest = []
    payload = bytearray()
    for name, tensor in model.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().cpu().to(torch.float32).numpy(), dtype="<f4")
        manifest.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": "float32",
            "offset": len(payload),
        })
        payload += arr.tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "manifest": manifest,
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {header.get('format_version')}")
    return header


def load_checkpoint(path, dtype=None):
    """Rebuild the model a checkpoint describes and load its weights."""
    header = read_header(path)
    config = ModelConfig(**header["config"])
    model = build_model(config)
    state = {}
    with open(path, "rb") as fh:
        fh.seek(len(MAGIC))
        (header_len,) = struct.unpack("<I", fh.read(4))
        payload_start = len(MAGIC) + 4 + header_len
        for entry in header["manifest"]:
            if entry["dtype"] != "float32":
                raise ValueError(f"{path}: unsupported tensor dtype {entry['dtype']}")
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            fh.seek(payload_start + entry["offset"])
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"{path}: truncated payload for tensor {entry['name']}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
            state[entry["name"]] = torch.from_numpy(arr)
    model.load_state_dict(state, strict=True)
    if dtype is not None:
        model = model.to(dtype)
    model.eval()
    return model
