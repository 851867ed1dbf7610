"""Self-describing checkpoint container.

Layout: 8-byte magic, 8-byte little-endian header length, a JSON header
(network kind, config, tensor table, metadata), then the raw little-endian
tensor data in table order. No timestamps, so identical weights give
identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..errors import ValidationError
from ..patches import PatchLayout
from .models import CNN6, NetConfig, TraNet

MAGIC = b"SRCKPT01"
_DTYPES = {torch.float32: "<f4", torch.int64: "<i8"}


def describe(model: nn.Module) -> dict:
    if isinstance(model, TraNet):
        return {"net": "tranet", "config": model.cfg.to_dict()}
    if isinstance(model, CNN6):
        lay = model.layout
        return {"net": "cnn6", "layout": [lay.k_t, lay.k_x, lay.l_t, lay.l_x]}
    raise ValidationError(f"cannot serialize {type(model).__name__}")


def rebuild(desc: dict) -> nn.Module:
    if desc.get("net") == "tranet":
        return TraNet(NetConfig.from_dict(desc["config"]))
    if desc.get("net") == "cnn6":
        return CNN6(PatchLayout(*desc["layout"]))
    raise ValidationError(f"unknown network kind {desc.get('net')!r}")


def save(path, model: nn.Module, meta: dict | None = None) -> bytes:
    """Write ``model`` and JSON-serializable ``meta``; returns the bytes written."""
    table, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        dt = _DTYPES.get(tensor.dtype)
        if dt is None:
            tensor, dt = tensor.float(), "<f4"
        raw = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=dt).tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "dtype": dt,
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"model": describe(model), "tensors": table, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    Path(path).write_bytes(data)
    return data


def load(path) -> tuple[nn.Module, dict]:
    """Rebuild the network from a checkpoint; returns (model in eval mode, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise ValidationError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt header ({exc})") from None
    body = raw[16 + hlen:]
    model = rebuild(header["model"])
    state = {}
    for ent in header["tensors"]:
        chunk = body[ent["offset"]:ent["offset"] + ent["nbytes"]]
        if len(chunk) != ent["nbytes"]:
            raise ValidationError(f"{path}: truncated tensor {ent['name']}")
        arr = np.frombuffer(chunk, dtype=ent["dtype"]).reshape(ent["shape"])
        state[ent["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]
