"""Versioned binary checkpoints: magic "HMACK1", a JSON header holding the
config record, metadata and a tensor index, then raw little-endian tensors."""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, config_hash
from .network import DynamicsModel

MAGIC = b"HMACK1"

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_TO_TORCH = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(model: DynamicsModel, path, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    index = []
    blobs = []
    offset = 0
    for name in sorted(state):
        t = state[name].detach().cpu()
        code = _DTYPES[t.dtype]
        raw = t.numpy().astype(code).tobytes()
        index.append({"name": name, "shape": list(t.shape), "dtype": code,
                      "offset": offset, "bytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": model.cfg.to_dict(),
        "config_hash": config_hash(model.cfg),
        "meta": meta or {},
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    return checkpoint_hash(path)


def read_header(path):
    with open(path, "rb") as f:
        if f.read(6) != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(hlen))


def load_checkpoint(path, map_location=None):
    """Returns (model, meta). The model is rebuilt from the stored config."""
    path = Path(path)
    header = read_header(path)
    body_start = 6 + 4 + len(json.dumps(header, sort_keys=True).encode())
    blob = path.read_bytes()[body_start:]
    state = {}
    for rec in header["tensors"]:
        raw = blob[rec["offset"]:rec["offset"] + rec["bytes"]]
        arr = np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
        state[rec["name"]] = torch.from_numpy(arr).to(_TO_TORCH[rec["dtype"]])
    cfg = ModelConfig.from_dict(header["config"])
    model = DynamicsModel(cfg)
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, header["meta"]


def checkpoint_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
