"""Binary checkpoint format.

Layout: ``b"GCKO"``, u32 LE version (1), u64 LE header length, UTF-8 JSON
header ``{"config": ..., "tensors": [{"name", "shape", "dtype", "offset"}]}``
and then the raw little-endian tensor payloads in header order. Offsets are
relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GCKO"
VERSION = 1
_NP = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path, extra: dict | None = None):
    from .model import ModelConfig  # noqa: F401  (config travels in the header)

    entries, blobs, offset = [], [], 0
    for name, p in model.state_dict().items():
        dtype = str(p.dtype).removeprefix("torch.")
        if dtype not in _NP:
            raise CheckpointError(f"cannot store tensor {name} of dtype {dtype}")
        raw = p.detach().cpu().numpy().astype(_NP[dtype], copy=False).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "dtype": dtype, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": model.cfg.to_dict(), "tensors": entries}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def read_header(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    return header, memoryview(data)[16 + hlen :]


def load_checkpoint(path, dtype: str | None = None):
    """Rebuild the model stored at ``path``.

    ``dtype`` widens (or narrows) the stored parameters; f32 -> f64 is exact.
    """
    from .model import GeckoLM, ModelConfig

    header, payload = read_header(path)
    cfg_dict = dict(header["config"])
    if dtype is not None:
        cfg_dict["dtype"] = dtype
    cfg = ModelConfig.from_dict(cfg_dict)
    model = GeckoLM(cfg)
    own = model.state_dict()
    names = {e["name"] for e in header["tensors"]}
    if names != set(own):
        raise CheckpointError(f"{path}: tensor names do not match the configured model")
    state = {}
    for e in header["tensors"]:
        np_dtype = np.dtype(_NP[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * np_dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {e['name']}")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=np_dtype).reshape(e["shape"])
        t = torch.from_numpy(arr.copy())
        if tuple(t.shape) != tuple(own[e["name"]].shape):
            raise CheckpointError(f"{path}: shape mismatch for {e['name']}")
        state[e["name"]] = t.to(own[e["name"]].dtype)
    model.load_state_dict(state)
    return model


def content_hash(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
