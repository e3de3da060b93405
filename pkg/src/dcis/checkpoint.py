"""Single-file checkpoint container for the toy model.

Layout::

    b"DCISCKPT" | u32 version | u64 header length | JSON header | tensor data

The header holds the model config, training metadata, the name/shape/offset
of every tensor and a SHA-256 of the data section.  Tensor data is
little-endian float32, concatenated in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from ._io import atomic_write_bytes
from .model import ModelConfig, ToyTransformer, init_model

MAGIC = b"DCISCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _tensors(model: ToyTransformer) -> list[tuple[str, np.ndarray]]:
    return [(name, t.detach().cpu().numpy().astype("<f4")) for name, t in model.state_dict().items()]


def weights_digest(model: ToyTransformer) -> str:
    h = hashlib.sha256()
    for name, arr in _tensors(model):
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def checkpoint_bytes(model: ToyTransformer) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _tensors(model):
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name} has non-finite values")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    header = {
        "config": model.cfg.to_dict(),
        "meta": model.training_meta,
        "tensors": entries,
        "checksum": hashlib.sha256(data).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + data


def save_checkpoint(model: ToyTransformer, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path) -> ToyTransformer:
    with open(path, "rb") as fh:
        blob = fh.read()
    return checkpoint_from_bytes(blob, source=str(path))


def checkpoint_from_bytes(blob: bytes, source: str = "<bytes>") -> ToyTransformer:
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpointError(f"{source}: truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{source}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, this build reads version {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CorruptCheckpointError(f"{source}: truncated inside header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{source}: unreadable header: {exc}") from exc
    data = blob[start + hlen :]
    if hashlib.sha256(data).hexdigest() != header.get("checksum"):
        raise CorruptCheckpointError(f"{source}: checksum mismatch (truncated or modified data)")

    model = init_model(ModelConfig.from_dict(header["config"]))
    expected = model.state_dict()
    state = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected or tuple(expected[name].shape) != shape:
            raise CorruptCheckpointError(f"{source}: tensor {name} shape {shape} does not fit the config")
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    missing = set(expected) - set(state)
    if missing:
        raise CorruptCheckpointError(f"{source}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    model.training_meta = header.get("meta", {})
    return model.eval()
