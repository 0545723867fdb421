"""Binary checkpoint format "NGT1".

Layout (all integers little-endian)::

    b"NGT1"  u16 version
    u32 metadata length, metadata as UTF-8 JSON
    u32 entry count
    per entry: u16 id length, id (UTF-8), u16 role length, role (UTF-8),
               u8 ndim, ndim x u32 dims
    payload: each entry's values as float32 LE, in entry order
    u64 checksum: BLAKE2b (8-byte digest) of every preceding byte

The checksum is verified before anything else is parsed, so a flipped byte
anywhere in the file is reported as a checksum failure.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NGT1"
VERSION = 1
ROLES = ("weight", "bias", "adam_m", "adam_v")


class CheckpointError(ValueError):
    pass


def _digest(data) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _put_str(out: list, s: str):
    b = s.encode("utf-8")
    out.append(struct.pack("<H", len(b)))
    out.append(b)


def encode(entries, meta=None) -> bytes:
    """Serialize ``[(id, role, array), ...]`` plus a JSON-able ``meta`` dict."""
    head = [MAGIC, struct.pack("<H", VERSION)]
    mb = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    head += [struct.pack("<I", len(mb)), mb, struct.pack("<I", len(entries))]
    payload = []
    for name, role, arr in entries:
        if role not in ROLES:
            raise CheckpointError(f"unknown role tag {role!r} for {name}")
        arr = np.asarray(arr)
        _put_str(head, name)
        _put_str(head, role)
        head.append(struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(head) + b"".join(payload)
    return body + _digest(body)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode(data: bytes):
    """Inverse of :func:`encode`; returns ``(entries, meta)``."""
    if len(data) < len(MAGIC) + 2 + 8 or data[:4] != MAGIC:
        raise CheckpointError("bad magic: not an NGT1 checkpoint")
    body, tail = data[:-8], data[-8:]
    if _digest(body) != tail:
        raise CheckpointError(
            f"checksum mismatch: stored {tail.hex()}, computed {_digest(body).hex()}")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    manifest = []
    for _ in range(count):
        name, role = r.string(), r.string()
        (ndim,) = r.unpack("<B")
        manifest.append((name, role, r.unpack(f"<{ndim}I")))
    entries = []
    for name, role, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        entries.append((name, role, arr))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after payload")
    return entries, meta


def save(path, entries, meta=None) -> None:
    """Write atomically: a temporary sibling file is renamed into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(entries, meta))
    os.replace(tmp, path)


def load(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    try:
        return decode(data)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def param_role(name: str) -> str:
    return "bias" if name.endswith(".bias") else "weight"


def model_entries(model):
    return [(p.name, param_role(p.name), p.value) for p in model.params]


def assign_params(params, entries) -> None:
    """Copy checkpoint arrays into ``params`` after checking names and shapes."""
    by_name = {name: arr for name, role, arr in entries if role in ("weight", "bias")}
    missing = [p.name for p in params if p.name not in by_name]
    if missing:
        raise CheckpointError("checkpoint lacks parameters: " + ", ".join(missing[:5]))
    extra = sorted(set(by_name) - {p.name for p in params})
    if extra:
        raise CheckpointError("checkpoint has unexpected parameters: " + ", ".join(extra[:5]))
    for p in params:
        arr = by_name[p.name]
        if arr.shape != p.value.shape:
            raise CheckpointError(f"shape mismatch for {p.name}: checkpoint {arr.shape}, model {p.value.shape}")
        p.value[...] = arr


def save_model(path, model, meta=None) -> None:
    meta = dict(meta or {})
    meta["model"] = model.cfg.to_dict()
    save(path, model_entries(model), meta)


def load_model(path):
    """Rebuild a :class:`~ngdenoise.model.TwoStageDenoiser` from a checkpoint."""
    from .model import ModelConfig, TwoStageDenoiser

    entries, meta = load(path)
    try:
        cfg = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing or invalid model configuration ({exc})") from None
    model = TwoStageDenoiser(cfg, seed=None)
    assign_params(model.params, entries)
    return model, meta
