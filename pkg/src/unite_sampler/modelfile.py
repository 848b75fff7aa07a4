"""Binary container for trained :class:`MlpExpert` weights.

Layout, all little-endian::

    b"UDME"                      magic
    u32 version                  currently 1
    u32 n_layers, u32 dims[n]    layer widths, input first
    u32 rows, u32 cols, f64[...] label-embedding table, row-major
    for each layer: f64 weight[in*out] (row-major, (in, out)), f64 bias[out]
    u64 checksum                 first 8 bytes of BLAKE2b-64 over everything above

The timestep-embedding width is implied: ``dims[0] - dims[-1] - cols``.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .experts import MlpExpert

__all__ = ["MAGIC", "VERSION", "ModelFileError", "dumps", "loads", "save", "load"]

MAGIC = b"UDME"
VERSION = 1


class ModelFileError(ValueError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def dumps(expert: MlpExpert) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(expert.layer_dims))]
    parts.append(struct.pack(f"<{len(expert.layer_dims)}I", *expert.layer_dims))
    emb = expert.label_embeddings
    parts.append(struct.pack("<II", *emb.shape))
    parts.append(np.ascontiguousarray(emb, dtype="<f8").tobytes())
    for w, b in zip(expert.weights, expert.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + _checksum(payload)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFileError("model file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def f64(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def loads(data: bytes) -> MlpExpert:
    if len(data) < len(MAGIC) + 12:
        raise ModelFileError("model file is truncated")
    if data[:4] != MAGIC:
        raise ModelFileError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    payload, stored = data[:-8], data[-8:]
    if _checksum(payload) != stored:
        raise ModelFileError("model file checksum mismatch: file is corrupt or was modified")
    r = _Reader(payload)
    r.take(4)
    (version,) = r.u32()
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    (n_layers,) = r.u32()
    if n_layers < 2:
        raise ModelFileError("model needs at least two layer widths")
    dims = r.u32(n_layers)
    rows, cols = r.u32(2)
    emb = r.f64((rows, cols))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(r.f64((fan_in, fan_out)))
        biases.append(r.f64((fan_out,)))
    if r.pos != len(payload):
        raise ModelFileError(f"{len(payload) - r.pos} unexpected trailing bytes")
    temb = dims[0] - dims[-1] - cols
    if temb < 0:
        raise ModelFileError("layer widths inconsistent with the embedding table")
    try:
        return MlpExpert(dims, weights, biases, emb, temb_dim=temb)
    except ValueError as exc:
        raise ModelFileError(str(exc)) from exc


def save(expert: MlpExpert, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(expert))


def load(path) -> MlpExpert:
    with open(path, "rb") as fh:
        return loads(fh.read())
