"""BSCK named-tensor container and model (de)serialization.

Layout, all little-endian::

    b"BSCK" | version u16 | count u32
    per tensor: name_len u16 | utf-8 name | dtype u8 | ndim u8 | dims u64 * ndim | payload
    crc32 u32 of every preceding byte
"""

from __future__ import annotations

import os
import re
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .layer import DenseLinear, FactorizedLinear, FinalizedLinear
from .model import ToyModel

MAGIC = b"BSCK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray], dtype="<f8") -> bytes:
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {dtype}")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(np.asarray(arr), dtype=dtype)
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name} has too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_CODES[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic("not a BSCK checkpoint (bad magic)")
    if len(blob) < 14:
        raise TruncatedCheckpoint(f"file is only {len(blob)} bytes")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}, expected {VERSION}")
    body, (stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    computed = zlib.crc32(body)
    if computed != stored:
        raise ChecksumMismatch(
            f"CRC32 mismatch over bytes [0, {len(body)}): stored {stored:#010x}, computed {computed:#010x}"
        )

    (count,) = struct.unpack_from("<I", body, 6)
    pos = 10
    out = {}

    def need(n):
        if pos + n > len(body):
            raise TruncatedCheckpoint(f"unexpected end of data at offset {pos} (need {n} bytes)")

    for _ in range(count):
        need(2)
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        need(name_len + 2)
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        if code not in DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        need(8 * ndim)
        dims = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        dt = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after last tensor")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray], dtype="<f8") -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    blob = encode_tensors(tensors, dtype)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def model_tensors(model: ToyModel) -> dict[str, np.ndarray]:
    t = {"meta.context": np.array([model.context], dtype=np.float64)}
    t.update({f"meta.{k}": np.array([v], dtype=np.float64) for k, v in model.meta.items()})
    t["embedding"] = model.embedding
    for i, blk in enumerate(model.blocks):
        t.update({f"blocks.{i}.{k}": v for k, v in blk.tensors().items()})
    t.update({f"head.{k}": v for k, v in model.head.tensors().items()})
    return t


_BLOCK = re.compile(r"blocks\.(\d+)\.(.+)")


def model_from_tensors(t: dict[str, np.ndarray]) -> ToyModel:
    f64 = {k: np.asarray(v, dtype=np.float64) for k, v in t.items()}
    grouped: dict[int, dict[str, np.ndarray]] = {}
    for name, arr in f64.items():
        m = _BLOCK.fullmatch(name)
        if m:
            grouped.setdefault(int(m.group(1)), {})[m.group(2)] = arr
    if sorted(grouped) != list(range(len(grouped))):
        raise CheckpointError(f"non-contiguous block indices {sorted(grouped)}")
    blocks = []
    for i in range(len(grouped)):
        g = grouped[i]
        if "base_u" in g:
            blocks.append(FactorizedLinear(g["base_u"], g["base_v"], g["weights"], g["extra_u"],
                                           g["extra_v"], g["bias"], g["basis_index"].astype(np.int64)))
        elif "first.weight" in g:
            blocks.append(FinalizedLinear(DenseLinear(g["first.weight"], g.get("first.bias")),
                                          DenseLinear(g["second.weight"], g.get("second.bias"))))
        elif "weight" in g:
            blocks.append(DenseLinear(g["weight"], g.get("bias")))
        else:
            raise CheckpointError(f"block {i} has unrecognized tensors {sorted(g)}")
    try:
        head = DenseLinear(f64["head.weight"], f64.get("head.bias"))
        meta = {k[5:]: float(v[0]) for k, v in f64.items() if k.startswith("meta.") and k != "meta.context"}
        return ToyModel(f64["embedding"], blocks, head, int(f64["meta.context"][0]), meta)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {exc}") from None


def save_checkpoint(path, model: ToyModel, dtype="<f8") -> None:
    save_tensors(path, model_tensors(model), dtype)


def load_checkpoint(path) -> ToyModel:
    return model_from_tensors(load_tensors(path))
