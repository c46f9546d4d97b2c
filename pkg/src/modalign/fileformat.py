"""Binary tensor container ("MKAT") and the files built from it.

Layout of one tensor, all little-endian::

    b"MKAT" | u16 version | u8 dtype (1=f64, 2=i64) | u8 rank | rank x u64 dims | payload

Files hold one or more tensors back to back. Checkpoints start with an i64
dims tensor ``[input, embed, hidden, classes, depth]`` followed by every
parameter in canonical block/key order. Datasets are ``inputs, labels,
[classes]``; logit tables are ``logits, labels, [classes]``.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .models import Dims, ModelParams, block_shapes

MAGIC = b"MKAT"
VERSION = 1
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODES = {np.dtype("<f8"): 1, np.dtype("<i8"): 2}


class FormatError(ValueError):
    """File is not a valid MKAT container or does not hold what was expected."""


def write_tensor(stream, array) -> None:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8", copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype("<i8", copy=False)
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank above 255")
    stream.write(MAGIC + struct.pack("<HBB", VERSION, CODES[arr.dtype], arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(np.ascontiguousarray(arr).tobytes(order="C"))


def _read_exact(stream, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: expected {n} bytes of {what}, got {len(data)}")
    return data


def read_tensor(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not an MKAT tensor")
    version, code, rank = struct.unpack("<HBB", _read_exact(stream, 4, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported MKAT version {version} (this build reads {VERSION})")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "dims"))
    dtype = DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(stream, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_tensors(path, arrays) -> None:
    """Write atomically so an interrupted run never leaves a half file."""
    path = Path(path)
    buf = io.BytesIO()
    for a in arrays:
        write_tensor(buf, a)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_tensors(path) -> list[np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    data = path.read_bytes()
    stream = io.BytesIO(data)
    out = []
    while stream.tell() < len(data):
        try:
            out.append(read_tensor(stream))
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return out


# ------------------------------------------------------------- checkpoints

def save_params(path, params: ModelParams) -> None:
    d = params.dims
    arrays = [np.array(d.as_tuple(), dtype=np.int64)]
    for name, shapes in block_shapes(d).items():
        block = params.blocks()[name]
        arrays.extend(block[k] for k in shapes)
    write_tensors(path, arrays)


def load_params(path) -> ModelParams:
    arrays = read_tensors(path)
    if not arrays or arrays[0].dtype.kind != "i" or arrays[0].shape != (5,):
        raise FormatError(f"{path}: checkpoint must start with a 5-entry i64 dims tensor")
    dims = Dims(*(int(v) for v in arrays[0]))
    shapes = block_shapes(dims)
    expected = sum(len(s) for s in shapes.values())
    if len(arrays) - 1 != expected:
        raise FormatError(f"{path}: expected {expected} parameter tensors, found {len(arrays) - 1}")
    it = iter(arrays[1:])
    blocks = {}
    for name, block_shape in shapes.items():
        blocks[name] = {}
        for key, shape in block_shape.items():
            arr = next(it)
            if arr.shape != shape or arr.dtype.kind != "f":
                raise FormatError(f"{path}: {name}.{key} has shape {arr.shape}, dims require {shape}")
            blocks[name][key] = arr
    return ModelParams(dims, **blocks)


# ---------------------------------------------------------------- datasets

def save_dataset(path, data) -> None:
    write_tensors(path, [data.inputs, data.labels, np.array([data.classes], dtype=np.int64)])


def load_dataset(path, modality: str = "file"):
    from .synthdata import Dataset

    arrays = read_tensors(path)
    if len(arrays) != 3 or arrays[0].ndim != 2 or arrays[1].ndim != 1:
        raise FormatError(f"{path}: dataset needs inputs (rank 2), labels (rank 1), classes")
    if arrays[0].shape[0] != arrays[1].shape[0]:
        raise FormatError(f"{path}: {arrays[0].shape[0]} inputs but {arrays[1].shape[0]} labels")
    return Dataset(arrays[0], arrays[1], int(arrays[2][0]), modality, {"path": str(path)})


def save_logit_table(path, table) -> None:
    write_tensors(path, [table.logits, table.labels, np.array([table.classes], dtype=np.int64)])


def load_logit_table(path):
    from .discrepancy import LogitTable

    arrays = read_tensors(path)
    if len(arrays) != 3 or arrays[0].ndim != 2 or arrays[1].ndim != 1:
        raise FormatError(f"{path}: logit table needs logits (rank 2), labels (rank 1), classes")
    if arrays[0].shape[0] != arrays[1].shape[0]:
        raise FormatError(f"{path}: {arrays[0].shape[0]} logit rows but {arrays[1].shape[0]} labels")
    return LogitTable(arrays[0], arrays[1], int(arrays[2][0]))
