"""Binary checkpoint container.

Layout (little-endian)::

    b"FFCN" | u32 version | u32 entry count
    per entry: u32 path length | path (utf-8) | u8 dtype tag | u32 rank
               | u64 extents[rank] | raw values

Optimizer velocity lives under ``opt/velocity/<path>`` and the step count
under ``opt/step``. Non-numeric metadata is stored as utf-8 JSON in ``u8``
entries under ``meta/``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .params import ParameterStore

MAGIC = b"FFCN"
VERSION = 1

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_OF = {np.dtype(v).str: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def write_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
            arr = arr.astype("<i8")
        tag = _TAG_OF.get(arr.dtype.str)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an FFCN checkpoint")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode("utf-8")
            off += n
            tag, rank = struct.unpack_from("<BI", data, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            if tag not in _TAGS:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
            dt = _TAGS[tag]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(data):
                raise CheckpointError(f"{path}: truncated while reading {name!r}")
            out[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).copy()
            off += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return out


def encode_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def decode_json(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))


def store_to_arrays(store: ParameterStore) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for p, t in store.entries.items():
        arrays[p] = t.data
    for p, v in store.velocity.items():
        arrays[f"opt/velocity/{p}"] = v
    arrays["opt/step"] = np.array([store.step_count], dtype=np.int64)
    return arrays


def store_from_arrays(arrays: dict[str, np.ndarray], precision: str | None = None) -> ParameterStore:
    params = {k: v for k, v in arrays.items() if "/" not in k}
    if precision is None:
        kinds = {v.dtype for v in params.values()}
        precision = "float32" if kinds == {np.dtype("<f4")} else "float64"
    store = ParameterStore(precision)
    for p, v in params.items():
        store.add(p, v)
        vel = arrays.get(f"opt/velocity/{p}")
        if vel is not None:
            store.velocity[p] = vel.astype(store.dtype)
    if "opt/step" in arrays:
        store.step_count = int(arrays["opt/step"][0])
    return store
