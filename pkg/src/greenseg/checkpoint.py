"""The ``GSEG`` tensor container.

Little-endian layout::

    b"GSEG"  u32 version  u32 record_count
    record_count x ( u32 name_len, name (UTF-8), u8 dtype_code, u8 rank,
                     rank x u64 extent, payload )

Payloads are raw C-order element bytes.  dtype codes: 1 = f32, 2 = i8,
3 = u8 (used for the JSON metadata record), 4 = i32, 5 = f64.
"""
from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

MAGIC = b"GSEG"
VERSION = 1
META_KEY = "__meta__"

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("i1"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i4"): 4,
    np.dtype("<f8"): 5,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    records = dict(tensors)
    if meta is not None:
        records[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(records)))
    for name, arr in records.items():
        arr = np.asarray(arr)
        code = DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(data: bytes):
    """Return ``(tensors, meta)``."""
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a GSEG container (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    off = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off:off + n]).decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BB", view, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}Q", view, off)
            off += 8 * rank
            dt = CODE_DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(view):
                raise CheckpointError(f"record {name!r} truncated")
            tensors[name] = np.frombuffer(view[off:off + size], dtype=dt).reshape(shape).copy()
            off += size
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt container: {exc}") from None
    meta = None
    if META_KEY in tensors:
        meta = json.loads(tensors.pop(META_KEY).tobytes().decode())
    return tensors, meta


def save(path, tensors: dict, meta: dict | None = None) -> int:
    data = dumps(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load(path):
    with open(os.fspath(path), "rb") as fh:
        return loads(fh.read())


# -- model / optimizer / dataset helpers ----------------------------------

def save_model(path, model, optimizer=None, extra_meta: dict | None = None) -> int:
    tensors = {f"param/{k}": np.asarray(v, np.float32) for k, v in model.params.items()}
    tensors.update({f"buffer/{k}": np.asarray(v, np.float32) for k, v in model.buffers.items()})
    meta = {"kind": "model", "spec": model.spec.to_dict() if model.spec else None}
    if optimizer is not None:
        tensors.update({f"optim/{k}": np.asarray(v, np.float32) for k, v in optimizer.buffers().items()})
        meta["optimizer"] = optimizer.hyperparameters()
    meta.update(extra_meta or {})
    return save(path, tensors, meta)


def split_prefixed(tensors: dict, prefix: str) -> dict:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def save_dataset(path, pairs) -> int:
    images = np.stack([p.image for p in pairs]).astype(np.float32) if pairs else np.zeros((0, 1, 1), np.float32)
    masks = np.stack([p.mask for p in pairs]).astype(np.float32) if pairs else np.zeros((0, 1, 1), np.float32)
    meta = {"kind": "dataset",
            "index": [[p.patient_id, p.volume_index, p.slice_index] for p in pairs]}
    return save(path, {"images": images, "masks": masks}, meta)


def load_dataset(path):
    from .data.types import SlicePair

    tensors, meta = load(path)
    return [SlicePair(img, m, pid, int(v), int(s))
            for img, m, (pid, v, s) in zip(tensors["images"], tensors["masks"], meta["index"])]


def load_model(path):
    """Rebuild a model saved by ``save_model`` (pruned widths are kept)."""
    from .models import ArchSpec, build_model

    tensors, meta = load(path)
    if meta.get("kind") != "model" or not meta.get("spec"):
        raise CheckpointError(f"{path} is not a model checkpoint")
    model = build_model(ArchSpec(**meta["spec"]))
    params, buffers = split_prefixed(tensors, "param"), split_prefixed(tensors, "buffer")
    if set(params) != set(model.params) or set(buffers) != set(model.buffers):
        raise CheckpointError(f"{path}: tensor names do not match the recorded architecture")
    model.params.clear()
    model.params.update(params)
    model.buffers.clear()
    model.buffers.update(buffers)
    model.invalidate()
    return model, meta
