"""Binary checkpoint container for named tensors plus JSON metadata.

Layout (all integers little-endian)::

    b"IIEL" | u32 version | u64 meta_len | meta (UTF-8 JSON) | u32 n_tensors
    n_tensors x { u16 name_len | name | 3s dtype tag | u8 ndim | ndim x u64 dim | u64 offset | u64 nbytes }
    payload bytes (offsets are relative to the payload start)

The metadata JSON carries a ``digest`` field: the sha256 of the canonical
encoding of every other metadata field and the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"IIEL"
VERSION = 1
DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i32": np.dtype("<i4")}
_TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def _canonical(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _digest(meta: dict, payload: bytes) -> str:
    h = hashlib.sha256(_canonical({k: v for k, v in meta.items() if k != "digest"}))
    h.update(payload)
    return h.hexdigest()


def encode(tensors: dict, metadata: dict | None = None) -> bytes:
    """Serialize ``name -> array`` (sorted by name) and ``metadata`` to bytes."""
    metadata = dict(metadata or {})
    metadata.pop("digest", None)
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(getattr(tensors[name], "data", tensors[name]))
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAG_OF:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append((name, _TAG_OF[dt], arr.shape, offset, len(raw)))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    metadata["digest"] = _digest(metadata, payload)
    meta = _canonical(metadata)
    out = [MAGIC, struct.pack("<IQ", VERSION, len(meta)), meta, struct.pack("<I", len(table))]
    for name, tag, shape, off, nbytes in table:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + tag.encode("ascii") + struct.pack("<B", len(shape)))
        out.append(struct.pack(f"<{len(shape)}Q", *shape) + struct.pack("<QQ", off, nbytes))
    out.append(payload)
    return b"".join(out)


def decode(blob: bytes) -> tuple[dict, dict]:
    """Inverse of :func:`encode`; validates bounds and the metadata digest."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not an IIEL checkpoint")
    version, meta_len = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        metadata = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata: {e}") from None
    (n,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(n):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        tag = take(3).decode("ascii")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag!r}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        off, nbytes = struct.unpack("<QQ", take(16))
        table.append((name, tag, shape, off, nbytes))
    payload = bytes(view[pos:])
    spans = sorted((off, off + nbytes, name) for name, _, _, off, nbytes in table)
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"tensors {an!r} and {bn!r} overlap")
    tensors = {}
    for name, tag, shape, off, nbytes in table:
        dt = DTYPE_TAGS[tag]
        if off + nbytes > len(payload) or nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"tensor {name!r}: payload span out of bounds")
        tensors[name] = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).astype(dt.newbyteorder("="))
    if metadata.get("digest") != _digest(metadata, payload):
        raise CheckpointError("metadata digest mismatch")
    return tensors, metadata


def save(path, tensors: dict, metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(tensors, metadata))


def load(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_model(path, params: dict, run_config: dict, schedule, step: int = 0, metrics_csv: str = "") -> None:
    """Checkpoint a model with its resolved run config and iteration schedule inline."""
    meta = {
        "run_config": run_config,
        "schedule": list(schedule.r),
        "step": int(step),
        "metrics_digest": hashlib.sha256(metrics_csv.encode("utf-8")).hexdigest(),
    }
    save(path, {k: p.data for k, p in params.items()}, meta)


def load_model(path):
    """Return ``(params, model_config, schedule, metadata)`` from a model checkpoint."""
    from . import tensor as T
    from .model import IterationSchedule, ModelConfig

    arrays, meta = load(path)
    try:
        config = ModelConfig.from_dict(meta["run_config"]["model"])
        schedule = IterationSchedule(tuple(meta["schedule"]))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint metadata lacks a model description: {e}") from None
    params = {k: T.parameter(v, dtype=v.dtype, name=k) for k, v in arrays.items()}
    return params, config, schedule, meta
