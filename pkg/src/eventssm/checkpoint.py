"""Single-file tensor container.

Layout (all integers little-endian)::

    magic    8 bytes  b"EVSSMCKP"
    version  u32
    meta     u64 length + canonical JSON (sorted keys, compact)
    count    u32
    tensor*  u16 name length, name (utf-8),
             u8 dtype length, numpy dtype string (e.g. "<f4"),
             u8 ndim, u64 * ndim shape, u64 nbytes, raw C-order data
    crc32    u32 over everything above

Writing the same tensors and metadata always yields the same bytes, and
files are replaced atomically (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .model import ModelWeights
from .training import TrainState

MAGIC = b"EVSSMCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = _canonical_json(meta)
    parts += [struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        # astype, not ascontiguousarray: the latter turns 0-d arrays into 1-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), order="C", copy=False)
        name_b = name.encode()
        dtype_b = arr.dtype.str.encode()
        parts.append(struct.pack("<H", len(name_b)) + name_b)
        parts.append(struct.pack("<B", len(dtype_b)) + dtype_b)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes()
        parts.append(struct.pack("<Q", len(data)) + data)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < len(MAGIC) + 4 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad header magic")
    (version,) = struct.unpack_from("<I", buf, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    try:
        pos = len(MAGIC) + 4
        (meta_len,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        meta = json.loads(buf[pos:pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            (n,) = struct.unpack_from("<B", buf, pos)
            dtype = np.dtype(buf[pos + 1:pos + 1 + n].decode())
            pos += 1 + n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos + 1)
            pos += 1 + 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            tensors[name] = np.frombuffer(buf[pos:pos + nbytes], dtype).reshape(shape).copy()
            pos += nbytes
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, meta


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    data = encode(tensors, meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Training state
# --------------------------------------------------------------------------


def save_train_state(path: str | os.PathLike, state: TrainState, config: dict, epoch: int) -> None:
    """Weights, Adam moments, step, epoch, RNG state and the run config."""
    tensors = {}
    for prefix, group in (("weights", state.weights.named_tensors()), ("adam.m", state.m), ("adam.v", state.v)):
        tensors.update({f"{prefix}/{k}": v for k, v in group.items()})
    meta = {
        "format": "eventssm-train-state",
        "config": config,
        "epoch": int(epoch),
        "step": int(state.step),
        "num_layers": len(state.weights.layers),
        "rng": state.rng.bit_generator.state,
    }
    save_checkpoint(path, tensors, meta)


def _restore_rng(rng_state: dict) -> np.random.Generator:
    try:
        bitgen = getattr(np.random, rng_state["bit_generator"])()
        bitgen.state = rng_state
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"cannot restore RNG state: {exc}") from None
    return np.random.Generator(bitgen)


def load_train_state(path: str | os.PathLike) -> tuple[TrainState, dict, int]:
    """Inverse of :func:`save_train_state`; returns ``(state, config, epoch)``."""
    tensors, meta = load_checkpoint(path)
    if meta.get("format") != "eventssm-train-state":
        raise CheckpointError(f"{path}: not a training checkpoint")
    groups = {"weights": {}, "adam.m": {}, "adam.v": {}}
    for name, arr in tensors.items():
        prefix, _, key = name.partition("/")
        if prefix not in groups:
            raise CheckpointError(f"unexpected tensor {name!r}")
        groups[prefix][key] = arr
    try:
        weights = ModelWeights.from_named(groups["weights"], meta["num_layers"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"inconsistent weights: {exc}") from None
    if not (groups["weights"].keys() == groups["adam.m"].keys() == groups["adam.v"].keys()):
        raise CheckpointError("optimizer moments do not mirror weights")
    state = TrainState(weights, groups["adam.m"], groups["adam.v"], int(meta["step"]), _restore_rng(meta["rng"]))
    return state, meta["config"], int(meta["epoch"])
