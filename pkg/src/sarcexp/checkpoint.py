"""Single-file binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"SARCXCKP"
    version      u32
    config_len   u64, then config_len bytes of UTF-8 JSON (sorted keys)
    n_arrays     u32
    per array:   name_len u32, name, dtype_len u8, dtype str (numpy, e.g. "<f8"),
                 ndim u32, shape u64 * ndim, row-major payload
    digest       32 bytes SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"SARCXCKP"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = math.inf
    rng_state: Optional[np.ndarray] = None
    schema_version: int = SCHEMA_VERSION

    @property
    def vocab_tokens(self) -> list[str]:
        return list(self.config["vocab"])


_SECTIONS = (("param/", "params"), ("optim/", "optimizer"), ("best/", "best_params"))


def _to_le(a: np.ndarray) -> np.ndarray:
    a = np.require(a, requirements="C")  # ascontiguousarray would promote 0-d to 1-d
    if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def dumps(ckpt: Checkpoint) -> bytes:
    header = dict(ckpt.config)
    header["_epoch"] = int(ckpt.epoch)
    header["_best_val_loss"] = None if math.isinf(ckpt.best_val_loss) else float(ckpt.best_val_loss)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    arrays: list[tuple[str, np.ndarray]] = []
    for prefix, attr in _SECTIONS:
        for name in sorted(getattr(ckpt, attr)):
            arrays.append((prefix + name, getattr(ckpt, attr)[name]))
    if ckpt.rng_state is not None:
        arrays.append(("rng/state", np.asarray(ckpt.rng_state)))

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", ckpt.schema_version, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        arr = _to_le(np.asarray(arr))
        tag = arr.dtype.str.encode("ascii")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", len(tag)))
        buf.write(tag)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version > SCHEMA_VERSION:
        raise CheckpointVersionError(f"checkpoint schema version {version} is newer than supported {SCHEMA_VERSION}")
    if version < 1:
        raise CheckpointVersionError(f"invalid checkpoint schema version {version}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is truncated or corrupt (checksum mismatch)")
    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    (blob_len,) = r.unpack("<Q")
    try:
        config = json.loads(r.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    sections: dict[str, dict[str, np.ndarray]] = {attr: {} for _, attr in _SECTIONS}
    rng_state = None
    (n_arrays,) = r.unpack("<I")
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (tag_len,) = r.unpack("<B")
        dtype = np.dtype(r.take(tag_len).decode("ascii"))
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()
        if name == "rng/state":
            rng_state = arr
            continue
        for prefix, attr in _SECTIONS:
            if name.startswith(prefix):
                sections[attr][name[len(prefix) :]] = arr
                break
        else:
            raise CheckpointError(f"unknown array section in {name!r}")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    epoch = config.pop("_epoch", 0)
    best = config.pop("_best_val_loss", None)
    return Checkpoint(
        config=config,
        epoch=epoch,
        best_val_loss=math.inf if best is None else best,
        rng_state=rng_state,
        schema_version=version,
        **sections,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = dumps(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
