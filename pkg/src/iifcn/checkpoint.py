"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IIFCN1"
    u32 config length, config as UTF-8 JSON
    u32 parameter count
    per parameter: u16 id length, id (UTF-8), u8 ndim, ndim × u32 extents,
                   float64 values in C order
    u64 checksum: BLAKE2b-64 of every byte between the magic and the checksum
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .errors import CorruptCheckpointError
from .model import Model, ModelConfig, init_parameters

MAGIC = b"IIFCN1"


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def config_to_json(cfg: ModelConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)


def config_from_json(text: str) -> ModelConfig:
    d = json.loads(text)
    d["widths"] = tuple(d["widths"])
    d["head"] = tuple(tuple(h) for h in d["head"])
    if d.get("branch_channels") is not None:
        d["branch_channels"] = tuple(d["branch_channels"])
    return ModelConfig(**d)


def dumps(model: Model) -> bytes:
    parts = []
    cfg = config_to_json(model.config).encode()
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    parts.append(struct.pack("<I", len(model.params)))
    for pid, p in model.params.items():
        name = pid.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<Q", _checksum(payload))


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes, expected: ModelConfig | None = None) -> Model:
    if len(buf) < len(MAGIC) + 8 or buf[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not an II-FCN checkpoint (bad magic or too short)")
    payload, tail = buf[len(MAGIC):-8], buf[-8:]
    if struct.unpack("<Q", tail)[0] != _checksum(payload):
        raise CorruptCheckpointError("checksum mismatch (file corrupt or truncated)")
    r = _Reader(payload)
    (n,) = r.unpack("<I")
    try:
        cfg = config_from_json(r.take(n).decode())
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptCheckpointError(f"unreadable model config: {exc}") from exc
    if expected is not None and expected != cfg:
        cfg = expected
    reference = init_parameters(cfg, seed=0)
    (count,) = r.unpack("<I")
    expected_entries = list(reference.items())
    params = {}
    for i in range(count):
        (ln,) = r.unpack("<H")
        pid = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if i >= len(expected_entries):
            raise CorruptCheckpointError(
                f"shape table mismatch at {pid!r} {tuple(shape)}: config has only {len(expected_entries)} parameters"
            )
        ref_id, ref = expected_entries[i]
        if pid != ref_id or tuple(shape) != ref.shape:
            raise CorruptCheckpointError(
                f"shape table mismatch at {pid!r} {tuple(shape)}: config expects {ref_id!r} {ref.shape}"
            )
        size = int(np.prod(shape))
        values = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
        params[pid] = Parameter(values.astype(np.float64), pid)
    if count != len(expected_entries):
        missing = expected_entries[count][0]
        raise CorruptCheckpointError(
            f"shape table mismatch: file has {count} parameters, config needs {len(expected_entries)} "
            f"(first missing {missing!r})"
        )
    if r.pos != len(payload):
        raise CorruptCheckpointError("trailing bytes after parameter table")
    return Model(cfg, params)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Model:
    """Read a checkpoint; with ``expected`` the shape table is checked against that config."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf, expected)
