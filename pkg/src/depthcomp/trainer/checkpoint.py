"""Binary checkpoint format.

Layout (little-endian): magic ``DPGN``, u32 format version, 32-byte SHA-256
config hash, u32 entry count, then per entry in name order: u16 name length,
UTF-8 name, u8 rank (always 4), 4 x u32 extents, float32 values.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ..errors import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"DPGN"
FORMAT_VERSION = 1
HASH_BYTES = 32


@dataclass
class Checkpoint:
    entries: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    config_hash: bytes = b"\x00" * HASH_BYTES

    def __post_init__(self):
        if len(self.config_hash) != HASH_BYTES:
            raise CheckpointError(f"config hash must be {HASH_BYTES} bytes")
        self.entries = OrderedDict(sorted((k, np.asarray(v, dtype="<f4")) for k, v in self.entries.items()))
        for name, value in self.entries.items():
            if value.ndim != 4:
                raise CheckpointError(f"entry {name} has rank {value.ndim}; entries are rank 4")

    def subset(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k[len(prefix):], v) for k, v in self.entries.items() if k.startswith(prefix))


def config_hash(payload) -> bytes:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(text.encode()).digest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), ckpt.config_hash, struct.pack("<I", len(ckpt.entries))]
    for name, value in ckpt.entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B4I", 4, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes, {len(view) - pos} remain")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "format version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    digest = bytes(take(HASH_BYTES, "config hash"))
    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries = OrderedDict()
    for i in range(count):
        label = f"entry #{i + 1} of {count}"
        (name_len,) = struct.unpack("<H", take(2, f"{label} name length"))
        name = bytes(take(name_len, f"{label} name")).decode("utf-8")
        label = f"entry '{name}' (#{i + 1} of {count})"
        rank, *shape = struct.unpack("<B4I", take(17, f"{label} header"))
        if rank != 4:
            raise CheckpointError(f"{label}: rank {rank}, expected 4")
        n = int(np.prod(shape))
        values = np.frombuffer(take(4 * n, f"{label} values"), dtype="<f4").reshape(shape)
        entries[name] = values.astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after {count} entries")
    return Checkpoint(entries, digest)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    return from_bytes(blob)


def restore_networks(ckpt: Checkpoint, networks, expected_hash: Optional[bytes] = None) -> None:
    """Load network parameters; a hash mismatch only warns, a shape mismatch raises ShapeError."""
    if expected_hash is not None and expected_hash != ckpt.config_hash:
        logger.warning("checkpoint config hash differs from the current configuration")
    state = OrderedDict()
    for prefix, module in networks.named_modules():
        sub = ckpt.subset(prefix + ".")
        own = dict(module.named_parameters())
        missing = sorted(set(own) - set(sub))
        unexpected = sorted(set(sub) - set(own))
        if missing or unexpected:
            raise ShapeError(f"{prefix}: checkpoint does not match network (missing {missing[:3]}, unexpected {unexpected[:3]})")
        for name, value in sub.items():
            if value.shape != own[name].shape:
                raise ShapeError(f"{prefix}.{name}: checkpoint shape {value.shape} vs network shape {own[name].shape}")
            state[f"{prefix}.{name}"] = value
    networks.load_state(state)


def networks_checkpoint(networks, digest: bytes = b"\x00" * HASH_BYTES, extra: Optional[Mapping] = None) -> Checkpoint:
    entries = OrderedDict(networks.state())
    if extra:
        entries.update(extra)
    return Checkpoint(entries, digest)
