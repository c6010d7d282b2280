"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"GRCLCKPT"                  magic, 8 bytes
    u32  version                 currently 1
    u32  n, n bytes              UTF-8 JSON header: network config, config
                                 digest, optimizer hyperparameters, frozen
                                 names, caller extras
    3 x tensor section           parameters, BN running stats, momentum buffers
        u32 count
        count x record:
            u16 name length, name (UTF-8)
            u8  ndim, ndim x u32 dims
            prod(dims) x f64 data
    u32  n, n bytes              JSON bit-generator state
    u64  epoch counter
    u32  CRC-32 of everything above

Loading reads and validates the whole file before anything is applied.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import ShapeError
from .network import GrcnnConfig, Network, build_grcnn

MAGIC = b"GRCLCKPT"
VERSION = 1

__all__ = [
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "restore",
]


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic, corrupted body or malformed record."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    """Stored tensors do not fit the target network."""


@dataclass
class Checkpoint:
    header: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    rng_state: dict
    epoch: int

    @property
    def config(self) -> GrcnnConfig:
        return GrcnnConfig.from_dict(self.header["config"])

    def build_network(self) -> Network:
        net = build_grcnn(self.config, 0)
        net.load_state_arrays({**self.params, **self.buffers})
        net.frozen = frozenset(self.header.get("frozen", []))
        return net


def _write_section(buf, arrays: dict):
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())


def save_checkpoint(state, path, extra: dict | None = None) -> Path:
    """Write ``state`` (a ``TrainState``) atomically to ``path``."""
    net, opt = state.net, state.opt
    header = {
        "config": net.config.to_dict(),
        "digest": net.config.digest(),
        "optimizer": opt.hyper(),
        "frozen": sorted(net.frozen),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    blob = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)) + blob)
    _write_section(buf, net.parameters())
    _write_section(buf, net.buffers())
    _write_section(buf, opt.buffers)
    rng_blob = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(rng_blob)) + rng_blob)
    buf.write(struct.pack("<Q", state.epoch))
    body = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def section(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (ln,) = self.unpack("<H")
            try:
                name = self.take(ln).decode()
            except UnicodeDecodeError as e:
                raise CheckpointFormatError(f"bad tensor name: {e}") from None
            (ndim,) = self.unpack("<B")
            if ndim > 8:
                raise CheckpointFormatError(f"tensor {name!r}: implausible rank {ndim}")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if shape else 1
            if name in out:
                raise CheckpointFormatError(f"duplicate tensor {name!r}")
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
    try:
        (n,) = r.unpack("<I")
        header = json.loads(r.take(n))
        params, buffers, momentum = r.section(), r.section(), r.section()
        (n,) = r.unpack("<I")
        rng_state = json.loads(r.take(n))
        (epoch,) = r.unpack("<Q")
        body_end = r.pos
        (crc,) = r.unpack("<I")
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupted JSON block: {e}") from None
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    if zlib.crc32(data[:body_end]) != crc:
        raise CheckpointFormatError(f"{path}: checksum mismatch")
    return Checkpoint(header, params, buffers, momentum, rng_state, int(epoch))


def restore(state, ckpt: Checkpoint, *, strict_config: bool = True):
    """Apply ``ckpt`` to a ``TrainState`` in place.

    Every name and shape is validated first; on any mismatch nothing is
    modified.
    """
    net, opt = state.net, state.opt
    if strict_config and ckpt.header.get("digest") != net.config.digest():
        raise CheckpointShapeError(
            f"checkpoint config digest {ckpt.header.get('digest')} does not match network {net.config.digest()}"
        )
    own = net.state_arrays()
    stored = {**ckpt.params, **ckpt.buffers}
    if set(own) != set(stored):
        missing = sorted(set(own) - set(stored))[:3]
        extra = sorted(set(stored) - set(own))[:3]
        raise CheckpointShapeError(f"tensor names differ: missing {missing}, unexpected {extra}")
    params = net.parameters()
    for name, arr in stored.items():
        if arr.shape != own[name].shape:
            raise CheckpointShapeError(f"{name}: stored {arr.shape} vs network {own[name].shape}")
    for name, arr in ckpt.momentum.items():
        if name not in params or arr.shape != params[name].shape:
            raise CheckpointShapeError(f"momentum buffer {name} does not match any parameter")
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = ckpt.rng_state
    except (TypeError, ValueError, KeyError) as e:
        raise CheckpointFormatError(f"unusable RNG state: {e}") from None

    net.load_state_arrays(stored)
    net.frozen = frozenset(ckpt.header.get("frozen", []))
    hyper = ckpt.header.get("optimizer", {})
    opt.lr = hyper.get("lr", opt.lr)
    opt.momentum = hyper.get("momentum", opt.momentum)
    opt.weight_decay = hyper.get("weight_decay", opt.weight_decay)
    opt.buffers = {k: v.copy() for k, v in ckpt.momentum.items()}
    state.rng = rng
    state.epoch = ckpt.epoch
    return state
