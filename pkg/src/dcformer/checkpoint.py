"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DCFW"  uint32 version
    uint32 n  + n bytes UTF-8 config text (flat key = value lines)
    uint32 n  + n bytes UTF-8 manifest ("<kind> <name> <d0>x<d1>..." per line)
    float32 blocks for every manifest entry, in manifest order
    uint32 epoch  uint64 step
    uint32 n  + n bytes UTF-8 RNG state text

``kind`` is ``param``, ``buffer`` or ``momentum``. Values are stored as
32-bit floats; a load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ManifestError

MAGIC = b"DCFW"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    epoch: int
    step: int
    rng_state: str = ""


def _shape_str(shape) -> str:
    return "x".join(str(int(s)) for s in shape) if len(shape) else "scalar"


def _parse_shape(s: str) -> tuple:
    return () if s == "scalar" else tuple(int(x) for x in s.split("x"))


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = [("param", k, v) for k, v in ckpt.params.items()]
    entries += [("buffer", k, v) for k, v in ckpt.buffers.items()]
    entries += [("momentum", k, v) for k, v in ckpt.momentum.items()]
    manifest = "".join(f"{kind} {name} {_shape_str(np.shape(v))}\n" for kind, name, v in entries)
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(ckpt.config_text), _blob(manifest)]
    for _, _, v in entries:
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    parts.append(struct.pack("<IQ", ckpt.epoch, ckpt.step))
    parts.append(_blob(ckpt.rng_state))
    return b"".join(parts)


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ManifestError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def from_bytes(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise ManifestError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ManifestError(f"unsupported checkpoint version {version}")
    config_text = r.text()
    manifest = r.text()
    groups = {"param": {}, "buffer": {}, "momentum": {}}
    for line in manifest.splitlines():
        try:
            kind, name, shape_s = line.split(" ")
            shape = _parse_shape(shape_s)
        except ValueError:
            raise ManifestError(f"bad manifest line: {line!r}") from None
        if kind not in groups:
            raise ManifestError(f"unknown manifest entry kind {kind!r}")
        count = int(np.prod(shape)) if shape else 1
        block = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        groups[kind][name] = block.astype(np.float64)
    epoch, step = r.unpack("<IQ")
    rng_state = r.text()
    if r.pos != len(raw):
        raise ManifestError("trailing bytes after checkpoint payload")
    return Checkpoint(config_text, groups["param"], groups["buffer"], groups["momentum"],
                      epoch, step, rng_state)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def check_manifest(ckpt: Checkpoint, param_shapes: dict, buffer_shapes: dict) -> None:
    """Raise ManifestError unless the checkpoint holds exactly the expected tensors."""
    for label, have, want in (("parameter", ckpt.params, param_shapes),
                              ("buffer", ckpt.buffers, buffer_shapes)):
        if list(have) != list(want):
            missing = sorted(set(want) - set(have))
            extra = sorted(set(have) - set(want))
            raise ManifestError(f"{label} names differ: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, shape in want.items():
            if tuple(have[name].shape) != tuple(shape):
                raise ManifestError(f"{label} {name}: checkpoint shape {have[name].shape}, "
                                    f"config expects {tuple(shape)}")
