"""Binary weight-file format.

Layout (all integers little-endian):

    magic   4 bytes  b"CPNW"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated, sorted by name:
        name_len u16
        name     UTF-8 bytes
        rank     u8
        dims     rank * u32
        data     prod(dims) * f32, row-major

Sorting plus fixed-width fields make the file a pure function of the
weight values, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .model import NetworkConfig, param_shapes
from .tensor import Tensor

MAGIC = b"CPNW"
VERSION = 1


def save_weights(path, weights: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name in sorted(weights):
        arr = weights[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        data = np.ascontiguousarray(data, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.path}: truncated weight file, unable to read {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf, path)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", cur.take(8, "header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    weights = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", cur.take(2, f"entry {i} name length"))
        name = cur.take(name_len, f"entry {i} name").decode("utf-8")
        (rank,) = struct.unpack("<B", cur.take(1, f"{name}: rank"))
        shape = struct.unpack(f"<{rank}I", cur.take(4 * rank, f"{name}: dims"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(cur.take(4 * n, f"{name}: data"), dtype="<f4")
        weights[name] = data.reshape(shape).copy()
    if cur.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - cur.pos} trailing bytes after last entry")
    return weights


def weights_to_tensors(loaded: dict[str, np.ndarray],
                       cfg: NetworkConfig) -> dict[str, Tensor]:
    """Validate a loaded dict against the config's inventory and wrap it.

    Raises FormatError naming the first offending layer (in sorted order)
    on a missing, unexpected, or mis-shaped entry.
    """
    expected = param_shapes(cfg)
    for name in sorted(expected):
        if name not in loaded:
            raise FormatError(f"missing weight entry {name!r}")
        want = expected[name][1]
        got = tuple(loaded[name].shape)
        if got != want:
            raise FormatError(f"shape mismatch for {name!r}: file has {got}, "
                              f"network needs {want}")
    extra = sorted(set(loaded) - set(expected))
    if extra:
        raise FormatError(f"unexpected weight entry {extra[0]!r}")
    return {name: Tensor(loaded[name], requires_grad=True, name=name)
            for name in expected}
