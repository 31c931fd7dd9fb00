"""Little-endian binary framing shared by checkpoints, anchor files and dataset files.

Checkpoint layout ("SFDM")::

    magic   4 bytes  b"SFDM"
    version u16
    kind    u8       KIND_MODEL or KIND_SAE
    count   u32      number of tensors
    per tensor: name_len u16, name bytes (utf-8), rank u8, dims u32[rank], f32 data row-major
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

CHECKPOINT_MAGIC = b"SFDM"
CHECKPOINT_VERSION = 1
KIND_MODEL = 0
KIND_SAE = 1


class FormatError(ValueError):
    """Raised for corrupt, truncated or foreign binary files."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Reader:
    """Bounds-checked cursor over a bytes buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count, what)
        return np.frombuffer(raw, dtype=dt, count=count).copy()

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


def write_checkpoint(path, tensors: dict[str, np.ndarray], kind: int = KIND_MODEL) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<HBI", CHECKPOINT_VERSION, kind, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path, expected_kind: int | None = None) -> tuple[int, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        reader = Reader(fh.read())
    reader.expect_magic(CHECKPOINT_MAGIC)
    (version,) = reader.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    kind, count = reader.unpack("<BI", "header")
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"checkpoint kind {kind}, expected {expected_kind}", 6)
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "name").decode("utf-8")
        (rank,) = reader.unpack("<B", "rank")
        dims = reader.unpack(f"<{rank}I", "dims") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = reader.array("<f4", n, f"tensor {name}").reshape(dims)
    reader.finish()
    return kind, tensors
