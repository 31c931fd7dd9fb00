"""Anchor snapshots: per-token activations captured after each task, kept as binary16.

Anchor file layout ("SFDA", little-endian)::

    magic b"SFDA", version u16, d_in u32, d u32, record count u64
    per record: task_id u32, sample_id u64, L u32, mask u8[L], inputs f32[L*d_in], activations f16[L*d]
"""

from __future__ import annotations

import hashlib
import os
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from .container import FormatError, Reader
from .model import batch_tensors, collect_activations
from .synth import SampleBatch

ANCHOR_MAGIC = b"SFDA"
ANCHOR_VERSION = 1


@dataclass(frozen=True)
class AnchorRecord:
    task_id: int
    sample_id: int
    inputs: np.ndarray       # (L, d_in) float32
    mask: np.ndarray         # (L,) uint8
    activations: np.ndarray  # (L, d) float16

    def __post_init__(self):
        if self.activations.dtype != np.float16:
            raise TypeError("anchor activations must be stored as float16")
        if not (len(self.mask) == self.inputs.shape[0] == self.activations.shape[0]):
            raise ValueError("mask, inputs and activations disagree on sequence length")


@dataclass
class AnchorBuffer:
    """Append-only store of anchor records, one block per task."""

    records: list[AnchorRecord] = field(default_factory=list)
    per_task_counts: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def task_ids(self) -> list[int]:
        return sorted(self.per_task_counts)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.activations.tobytes())
        return h.hexdigest()


def to_float16(values) -> np.ndarray:
    """Round to binary16 with round-to-nearest-even (numpy's cast semantics)."""
    return np.asarray(values, dtype=np.float32).astype(np.float16)


def capture_anchors(model, adapter, task_data: SampleBatch, n_anchors: int, seed: int,
                    task_id: int | None = None) -> list[AnchorRecord]:
    """Seeded shuffle of ``task_data``, keep the first ``n_anchors``, snapshot their activations."""
    if n_anchors > len(task_data):
        raise ValueError(f"n_anchors={n_anchors} exceeds dataset size {len(task_data)}")
    rng = np.random.default_rng(int(seed) % (1 << 64))
    chosen = task_data.subset(rng.permutation(len(task_data))[:n_anchors])
    inputs, mask, _ = batch_tensors(chosen)
    acts = collect_activations(model, adapter, inputs, mask).numpy()
    acts16 = to_float16(acts)
    records = []
    for i in range(len(chosen)):
        records.append(AnchorRecord(
            task_id=int(task_id if task_id is not None else chosen.task_ids[i]),
            sample_id=int(chosen.sample_ids[i]),
            inputs=np.ascontiguousarray(chosen.inputs[i], dtype=np.float32),
            mask=np.ascontiguousarray(chosen.mask[i], dtype=np.uint8),
            activations=np.ascontiguousarray(acts16[i]),
        ))
    return records


def append(buffer: AnchorBuffer, records: list[AnchorRecord]) -> None:
    if not records:
        return
    ids = {r.task_id for r in records}
    if len(ids) != 1:
        raise ValueError(f"records span several tasks: {sorted(ids)}")
    (task_id,) = ids
    if task_id in buffer.per_task_counts:
        raise ValueError(f"anchors for task {task_id} are already in the buffer")
    buffer.records.extend(records)
    buffer.per_task_counts[task_id] = len(records)


def sample_anchor_batch(buffer: AnchorBuffer, batch_size: int, rng: np.random.Generator):
    """``batch_size`` records drawn uniformly with replacement over all records."""
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty anchor buffer")
    idx = rng.integers(0, len(buffer), size=batch_size)
    return [buffer.records[i] for i in idx]


def collate(records: list[AnchorRecord], dtype=torch.float32):
    """(inputs, mask, activations) tensors, padding to the longest record.

    Activations are upcast from binary16 to ``dtype``.
    """
    width = max(len(r.mask) for r in records)
    d_in = records[0].inputs.shape[1]
    d = records[0].activations.shape[1]
    inputs = np.zeros((len(records), width, d_in), np.float32)
    mask = np.zeros((len(records), width), np.float32)
    acts = np.zeros((len(records), width, d), np.float16)
    for i, r in enumerate(records):
        n = len(r.mask)
        inputs[i, :n] = r.inputs
        mask[i, :n] = r.mask
        acts[i, :n] = r.activations
    return (torch.from_numpy(inputs).to(dtype), torch.from_numpy(mask).to(dtype),
            torch.from_numpy(acts.astype(np.float32)).to(dtype))


def encode_buffer(buffer: AnchorBuffer, d_in: int | None = None, d: int | None = None) -> bytes:
    if buffer.records:
        d_in = buffer.records[0].inputs.shape[1]
        d = buffer.records[0].activations.shape[1]
    parts = [ANCHOR_MAGIC, struct.pack("<HIIQ", ANCHOR_VERSION, d_in or 0, d or 0, len(buffer))]
    for r in buffer.records:
        parts.append(struct.pack("<IQI", r.task_id, r.sample_id, len(r.mask)))
        parts.append(r.mask.astype(np.uint8).tobytes())
        parts.append(np.ascontiguousarray(r.inputs, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(r.activations, dtype="<f2").tobytes())
    return b"".join(parts)


def save(buffer: AnchorBuffer, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_buffer(buffer))
    os.replace(tmp, path)


def load(path) -> AnchorBuffer:
    """Parse an anchor file; any corruption raises :class:`FormatError` and returns nothing."""
    with open(path, "rb") as fh:
        reader = Reader(fh.read())
    reader.expect_magic(ANCHOR_MAGIC)
    (version,) = reader.unpack("<H", "version")
    if version != ANCHOR_VERSION:
        raise FormatError(f"unsupported anchor file version {version}", 4)
    d_in, d, count = reader.unpack("<IIQ", "header")
    records = []
    for _ in range(count):
        task_id, sample_id, length = reader.unpack("<IQI", "record header")
        mask = reader.array("u1", length, "mask")
        inputs = reader.array("<f4", length * d_in, "inputs").reshape(length, d_in)
        acts = reader.array("<f2", length * d, "activations").reshape(length, d)
        records.append(AnchorRecord(task_id, sample_id, inputs, mask, acts.astype(np.float16)))
    reader.finish()
    counts = Counter(r.task_id for r in records)
    return AnchorBuffer(records, dict(sorted(counts.items())))
