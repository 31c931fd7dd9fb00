"""Synthetic sequence-classification task streams with tunable inter-task interference.

Position ``j`` of a sample of class ``c`` in task ``t`` is ``Q_t (mu_{t,c} + sigma * eps_j)``
with ``eps_j`` standard normal.  ``kappa`` blends a shared mixing basis with a
per-task random one; ``conflict_fraction`` reuses prototypes of the previous task
under different labels.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .container import FormatError, Reader

DATASET_MAGIC = b"SFDD"
DATASET_VERSION = 1


class ConfigError(ValueError):
    """Invalid generator or run configuration."""


@dataclass(frozen=True)
class InterferenceConfig:
    kappa: float = 0.2
    conflict_fraction: float = 0.6

    def __post_init__(self):
        for name in ("kappa", "conflict_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class GenConfig:
    """Dimensions and noise levels for a task sequence."""

    num_classes: int = 5
    d_in: int = 32
    seq_len_min: int = 4
    seq_len_max: int = 12
    train_size: int = 2000
    test_size: int = 500
    noise_sigma: float = 1.0
    prototype_scale: float = 1.0
    interference: InterferenceConfig = field(default_factory=InterferenceConfig)
    epochs: tuple[int, ...] = (5, 3, 7, 5)

    def validate(self, num_tasks: int) -> None:
        if num_tasks < 1:
            raise ConfigError(f"num_tasks must be >= 1, got {num_tasks}")
        for name in ("num_classes", "d_in", "seq_len_min", "train_size", "test_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.seq_len_max < self.seq_len_min:
            raise ConfigError("seq_len_max must be >= seq_len_min")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if any(e < 1 for e in self.epochs):
            raise ConfigError("every per-task epoch count must be >= 1")

    def epochs_for(self, task_index: int) -> int:
        # Short lists cycle, so a single entry means "same for every task".
        return int(self.epochs[task_index % len(self.epochs)])


@dataclass
class SampleBatch:
    """Padded batch: ``inputs`` (B, L, d_in) float32, ``mask`` (B, L) uint8 with 1 = real token."""

    inputs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    sample_ids: np.ndarray
    task_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SampleBatch":
        idx = np.asarray(idx)
        return SampleBatch(self.inputs[idx], self.labels[idx], self.mask[idx],
                           self.sample_ids[idx], self.task_ids[idx])

    def validate(self) -> None:
        if not np.all(self.mask.sum(axis=1) >= 1):
            raise ValueError("batch contains an all-padding row")
        if np.any(self.inputs[self.mask == 0] != 0):
            raise ValueError("padded positions must be zero")


@dataclass
class TaskSpec:
    task_id: int
    num_classes: int
    class_prototypes: np.ndarray
    mixing_basis: np.ndarray
    noise_sigma: float
    seq_len_range: tuple[int, int]
    epochs: int
    train_size: int
    test_size: int


@dataclass
class TaskSequence:
    tasks: list[TaskSpec]
    train: list[SampleBatch]
    test: list[SampleBatch]
    config: GenConfig
    seed: int

    def __len__(self) -> int:
        return len(self.tasks)


def _seed_sequence(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) % (1 << 64))


def sign_fixed_qr(matrix: np.ndarray) -> np.ndarray:
    """Orthonormal factor of ``matrix`` with the diagonal of R made positive."""
    q, r = np.linalg.qr(matrix)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    return sign_fixed_qr(rng.standard_normal((n, n)))


def _derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def conflict_count(conflict_fraction: float, num_classes: int) -> int:
    # round() guards against 0.3 * 10 = 3.0000000000000004
    return math.ceil(round(conflict_fraction * num_classes, 9))


def _draw_samples(rng, prototypes, basis, sigma, n, seq_len_range, pad_to, task_id, id_offset):
    k, d_in = prototypes.shape
    labels = rng.integers(0, k, size=n)
    lengths = rng.integers(seq_len_range[0], seq_len_range[1] + 1, size=n)
    noise = rng.standard_normal((n, pad_to, d_in))
    mask = (np.arange(pad_to)[None, :] < lengths[:, None]).astype(np.uint8)
    latent = prototypes[labels][:, None, :] + sigma * noise
    inputs = (latent @ basis.T) * mask[:, :, None]
    return SampleBatch(
        inputs=inputs.astype(np.float32),
        labels=labels.astype(np.int64),
        mask=mask,
        sample_ids=np.arange(id_offset, id_offset + n, dtype=np.int64),
        task_ids=np.full(n, task_id, dtype=np.int64),
    )


def generate_task_sequence(num_tasks: int, config: GenConfig, seed: int) -> TaskSequence:
    """Build ``num_tasks`` tasks plus their train/test streams; a pure function of (config, seed)."""
    config.validate(num_tasks)
    k, d_in = config.num_classes, config.d_in
    kappa = config.interference.kappa
    root = _seed_sequence(seed)
    basis_ss, proto_ss, sample_ss = root.spawn(3)
    basis_rng = np.random.default_rng(basis_ss)
    proto_rng = np.random.default_rng(proto_ss)
    sample_rngs = [np.random.default_rng(s) for s in sample_ss.spawn(num_tasks)]

    q_shared = random_orthogonal(basis_rng, d_in)
    n_conflict = conflict_count(config.interference.conflict_fraction, k)
    proto_std = config.prototype_scale / math.sqrt(d_in)

    tasks, train, test = [], [], []
    prev_protos = None
    for t in range(num_tasks):
        q_rand = random_orthogonal(basis_rng, d_in)
        basis = sign_fixed_qr((1.0 - kappa) * q_shared + kappa * q_rand)
        protos = proto_rng.standard_normal((k, d_in)) * proto_std
        if prev_protos is not None and n_conflict > 0:
            perm = _derangement(proto_rng, k)
            for src in proto_rng.choice(k, size=n_conflict, replace=False):
                protos[perm[src]] = prev_protos[src]
        spec = TaskSpec(
            task_id=t + 1,
            num_classes=k,
            class_prototypes=protos,
            mixing_basis=basis,
            noise_sigma=config.noise_sigma,
            seq_len_range=(config.seq_len_min, config.seq_len_max),
            epochs=config.epochs_for(t),
            train_size=config.train_size,
            test_size=config.test_size,
        )
        rng = sample_rngs[t]
        n_total = config.train_size + config.test_size
        both = _draw_samples(rng, protos, basis, config.noise_sigma, n_total,
                             spec.seq_len_range, config.seq_len_max, spec.task_id, 0)
        tasks.append(spec)
        train.append(both.subset(np.arange(config.train_size)))
        test.append(both.subset(np.arange(config.train_size, n_total)))
        prev_protos = protos
    return TaskSequence(tasks, train, test, config, seed)


def concat_batches(batches: list[SampleBatch]) -> SampleBatch:
    width = max(b.inputs.shape[1] for b in batches)

    def pad(arr, fill_dims):
        extra = width - arr.shape[1]
        if extra == 0:
            return arr
        widths = [(0, 0), (0, extra)] + [(0, 0)] * fill_dims
        return np.pad(arr, widths)

    return SampleBatch(
        inputs=np.concatenate([pad(b.inputs, 1) for b in batches]),
        labels=np.concatenate([b.labels for b in batches]),
        mask=np.concatenate([pad(b.mask, 0) for b in batches]),
        sample_ids=np.concatenate([b.sample_ids for b in batches]),
        task_ids=np.concatenate([b.task_ids for b in batches]),
    )


def generate_sae_corpus(sequence: TaskSequence, extra_sources: int, samples_per_source: int,
                        seed: int) -> SampleBatch:
    """Diverse-input corpus: up to ``samples_per_source`` training samples from each task, plus
    ``extra_sources`` unrelated random distributions, shuffled.

    Extra sources carry task ids ``T+1 .. T+extra_sources``.
    """
    if len(sequence) == 0:
        raise ConfigError("cannot build a corpus from an empty task sequence")
    if samples_per_source < 1:
        raise ConfigError("samples_per_source must be >= 1")
    if extra_sources < 0:
        raise ConfigError("extra_sources must be >= 0")
    cfg = sequence.config
    rng = np.random.default_rng(_seed_sequence(seed))
    parts = []
    for batch in sequence.train:
        take = min(samples_per_source, len(batch))
        parts.append(batch.subset(np.sort(rng.permutation(len(batch))[:take])))
    proto_std = cfg.prototype_scale / math.sqrt(cfg.d_in)
    for e in range(extra_sources):
        basis = random_orthogonal(rng, cfg.d_in)
        protos = rng.standard_normal((cfg.num_classes, cfg.d_in)) * proto_std
        parts.append(_draw_samples(rng, protos, basis, cfg.noise_sigma, samples_per_source,
                                   (cfg.seq_len_min, cfg.seq_len_max), cfg.seq_len_max,
                                   len(sequence) + 1 + e, 0))
    corpus = concat_batches(parts)
    return corpus.subset(rng.permutation(len(corpus)))


def save_dataset(batch: SampleBatch, path) -> None:
    """Write a batch in the ``SFDD`` framing (mirrors the anchor file layout)."""
    d_in = batch.inputs.shape[2]
    parts = [DATASET_MAGIC, struct.pack("<HIQ", DATASET_VERSION, d_in, len(batch))]
    for i in range(len(batch)):
        length = batch.inputs.shape[1]
        parts.append(struct.pack("<IQiI", int(batch.task_ids[i]), int(batch.sample_ids[i]),
                                 int(batch.labels[i]), length))
        parts.append(batch.mask[i].astype(np.uint8).tobytes())
        parts.append(np.ascontiguousarray(batch.inputs[i], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dataset(path) -> SampleBatch:
    with open(path, "rb") as fh:
        reader = Reader(fh.read())
    reader.expect_magic(DATASET_MAGIC)
    version, d_in, count = reader.unpack("<HIQ", "header")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    rows = []
    for _ in range(count):
        task_id, sample_id, label, length = reader.unpack("<IQiI", "record header")
        mask = reader.array("u1", length, "mask")
        inputs = reader.array("<f4", length * d_in, "inputs").reshape(length, d_in)
        rows.append((task_id, sample_id, label, mask, inputs))
    reader.finish()
    if not rows:
        return SampleBatch(np.zeros((0, 0, d_in), np.float32), np.zeros(0, np.int64),
                           np.zeros((0, 0), np.uint8), np.zeros(0, np.int64), np.zeros(0, np.int64))
    width = max(r[3].shape[0] for r in rows)
    inputs = np.zeros((count, width, d_in), np.float32)
    mask = np.zeros((count, width), np.uint8)
    for i, r in enumerate(rows):
        inputs[i, :len(r[3])] = r[4]
        mask[i, :len(r[3])] = r[3]
    return SampleBatch(inputs, np.array([r[2] for r in rows], np.int64), mask,
                       np.array([r[1] for r in rows], np.int64), np.array([r[0] for r in rows], np.int64))


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
