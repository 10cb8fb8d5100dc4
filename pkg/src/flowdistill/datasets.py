"""Seeded synthetic conditional datasets and CSV ingestion.

Every generator is a pure function of its :class:`DatasetSpec`. Each sample
carries a paired standard-normal noise draw ``z`` so that flow-matching pairs
(z, x1) are reproducible across runs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

GAUSS_RADIUS = 4.0
GAUSS_SIGMA = 0.3
MOONS_NOISE = 0.05
SEQ_FRAMES = 8
SEQ_CHANNELS = 4
SEQ_NOISE = 0.05
SEQ_AMP_JITTER = 0.1

KINDS = ("gauss-mixture", "two-moons", "toy-sequence", "csv")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gauss-mixture"
    data_dim: int = 2
    num_conditions: int = 4
    size: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.num_conditions < 1:
            raise DatasetError("num_conditions must be >= 1")


@dataclass
class Dataset:
    """Immutable bundle of data points, condition ids and paired noise."""

    x1: np.ndarray
    c: np.ndarray
    z: np.ndarray
    num_conditions: int
    spec: DatasetSpec | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.x1, self.z, self.c):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.x1)

    @property
    def data_dim(self) -> int:
        return self.x1.shape[1]

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self), self.num_conditions))
        out[np.arange(len(self)), self.c] = 1.0
        return out

    def subset(self, index) -> "Batch":
        index = np.asarray(index)
        return Batch(self.x1[index], self.c[index], self.z[index], index)


@dataclass
class Batch:
    x1: np.ndarray
    c: np.ndarray
    z: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.x1)


def _noise(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.standard_normal((n, dim))


def gauss_means(num_conditions: int, radius: float = GAUSS_RADIUS) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(num_conditions) / num_conditions
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gen_gauss_mixture(spec: DatasetSpec) -> Dataset:
    """Component ``c`` is an isotropic Gaussian (sigma 0.3) on a radius-4 circle."""
    if spec.data_dim != 2:
        raise DatasetError("gauss-mixture is two-dimensional")
    rng = np.random.default_rng(spec.seed)
    c = rng.integers(0, spec.num_conditions, size=spec.size)
    x1 = gauss_means(spec.num_conditions)[c] + GAUSS_SIGMA * rng.standard_normal((spec.size, 2))
    z = _noise(rng, spec.size, 2)
    return Dataset(x1, c, z, spec.num_conditions, spec)


def gen_two_moons(spec: DatasetSpec) -> Dataset:
    if spec.data_dim != 2:
        raise DatasetError("two-moons is two-dimensional")
    if spec.num_conditions != 2:
        raise DatasetError("two-moons has exactly two conditions")
    rng = np.random.default_rng(spec.seed)
    c = rng.integers(0, 2, size=spec.size)
    theta = rng.uniform(0.0, np.pi, size=spec.size)
    upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    x1 = np.where(c[:, None] == 0, upper, lower)
    x1 = x1 + MOONS_NOISE * rng.standard_normal((spec.size, 2))
    z = _noise(rng, spec.size, 2)
    return Dataset(x1, c, z, 2, spec)


def sequence_frequency(c):
    """Cycles per track for condition ``c``."""
    return 1.0 + np.asarray(c)


def sequence_amplitude(c):
    return 1.0 + 0.5 * np.asarray(c)


def gen_toy_sequence(spec: DatasetSpec) -> Dataset:
    """Short multichannel sinusoid tracks, flattened frame-major.

    The base frequency and amplitude are functions of the condition; each
    sample gets a random phase and a small multiplicative amplitude jitter.
    """
    frames = spec.data_dim // SEQ_CHANNELS
    if frames * SEQ_CHANNELS != spec.data_dim or frames < 1:
        raise DatasetError(f"toy-sequence data_dim must be a multiple of {SEQ_CHANNELS}")
    rng = np.random.default_rng(spec.seed)
    c = rng.integers(0, spec.num_conditions, size=spec.size)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=spec.size)
    amp = sequence_amplitude(c) * (1.0 + SEQ_AMP_JITTER * rng.standard_normal(spec.size))
    freq = sequence_frequency(c)
    frame_t = np.arange(frames) / frames
    channel_shift = np.arange(SEQ_CHANNELS) * (np.pi / 4)
    arg = (2.0 * np.pi * freq[:, None, None] * frame_t[None, :, None]
           + phase[:, None, None] + channel_shift[None, None, :])
    tracks = amp[:, None, None] * np.sin(arg)
    tracks = tracks + SEQ_NOISE * rng.standard_normal(tracks.shape)
    x1 = tracks.reshape(spec.size, spec.data_dim)
    z = _noise(rng, spec.size, spec.data_dim)
    return Dataset(x1, c, z, spec.num_conditions, spec,
                   extras={"amplitude": amp, "frequency": freq, "frames": frames})


def frame_amplitude(x: np.ndarray, channels: int = SEQ_CHANNELS) -> np.ndarray:
    """Per-frame RMS amplitude (scaled to a sinusoid peak) of flattened tracks."""
    frames = x.reshape(len(x), -1, channels)
    return np.sqrt(2.0 * np.mean(frames ** 2, axis=2))


def generate(spec: DatasetSpec) -> Dataset:
    if spec.kind == "gauss-mixture":
        return gen_gauss_mixture(spec)
    if spec.kind == "two-moons":
        return gen_two_moons(spec)
    if spec.kind == "toy-sequence":
        return gen_toy_sequence(spec)
    raise DatasetError("csv datasets are loaded with load_csv")


def save_csv(dataset: Dataset, path, header: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow([f"x{i}" for i in range(dataset.data_dim)] + ["c"])
        for row, c in zip(dataset.x1, dataset.c):
            writer.writerow([repr(float(v)) for v in row] + [int(c)])


def load_csv(path, data_dim: int, condition_column: int = -1, header: bool = False,
             seed: int = 0, num_conditions: int | None = None) -> Dataset:
    """Read ``data_dim`` float columns plus one integer condition column.

    A header line is skipped only when ``header`` is set; otherwise a
    non-numeric first line is reported like any other malformed row.
    """
    path = Path(path)
    rows, conds = [], []
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if lineno == 1 and header:
                continue
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != data_dim + 1:
                raise DatasetError(
                    f"{path}:{lineno}: expected {data_dim + 1} columns, got {len(record)}")
            cond_raw = record[condition_column]
            values = list(record)
            del values[condition_column]
            try:
                rows.append([float(v) for v in values])
                conds.append(int(cond_raw))
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed row ({exc})") from None
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    c = np.asarray(conds, dtype=np.int64)
    if c.min() < 0:
        raise DatasetError(f"{path}: condition ids must be non-negative")
    count = int(c.max()) + 1 if num_conditions is None else num_conditions
    if c.max() >= count:
        raise DatasetError(f"{path}: condition id {c.max()} >= declared count {count}")
    x1 = np.asarray(rows, dtype=np.float64)
    rng = np.random.default_rng(seed)
    spec = DatasetSpec("csv", data_dim, count, len(x1), seed)
    return Dataset(x1, c, _noise(rng, len(x1), data_dim), count, spec)


def batch_iter(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0,
               repair_noise: bool = False) -> Iterator[Batch]:
    """One seeded epoch of shuffled batches; the last partial batch is kept.

    With ``repair_noise`` the paired noise is redrawn for this epoch instead
    of using the draw fixed at generation time.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(dataset))
    z_all = _noise(rng, len(dataset), dataset.data_dim) if repair_noise else dataset.z
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(dataset.x1[idx], dataset.c[idx], z_all[idx], idx)


def endless_batches(dataset: Dataset, batch_size: int, seed: int,
                    repair_noise: bool = False) -> Iterator[Batch]:
    epoch = 0
    while True:
        yield from batch_iter(dataset, batch_size, seed, epoch, repair_noise)
        epoch += 1


def heldout_spec(spec: DatasetSpec, size: int | None = None, offset: int = 10_000) -> DatasetSpec:
    """A DatasetSpec for fresh data from the same generator under a disjoint seed."""
    return replace(spec, seed=spec.seed + offset, size=spec.size if size is None else size)
