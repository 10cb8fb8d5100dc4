"""Distributional metrics, endpoint error and latency measurement."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .flow import euler_solve, make_schedule

HIST_BINS = 64


def _unit_directions(dim: int, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((count, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sliced_wasserstein(a, b, projections: int = 512, seed: int = 0) -> float:
    """Mean 1-D Wasserstein-1 distance over seeded random unit projections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples on each side")
    u = _unit_directions(a.shape[1], projections, seed)
    pa, pb = a @ u.T, b @ u.T
    if len(a) == len(b):
        return float(np.mean(np.abs(np.sort(pa, axis=0) - np.sort(pb, axis=0))))
    return float(np.mean([stats.wasserstein_distance(pa[:, j], pb[:, j])
                          for j in range(projections)]))


def conditional_distance(samples, c_samples, data, c_data, projections: int = 512,
                         seed: int = 0) -> float:
    """Sliced Wasserstein averaged over the conditions present in ``c_data``."""
    samples, data = np.asarray(samples), np.asarray(data)
    c_samples, c_data = np.asarray(c_samples), np.asarray(c_data)
    out = []
    for k in np.unique(c_data):
        out.append(sliced_wasserstein(samples[c_samples == k], data[c_data == k],
                                      projections, seed))
    return float(np.mean(out))


def ks_alignment(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    a, b = np.ravel(a), np.ravel(b)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two values on each side")
    return float(stats.ks_2samp(a, b).statistic)


def radial(x) -> np.ndarray:
    return np.linalg.norm(np.asarray(x), axis=1)


def histogram(values, lo: float, hi: float, bins: int = HIST_BINS) -> dict:
    """Fixed-range histogram; values outside are clipped into the edge bins."""
    values = np.clip(np.ravel(values), lo, hi)
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return {"range": [lo, hi], "bins": bins, "counts": counts.tolist()}


def endpoint_mse(student, teacher, z, c, n: int, w: float, plan, teacher_w: float | None = None) -> float:
    """Mean squared distance between student ``n``-step and teacher N-step endpoints."""
    from .distill import interval_schedule

    teacher_w = plan.w_teacher if teacher_w is None else teacher_w
    ref = euler_solve(teacher, z, c, plan.teacher_schedule_obj(), teacher_w).endpoint
    got = euler_solve(student, z, c, interval_schedule(plan, n), w,
                      n if student.config.mode == "step-token" else None).endpoint
    return float(np.mean(np.sum((got - ref) ** 2, axis=1)))


def nfe(n: int, w: float) -> int:
    return n * (2 if w > 0 else 1)


@dataclass
class LatencyResult:
    seconds_per_sample: float
    nfe: int
    repeats: int
    timings: list[float] = field(default_factory=list)


def latency_bench(model, n: int, batch: int = 256, repeats: int = 7, w: float = 0.05,
                  warmup: int = 2, schedule=None, seed: int = 0) -> LatencyResult:
    """Median wall-clock seconds per generated sample over ``repeats`` timed runs."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((batch, model.config.data_dim))
    c = rng.integers(0, model.config.num_conditions, size=batch)
    schedule = schedule or make_schedule("uniform", n)
    label = n if model.config.mode == "step-token" else None
    for _ in range(warmup):
        euler_solve(model, z, c, schedule, w, label)
    timings = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        euler_solve(model, z, c, schedule, w, label)
        timings.append((time.perf_counter() - t0) / batch)
    return LatencyResult(statistics.median(timings), nfe(schedule.steps, w), repeats, timings)


@dataclass
class MetricReport:
    """Named scalars and histograms of one run, with the seeds and config that produced them."""

    run_id: str
    seeds: list[int]
    config: dict
    scalars: dict[str, float] = field(default_factory=dict)
    histograms: dict[str, dict] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, value) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"metric {name} is not finite")
        self.scalars[name] = value

    def add_histogram(self, name: str, values, lo: float, hi: float) -> None:
        self.histograms[name] = histogram(values, lo, hi)

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "seeds": list(self.seeds), "config": self.config,
                "scalars": self.scalars, "histograms": self.histograms, "notes": self.notes}
