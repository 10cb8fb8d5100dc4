"""Flow-matching primitives: path, schedules, guidance, Euler solver, teacher training.

Convention: the state at t=0 is noise ``z`` and the state at t=1 is data
``x1``. The path is x_t = (1 - t) z + t x1, the target velocity is x1 - z
and sampling integrates t from 0 to 1.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .datasets import Batch, Dataset, endless_batches
from .models import NULL, ModelConfig, VelocityModel
from .numerics import Node, NonFiniteError

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("uniform", "cosine")


class SolverError(NonFiniteError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at solver step {step}")
        self.step = step


class TrainingDivergence(NonFiniteError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}{': ' + detail if detail else ''}")
        self.step = step


def interp_state(z, x1, t):
    """Point on the straight path from noise ``z`` (t=0) to data ``x1`` (t=1)."""
    z = np.asarray(z, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if z.shape != x1.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t[:, None]
    return (1.0 - t) * z + t * x1


@dataclass(frozen=True)
class Schedule:
    kind: str
    knots: tuple[float, ...]

    @property
    def steps(self) -> int:
        return len(self.knots) - 1

    def deltas(self) -> np.ndarray:
        return np.diff(np.asarray(self.knots))


def make_schedule(kind: str, steps: int) -> Schedule:
    """Knots 0 = t_0 < ... < t_N = 1; cosine uses t_i = (1 - cos(pi i / N)) / 2."""
    if steps < 1:
        raise ValueError("a schedule needs at least one step")
    i = np.arange(steps + 1)
    if kind == "uniform":
        knots = i / steps
    elif kind == "cosine":
        # sin^2 form evaluated from the nearer end keeps the knots symmetric and t=0.5 exact
        half = np.sin(np.pi * np.minimum(i, steps - i) / (2 * steps)) ** 2
        knots = np.where(2 * i <= steps, half, 1.0 - half)
        knots[2 * i == steps] = 0.5
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    knots[0], knots[-1] = 0.0, 1.0
    return Schedule(kind, tuple(float(k) for k in knots))


def schedule_from_knots(knots, kind: str = "custom") -> Schedule:
    knots = tuple(float(k) for k in knots)
    if len(knots) < 2 or knots[0] != 0.0 or knots[-1] != 1.0:
        raise ValueError("knots must run from 0 to 1")
    if any(b <= a for a, b in zip(knots, knots[1:])):
        raise ValueError("knots must be strictly increasing")
    return Schedule(kind, knots)


def _value(v) -> np.ndarray:
    return v.value if isinstance(v, Node) else np.asarray(v, dtype=np.float64)


def cfg_velocity(model, x, t, c, w: float, n: int | None = None):
    """Guided velocity (1 - w) v(x, t, null) + w v(x, t, c).

    ``w = 0`` short-circuits to a single unconditional forward; any other
    weight costs one conditional and one unconditional forward.
    """
    if not 0.0 <= w <= 1.0:
        warnings.warn(f"guidance weight {w} lies outside the interpolation range [0, 1]",
                      stacklevel=2)
    c = np.asarray(c)
    null = np.full_like(c, NULL)
    v_uncond = model(x, t, null, n)
    if w == 0.0:
        return v_uncond
    v_cond = model(x, t, c, n)
    if isinstance(v_uncond, Node) or isinstance(v_cond, Node):
        return nx.add(nx.scale(v_uncond, 1.0 - w), nx.scale(v_cond, w))
    return (1.0 - w) * np.asarray(v_uncond) + w * np.asarray(v_cond)


@dataclass
class Trajectory:
    schedule: Schedule
    states: list[np.ndarray]
    velocities: list[np.ndarray]
    c: np.ndarray
    w: float

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def state_at(self, index: int) -> np.ndarray:
        return self.states[index]

    def to_csv(self, path) -> None:
        """One row per (knot, sample): t, sample index, state and velocity components.

        The final knot has no outgoing velocity; its velocity cells are empty.
        """
        dim = self.states[0].shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "sample"] + [f"x{i}" for i in range(dim)]
                            + [f"v{i}" for i in range(dim)])
            for i, (t, state) in enumerate(zip(self.schedule.knots, self.states)):
                vel = self.velocities[i] if i < len(self.velocities) else None
                for j, row in enumerate(state):
                    vcells = [repr(float(v)) for v in vel[j]] if vel is not None else [""] * dim
                    writer.writerow([repr(t), j] + [repr(float(v)) for v in row] + vcells)


def euler_solve(model, z, c, schedule: Schedule, w: float = 1.0, n: int | None = None) -> Trajectory:
    """Integrate the guided field along ``schedule`` with explicit Euler steps."""
    x = np.asarray(z, dtype=np.float64)
    states = [x]
    velocities = []
    knots = schedule.knots
    with nx.no_grad():
        for i in range(schedule.steps):
            try:
                v = _value(cfg_velocity(model, x, knots[i], c, w, n))
            except NonFiniteError:
                raise SolverError(i) from None
            x = x + (knots[i + 1] - knots[i]) * v
            if not np.all(np.isfinite(x)):
                raise SolverError(i)
            velocities.append(v)
            states.append(x)
    return Trajectory(schedule, states, velocities, np.asarray(c), w)


def sq_error(pred, target) -> Node:
    """Squared error summed over features and averaged over rows."""
    diff = nx.sub(pred, target)
    return nx.mean(nx.sum(nx.square(diff), axis=1))


def fm_teacher_loss(model, batch: Batch, p_uncond: float, rng: np.random.Generator) -> Node:
    """Conditional flow-matching loss with unconditional dropout."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    t = rng.uniform(0.0, 1.0, size=len(batch))
    drop = rng.uniform(size=len(batch)) < p_uncond
    c = np.where(drop, NULL, batch.c)
    x_t = interp_state(batch.z, batch.x1, t)
    return sq_error(model(x_t, t, c), batch.x1 - batch.z)


@dataclass
class TeacherRun:
    model: VelocityModel
    losses: list[float] = field(default_factory=list)
    seed: int = 0


def train_teacher(config: ModelConfig, dataset: Dataset, epochs: int, seed: int,
                  lr: float = 1e-3, batch_size: int = 256, p_uncond: float = 0.02,
                  weight_decay: float = 0.0, cosine_lr: bool = True) -> TeacherRun:
    """Fit a flow-matching teacher; deterministic under ``seed``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = VelocityModel(config, seed)
    rng = np.random.default_rng([seed, 1])
    batches = endless_batches(dataset, batch_size, seed)
    steps_per_epoch = -(-len(dataset) // batch_size)
    total = epochs * steps_per_epoch
    run = TeacherRun(model, seed=seed)
    for step in range(total):
        batch = next(batches)
        try:
            loss = fm_teacher_loss(model, batch, p_uncond, rng)
            nx.backward(loss)
            step_lr = cosine_lr_at(lr, step, total) if cosine_lr else lr
            nx.adam_step(model.store, lr=step_lr, weight_decay=weight_decay)
        except NonFiniteError as exc:
            raise TrainingDivergence(step, str(exc)) from None
        run.losses.append(float(loss.value))
    log.debug("teacher seed=%d final loss %.4f", seed, run.losses[-1])
    return run


def cosine_lr_at(lr: float, step: int, total: int, floor: float = 0.1) -> float:
    """Cosine annealing from ``lr`` down to ``floor * lr``."""
    frac = step / max(total - 1, 1)
    return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))
