"""Few-step distillation of a frozen flow teacher.

The student is supervised per interval of a coarse partition of [0, 1]
whose boundaries sit on the teacher's solver knots. For each interval the
teacher trajectory gives start and end states, a mean velocity
(x_end - x_start) / dt and an interpolated evaluation state. The training
objective mixes endpoint matching with mean-velocity matching and adds a
small stop-gradient penalty that keeps the unconditional branch aligned with
the conditional one.

Loss reduction everywhere: sum over features, mean over batch rows and
intervals.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .datasets import Dataset, endless_batches
from .flow import (
    Schedule, TrainingDivergence, Trajectory, cfg_velocity, cosine_lr_at, euler_solve,
    make_schedule, schedule_from_knots, sq_error,
)
from .models import NULL, ModelConfig, VelocityModel
from .numerics import Node, NonFiniteError

log = logging.getLogger(__name__)

ROLLOUT_MODES = ("teacher-forced", "free-rollout")
MIDPOINT_RULES = ("global", "local")


@dataclass(frozen=True)
class DistillPlan:
    step_counts: tuple[int, ...] = (1, 2, 4)
    alpha: float = 0.7
    lam: float = 0.01
    w_teacher: float = 0.7
    teacher_steps: int = 10
    teacher_schedule: str = "cosine"
    mode: str = "teacher-forced"
    midpoint: str = "global"
    step_weights: tuple[float, ...] | None = None
    iters: int = 1500
    batch_size: int = 256
    lr: float = 1e-3
    cosine_lr: bool = True
    init_from_teacher: bool = True
    cache_teacher: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.mode not in ROLLOUT_MODES:
            raise ValueError(f"unknown rollout mode {self.mode!r}")
        if self.midpoint not in MIDPOINT_RULES:
            raise ValueError(f"unknown midpoint rule {self.midpoint!r}")
        if not self.step_counts:
            raise ValueError("step_counts must be non-empty")
        object.__setattr__(self, "step_counts", tuple(int(n) for n in self.step_counts))
        for n in self.step_counts:
            if not 1 <= n <= self.teacher_steps:
                raise ValueError(f"step count {n} cannot be aligned to {self.teacher_steps} teacher knots")

    def teacher_schedule_obj(self) -> Schedule:
        return make_schedule(self.teacher_schedule, self.teacher_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_counts"] = list(self.step_counts)
        if self.step_weights is not None:
            d["step_weights"] = list(self.step_weights)
        return d


def endpoint_baseline_plan(plan: DistillPlan | None = None) -> DistillPlan:
    """Plain endpoint distillation: one step, composed rollout, no extra terms."""
    return replace(plan or DistillPlan(), alpha=1.0, lam=0.0, step_counts=(1,),
                   mode="free-rollout", step_weights=None)


def knot_indices(teacher_steps: int, n: int) -> list[int]:
    """Teacher-knot indices of an ``n``-interval partition.

    Ideal boundaries k * N / n are snapped to the nearest knot index with
    ties going to the earlier knot.
    """
    if not 1 <= n <= teacher_steps:
        raise ValueError(f"cannot split {teacher_steps} teacher steps into {n} intervals")
    out = []
    for k in range(n + 1):
        num = k * teacher_steps
        lo, rem = divmod(num, n)
        out.append(lo + 1 if 2 * rem > n else lo)
    return out


def interval_schedule(plan: DistillPlan, n: int) -> Schedule:
    knots = plan.teacher_schedule_obj().knots
    return schedule_from_knots([knots[i] for i in knot_indices(plan.teacher_steps, n)],
                               kind=f"{plan.teacher_schedule}-aligned")


@dataclass
class IntervalTarget:
    k: int
    t_start: float
    t_end: float
    x_start: np.ndarray
    x_end: np.ndarray
    v_mean: np.ndarray
    t_mf: float
    x_mf: np.ndarray

    @property
    def dt(self) -> float:
        return self.t_end - self.t_start


def targets_from_trajectory(traj: Trajectory, plan: DistillPlan, n_k: int) -> list[IntervalTarget]:
    if n_k not in plan.step_counts:
        raise ValueError(f"step count {n_k} not in plan {plan.step_counts}")
    idx = knot_indices(plan.teacher_steps, n_k)
    knots = traj.schedule.knots
    out = []
    for k in range(n_k):
        a, b = idx[k], idx[k + 1]
        t0, t1 = knots[a], knots[b]
        x0, x1 = traj.states[a], traj.states[b]
        v_mean = (x1 - x0) / (t1 - t0)
        t_mf = (t0 + t1) / 2.0
        if plan.midpoint == "global":
            x_mf = (1.0 - t_mf) * x0 + t_mf * x1
        else:
            x_mf = 0.5 * (x0 + x1)
        out.append(IntervalTarget(k, t0, t1, x0, x1, v_mean, t_mf, x_mf))
    return out


def teacher_targets(teacher, z, c, plan: DistillPlan, n_k: int) -> list[IntervalTarget]:
    """Run the guided teacher once and cut its trajectory into ``n_k`` intervals."""
    if n_k not in plan.step_counts:
        raise ValueError(f"step count {n_k} not in plan {plan.step_counts}")
    traj = euler_solve(teacher, z, c, plan.teacher_schedule_obj(), plan.w_teacher)
    return targets_from_trajectory(traj, plan, n_k)


def _stack(targets, attr_x: str, attr_t: str):
    xs = np.concatenate([getattr(tg, attr_x) for tg in targets], axis=0)
    ts = np.concatenate([np.full(len(tg.x_start), getattr(tg, attr_t)) for tg in targets])
    return xs, ts


def endpoint_loss(student, targets: list[IntervalTarget], c, n_k: int,
                  mode: str = "teacher-forced", z=None) -> Node:
    """Endpoint term.

    teacher-forced: one student step from every interval's teacher start
    state, compared with the teacher end state, averaged over intervals.
    free-rollout: the student's own ``n_k``-step chain from ``z`` compared
    with the teacher's final state.
    """
    c = np.asarray(c)
    if mode == "teacher-forced":
        x0, t0 = _stack(targets, "x_start", "t_start")
        dt = np.concatenate([np.full(len(tg.x_start), tg.dt) for tg in targets])
        x1 = np.concatenate([tg.x_end for tg in targets], axis=0)
        v = student(x0, t0, np.tile(c, len(targets)), n_k)
        pred = nx.add(x0, nx.mul(v, dt[:, None]))
        return sq_error(pred, x1)
    if mode == "free-rollout":
        x = nx.constant(targets[0].x_start if z is None else z)
        for tg in targets:
            v = student(x, tg.t_start, c, n_k)
            x = nx.add(x, nx.scale(v, tg.dt))
        return sq_error(x, targets[-1].x_end)
    raise ValueError(f"unknown rollout mode {mode!r}")


def _midpoint_velocity(student, targets, c, n_k, cond=None) -> tuple[Node, np.ndarray, np.ndarray]:
    xm, tm = _stack(targets, "x_mf", "t_mf")
    if cond is None:
        cond = np.tile(np.asarray(c), len(targets))
    return student(xm, tm, cond, n_k), xm, tm


def velocity_loss(student, targets: list[IntervalTarget], c, n_k: int, _v: Node | None = None) -> Node:
    """Mean over intervals of |v_S(x_mf, t_mf, c) - mean teacher velocity|^2."""
    if _v is None:
        _v, _, _ = _midpoint_velocity(student, targets, c, n_k)
    v_mean = np.concatenate([tg.v_mean for tg in targets], axis=0)
    return sq_error(_v, v_mean)


def dual_loss(student, targets: list[IntervalTarget], c, n_k: int, alpha: float,
              mode: str = "teacher-forced", z=None, _v: Node | None = None) -> Node:
    """alpha * endpoint + (1 - alpha) * velocity, both interval-averaged."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return endpoint_loss(student, targets, c, n_k, mode, z)
    if alpha == 0.0:
        return velocity_loss(student, targets, c, n_k, _v)
    return nx.add(nx.scale(endpoint_loss(student, targets, c, n_k, mode, z), alpha),
                  nx.scale(velocity_loss(student, targets, c, n_k, _v), 1.0 - alpha))


def cfg_regularizer(student, x_t, t, c, n_k: int | None, lam: float,
                    v_cond: Node | None = None) -> Node:
    """lam * |v(x_t, t, null) - sg(v(x_t, t, c))|^2.

    A conditional prediction already computed on the same inputs may be
    passed as ``v_cond``; only its value is used.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    c = np.asarray(c)
    if v_cond is None:
        v_cond = student(x_t, t, c, n_k)
    v_null = student(x_t, t, np.full_like(c, NULL), n_k)
    return nx.scale(sq_error(v_null, nx.stop_gradient(v_cond)), lam)


@dataclass
class StepLosses:
    total: Node
    dual: Node
    cfg: Node | None


def student_objective(student, targets, c, n_k: int, plan: DistillPlan, z=None) -> StepLosses:
    """Full per-iteration objective; midpoint states double as regularizer anchors."""
    c = np.asarray(c)
    need_v = plan.alpha < 1.0 or plan.lam > 0
    v_mid = xm = tm = None
    if need_v:
        v_mid, xm, tm = _midpoint_velocity(student, targets, c, n_k)
    dual = dual_loss(student, targets, c, n_k, plan.alpha, plan.mode, z, _v=v_mid)
    if plan.lam > 0:
        reg = cfg_regularizer(student, xm, tm, np.tile(c, len(targets)), n_k, plan.lam, v_cond=v_mid)
        return StepLosses(nx.add(dual, reg), dual, reg)
    return StepLosses(dual, dual, None)


def init_student(teacher: VelocityModel, config: ModelConfig, seed: int,
                 from_teacher: bool = True) -> VelocityModel:
    student = VelocityModel(config, seed)
    if from_teacher:
        student.copy_shared_from(teacher)
    return student


@dataclass
class StudentRun:
    student: VelocityModel
    plan: DistillPlan
    seed: int
    curves: dict[str, list[float]] = field(default_factory=dict)

    def windowed_std(self, window: int = 50, key: str = "dual") -> float:
        """Mean standard deviation of the loss curve over fixed windows."""
        y = np.asarray(self.curves[key])
        n = len(y) // window
        if n == 0:
            return float(np.std(y))
        return float(np.mean(np.std(y[: n * window].reshape(n, window), axis=1)))


class TeacherCache:
    """Teacher trajectories for every dataset row, computed once.

    Valid because the teacher is frozen and noise pairing is fixed, so the
    per-batch solve would reproduce the same states.
    """

    def __init__(self, teacher, dataset: Dataset, plan: DistillPlan, chunk: int = 1024):
        sched = plan.teacher_schedule_obj()
        parts = []
        for start in range(0, len(dataset), chunk):
            sl = slice(start, start + chunk)
            parts.append(euler_solve(teacher, dataset.z[sl], dataset.c[sl], sched, plan.w_teacher))
        self.schedule = sched
        self.states = [np.concatenate([p.states[i] for p in parts]) for i in range(sched.steps + 1)]
        self.w = plan.w_teacher

    def trajectory(self, index, c) -> Trajectory:
        return Trajectory(self.schedule, [s[index] for s in self.states], [], np.asarray(c), self.w)


def train_student(teacher: VelocityModel, config: ModelConfig, dataset: Dataset,
                  plan: DistillPlan, iters: int | None = None, seed: int = 0,
                  cache: TeacherCache | None = None, on_step=None) -> StudentRun:
    """Distil ``teacher`` into a few-step student; deterministic under ``seed``.

    ``on_step(it, losses)`` is called after each backward pass, before the
    update, with the live loss graph.
    """
    iters = plan.iters if iters is None else iters
    if config.mode == "step-token" and set(plan.step_counts) - set(config.step_counts):
        raise ValueError("student config does not support every planned step count")
    student = init_student(teacher, config, seed, plan.init_from_teacher)
    rng = np.random.default_rng([seed, 2])
    batches = endless_batches(dataset, plan.batch_size, seed)
    if cache is None and plan.cache_teacher:
        cache = TeacherCache(teacher, dataset, plan)
    sched = plan.teacher_schedule_obj()
    weights = None
    if plan.step_weights is not None:
        weights = np.asarray(plan.step_weights, dtype=np.float64)
        weights = weights / weights.sum()
    run = StudentRun(student, plan, seed,
                     {"total": [], "dual": [], "cfg": [], "n_k": []})
    for it in range(iters):
        batch = next(batches)
        n_k = int(rng.choice(plan.step_counts, p=weights))
        if cache is not None:
            traj = cache.trajectory(batch.index, batch.c)
        else:
            traj = euler_solve(teacher, batch.z, batch.c, sched, plan.w_teacher)
        targets = targets_from_trajectory(traj, plan, n_k)
        try:
            losses = student_objective(student, targets, batch.c, n_k, plan, batch.z)
            nx.backward(losses.total)
            if on_step is not None:
                on_step(it, losses)
            lr = cosine_lr_at(plan.lr, it, iters) if plan.cosine_lr else plan.lr
            nx.adam_step(student.store, lr=lr)
        except NonFiniteError as exc:
            raise TrainingDivergence(it, str(exc)) from None
        run.curves["total"].append(float(losses.total.value))
        run.curves["dual"].append(float(losses.dual.value))
        run.curves["cfg"].append(float(losses.cfg.value) if losses.cfg is not None else 0.0)
        run.curves["n_k"].append(n_k)
    return run


def student_sample(student, z, c, n: int, w: float = 0.05, plan: DistillPlan | None = None) -> np.ndarray:
    """``n``-step guided Euler sample on the teacher-aligned student partition."""
    plan = plan or DistillPlan()
    return euler_solve(student, z, c, interval_schedule(plan, n), w, n).endpoint


# -- progressive distillation baseline ----------------------------------------

def halving_sequence(teacher_steps: int) -> list[int]:
    """Step counts visited by progressive halving down to one step.

    A non power-of-two start is first rounded down to a power of two.
    """
    n = 1 << (teacher_steps.bit_length() - 1)
    seq = [n] if n != teacher_steps else []
    while n > 1:
        n //= 2
        seq.append(n)
    return seq


def _compose(model, x, c, knots, n_label, w):
    """Push ``x`` through ``model`` along ``knots`` without recording a graph."""
    with nx.no_grad():
        for a, b in zip(knots, knots[1:]):
            v = cfg_velocity(model, x, a, c, w, n_label)
            x = x + (b - a) * (v.value if isinstance(v, Node) else v)
    return x


@dataclass
class ProgressiveRun:
    student: VelocityModel
    rounds: list[int]
    losses: dict[int, list[float]] = field(default_factory=dict)


def progressive_distill(teacher: VelocityModel, config: ModelConfig, dataset: Dataset,
                        seed: int = 0, plan: DistillPlan | None = None,
                        iters_per_round: int | None = None,
                        cache: TeacherCache | None = None) -> ProgressiveRun:
    """Halve the step count round by round with endpoint supervision.

    Each round trains a fresh copy of the previous model to cover two of the
    previous model's steps with one. The first round distils the teacher's
    knot-aligned segments. Start states come from the teacher trajectory.
    """
    plan = plan or DistillPlan()
    rounds = halving_sequence(plan.teacher_steps)
    iters_per_round = iters_per_round or max(1, plan.iters // len(rounds))
    rng = np.random.default_rng([seed, 3])
    batches = endless_batches(dataset, plan.batch_size, seed)
    tsched = plan.teacher_schedule_obj()
    t_knots = tsched.knots
    if cache is None and plan.cache_teacher:
        cache = TeacherCache(teacher, dataset, plan)

    prev_model, prev_idx, prev_label, prev_w = teacher, list(range(plan.teacher_steps + 1)), None, plan.w_teacher
    run = ProgressiveRun(teacher, rounds)
    for r, n in enumerate(rounds):
        idx = knot_indices(plan.teacher_steps, n)
        label = n if config.mode == "step-token" and n in config.step_counts else None
        if config.mode == "step-token" and label is None:
            raise ValueError(f"progressive round with {n} steps needs a token for {n}")
        student = init_student(prev_model if r else teacher, config, seed + r,
                               plan.init_from_teacher)
        if r and prev_model.config == config:
            student.store.load(prev_model.store.snapshot())
        curve = []
        for it in range(iters_per_round):
            batch = next(batches)
            if cache is not None:
                traj = cache.trajectory(batch.index, batch.c)
            else:
                traj = euler_solve(teacher, batch.z, batch.c, tsched, plan.w_teacher)
            k = int(rng.integers(n))
            a, b = idx[k], idx[k + 1]
            x0 = traj.states[a]
            inner = [t_knots[i] for i in prev_idx if a <= i <= b]
            target = _compose(prev_model, x0, batch.c, inner, prev_label, prev_w)
            try:
                v = student(x0, t_knots[a], batch.c, label)
                pred = nx.add(x0, nx.scale(v, t_knots[b] - t_knots[a]))
                loss = sq_error(pred, target)
                nx.backward(loss)
                lr = cosine_lr_at(plan.lr, it, iters_per_round) if plan.cosine_lr else plan.lr
                nx.adam_step(student.store, lr=lr)
            except NonFiniteError as exc:
                raise TrainingDivergence(it, str(exc)) from None
            curve.append(float(loss.value))
        run.losses[n] = curve
        prev_model, prev_idx, prev_label, prev_w = student, idx, label, 1.0
    run.student = prev_model
    return run
