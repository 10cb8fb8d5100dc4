"""Desk-scale experiments: teacher baselines, distillation arms, ablations, CFG sweeps.

All comparisons share one protocol. For a seed, the training set and a
held-out set come from the same generator; the teacher is trained once and
its trajectories are cached. Every arm is then scored by the per-condition
sliced Wasserstein distance between its samples (drawn from the held-out
noise/condition pairs) and the held-out data.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datasets import Dataset, generate
from .distill import (
    DistillPlan, ProgressiveRun, StudentRun, TeacherCache, endpoint_baseline_plan,
    halving_sequence, interval_schedule, progressive_distill, train_student,
)
from .flow import euler_solve, train_teacher
from .metrics import conditional_distance, histogram, ks_alignment, radial
from .models import VelocityModel, adaln_pathway_params, token_pathway_params

log = logging.getLogger(__name__)

ABLATION_AXES = ("dual", "weak-cfg", "step-token")
SWEEP_WEIGHTS = (0.0, 0.05, 0.1, 0.2, 0.5)


@dataclass
class Context:
    """Everything shared by the arms of one seed."""

    cfg: RunConfig
    seed: int
    train: Dataset
    heldout: Dataset
    teacher: VelocityModel
    teacher_losses: list[float]
    plan: DistillPlan
    cache: TeacherCache | None = None

    def distance(self, samples) -> float:
        return conditional_distance(samples, self.heldout.c, self.heldout.x1, self.heldout.c,
                                    self.cfg["eval.projections"], self.seed)

    def sample(self, model: VelocityModel, n: int, w: float) -> np.ndarray:
        label = n if model.config.mode == "step-token" else None
        sched = interval_schedule(self.plan, n)
        return euler_solve(model, self.heldout.z, self.heldout.c, sched, w, label).endpoint

    def teacher_samples(self, w: float | None = None) -> np.ndarray:
        w = self.plan.w_teacher if w is None else w
        return euler_solve(self.teacher, self.heldout.z, self.heldout.c,
                           self.plan.teacher_schedule_obj(), w).endpoint


def prepare(cfg: RunConfig, seed: int, teacher: VelocityModel | None = None) -> Context:
    train = generate(cfg.dataset_spec(seed))
    heldout = generate(cfg.heldout_spec(seed))
    losses: list[float] = []
    if teacher is None:
        run = train_teacher(cfg.model_config("adaln", train.num_conditions, train.data_dim), train,
                            cfg["teacher.epochs"], seed, lr=cfg["teacher.lr"],
                            batch_size=cfg["teacher.batch_size"], p_uncond=cfg["teacher.p_uncond"])
        teacher, losses = run.model, run.losses
    plan = cfg.plan()
    cache = TeacherCache(teacher, train, plan) if plan.cache_teacher else None
    return Context(cfg, seed, train, heldout, teacher, losses, plan, cache)


@dataclass(frozen=True)
class Arm:
    """One distillation recipe, described by the three ablation switches."""

    name: str
    dual: bool = True
    weak_cfg: bool = True
    step_token: bool = True
    endpoint_only: bool = False
    progressive: bool = False

    def plan(self, base: DistillPlan) -> DistillPlan:
        if self.endpoint_only:
            return endpoint_baseline_plan(base)
        return replace(base, alpha=base.alpha if self.dual else 1.0,
                       lam=base.lam if self.weak_cfg else 0.0)

    def mode(self) -> str:
        return "step-token" if self.step_token else "adaln"


FULL = Arm("full")
DUAL_OFF = Arm("dual-off", dual=False)
ENDPOINT_ONLY = Arm("endpoint-only", dual=False, weak_cfg=False, step_token=False, endpoint_only=True)
PROGRESSIVE = Arm("progressive", dual=False, weak_cfg=False, step_token=False, progressive=True)


@dataclass
class ArmResult:
    arm: Arm
    model: VelocityModel
    curves: dict = field(default_factory=dict)
    rounds: list[int] = field(default_factory=list)


def run_arm(ctx: Context, arm: Arm) -> ArmResult:
    config = ctx.cfg.model_config(arm.mode(), ctx.train.num_conditions, ctx.train.data_dim)
    plan = arm.plan(ctx.plan)
    if arm.progressive:
        run: ProgressiveRun = progressive_distill(ctx.teacher, config, ctx.train, ctx.seed, plan,
                                                  cache=ctx.cache)
        curves = {f"round{n}": v for n, v in run.losses.items()}
        return ArmResult(arm, run.student, curves, [plan.teacher_steps] + run.rounds)
    srun: StudentRun = train_student(ctx.teacher, config, ctx.train, plan, seed=ctx.seed,
                                     cache=ctx.cache)
    curves = dict(srun.curves)
    curves["windowed_std"] = srun.windowed_std()
    return ArmResult(arm, srun.student, curves)


def ablation_grid(axes=ABLATION_AXES) -> list[Arm]:
    """All 2^|axes| on/off combinations; axes left out stay on."""
    axes = tuple(axes)
    unknown = set(axes) - set(ABLATION_AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes {sorted(unknown)}")
    arms = []
    for bits in itertools.product((False, True), repeat=len(axes)):
        flags = dict(zip(axes, bits))
        name = ",".join(f"{a}={'on' if flags[a] else 'off'}" for a in axes)
        arms.append(Arm(name, dual=flags.get("dual", True), weak_cfg=flags.get("weak-cfg", True),
                        step_token=flags.get("step-token", True)))
    return arms


def arm_param_count(ctx_or_cfg, arm: Arm) -> int:
    cfg = ctx_or_cfg.cfg if isinstance(ctx_or_cfg, Context) else ctx_or_cfg
    return VelocityModel(cfg.model_config(arm.mode())).total_params()


def ablate(cfg: RunConfig, axes=ABLATION_AXES, seeds=None, n: int = 1,
           w: float | None = None, contexts: dict | None = None) -> list[dict]:
    """Run every ablation cell for every seed; one row per cell with the median distance."""
    seeds = tuple(cfg["seeds"] if seeds is None else seeds)
    w = cfg["eval.w"] if w is None else w
    arms = ablation_grid(axes)
    per_arm: dict[str, list[float]] = {a.name: [] for a in arms}
    for seed in seeds:
        ctx = contexts[seed] if contexts and seed in contexts else prepare(cfg, seed)
        for arm in arms:
            result = run_arm(ctx, arm)
            per_arm[arm.name].append(ctx.distance(ctx.sample(result.model, n, w)))
    rows = []
    for arm in arms:
        d = per_arm[arm.name]
        rows.append({
            "arm": arm.name, "dual": arm.dual, "weak_cfg": arm.weak_cfg,
            "step_token": arm.step_token, "params": arm_param_count(cfg, arm),
            "median_distance": float(np.median(d)), "distances": d, "seeds": list(seeds),
        })
    return rows


def cfg_sweep(ctx: Context, student: VelocityModel, weights=SWEEP_WEIGHTS, n: int = 1) -> list[dict]:
    for w in weights:
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"sweep weight {w} outside [0, 1]")
    return [{"w": float(w), "distance": ctx.distance(ctx.sample(student, n, w))} for w in weights]


def param_gap(cfg: RunConfig) -> dict:
    """Exact parameter accounting of the adaLN and step-token student variants."""
    base = cfg.model_config("adaln")
    adaln = VelocityModel(base).total_params()
    token = VelocityModel(cfg.model_config("step-token")).total_params()
    plain = VelocityModel(cfg.model_config("plain")).total_params()
    return {"adaln": adaln, "step_token": token, "plain": plain,
            "difference": adaln - token,
            "predicted_difference": adaln_pathway_params(base) - token_pathway_params(base)}


# -- the multi-seed study ------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    teacher_distance: float
    untrained_distance: float
    distances: dict[str, float]
    ks: dict[str, float]
    sweep: list[dict]
    windowed_std: dict[str, float]
    rounds: list[int]
    histograms: dict[str, dict]


def run_seed(cfg: RunConfig, seed: int, w: float | None = None) -> SeedResult:
    """Teacher, baselines and the full-recipe student for one seed."""
    w = cfg["eval.w"] if w is None else w
    ctx = prepare(cfg, seed)
    teacher_x = ctx.teacher_samples()
    untrained = VelocityModel(ctx.teacher.config, seed + 777)
    untrained_x = euler_solve(untrained, ctx.heldout.z, ctx.heldout.c,
                              ctx.plan.teacher_schedule_obj(), ctx.plan.w_teacher).endpoint
    distances, ks, stds, samples = {}, {}, {}, {}
    results = {arm.name: run_arm(ctx, arm) for arm in (FULL, DUAL_OFF, ENDPOINT_ONLY, PROGRESSIVE)}
    for name, res in results.items():
        steps = ctx.plan.step_counts if name in ("full",) else (1,)
        for n in steps:
            x = ctx.sample(res.model, n, w)
            distances[f"{name}@{n}"] = ctx.distance(x)
            if n == 1:
                samples[name] = x
                ks[name] = ks_alignment(radial(teacher_x), radial(x))
        if "windowed_std" in res.curves:
            stds[name] = res.curves["windowed_std"]
    hi = float(np.ceil(np.max(radial(ctx.heldout.x1)) + 1.0))
    hists = {name: histogram(radial(x), 0.0, hi) for name, x in samples.items()}
    hists["teacher"] = histogram(radial(teacher_x), 0.0, hi)
    return SeedResult(
        seed=seed,
        teacher_distance=ctx.distance(teacher_x),
        untrained_distance=ctx.distance(untrained_x),
        distances=distances, ks=ks,
        sweep=cfg_sweep(ctx, results["full"].model, cfg["sweep.weights"]),
        windowed_std=stds, rounds=results["progressive"].rounds, histograms=hists)


def wins(a: list[float], b: list[float]) -> int:
    """Number of seeds where ``a`` is strictly below ``b``."""
    return int(sum(x < y for x, y in zip(a, b)))


def summarize(results: list[SeedResult]) -> dict:
    def col(key):
        return [r.distances[key] for r in results]

    summary = {
        "seeds": [r.seed for r in results],
        "teacher_distance": [r.teacher_distance for r in results],
        "untrained_distance": [r.untrained_distance for r in results],
        "median": {k: float(np.median(col(k))) for k in results[0].distances},
        "wins": {
            "full<dual-off": wins(col("full@1"), col("dual-off@1")),
            "full<endpoint-only": wins(col("full@1"), col("endpoint-only@1")),
            "full<progressive": wins(col("full@1"), col("progressive@1")),
            "ks full<endpoint-only": wins([r.ks["full"] for r in results],
                                            [r.ks["endpoint-only"] for r in results]),
            "d4<=d2": int(sum(r.distances["full@4"] <= r.distances["full@2"] for r in results)),
            "d2<=d1": int(sum(r.distances["full@2"] <= r.distances["full@1"] for r in results)),
            "sweep w0.5 worse than w0 and w0.05": int(sum(_sweep_degrades(r.sweep) for r in results)),
            "std dual<off": wins([r.windowed_std["full"] for r in results],
                                 [r.windowed_std["dual-off"] for r in results]),
        },
    }
    return summary


def _sweep_degrades(sweep: list[dict]) -> bool:
    d = {round(row["w"], 6): row["distance"] for row in sweep}
    return d[0.5] > d[0.0] and d[0.5] > d[0.05]


def seed_result_dict(r: SeedResult) -> dict:
    return {
        "seed": r.seed, "teacher_distance": r.teacher_distance,
        "untrained_distance": r.untrained_distance, "distances": r.distances, "ks": r.ks,
        "sweep": r.sweep, "windowed_std": r.windowed_std, "rounds": r.rounds,
        "histograms": r.histograms,
    }


def write_rows_csv(rows: list[dict], path, columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])
    return path


def _cell(value):
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else "nan"
    if isinstance(value, bool):
        return "on" if value else "off"
    return value
