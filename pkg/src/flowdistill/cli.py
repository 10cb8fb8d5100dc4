"""Command-line interface.

Exit codes: 0 success, 1 configuration or input error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, save_report
from .config import RunConfig, load_config
from .datasets import DatasetError, generate, load_csv
from .distill import (
    DistillPlan, cfg_regularizer, dual_loss, interval_schedule, teacher_targets,
    train_student,
)
from .experiments import ablate, write_rows_csv
from .flow import euler_solve, train_teacher
from .metrics import (
    MetricReport, conditional_distance, endpoint_mse, ks_alignment, latency_bench, radial,
)
from .models import (
    ConfigError, ModelConfig, VelocityModel, count_conditioning_params,
    entropy_lower_bound_params, step_entropy_bits, uniform_prior,
)
from .plotting import plot_curves, plot_histograms, plot_samples, plot_sweep

OUT_ENV = "FLOWDISTILL_OUT"
COMMANDS = ("train-teacher", "distill", "sample", "eval", "ablate", "cfg-sweep", "bench",
            "check-grads", "count-params")
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--mode", choices=("teacher-forced", "free-rollout"))
    common.add_argument("--steps", type=int, choices=(1, 2, 4))
    common.add_argument("--w", type=float)
    common.add_argument("--format", choices=("csv", "json", "svg"), default="json")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="flowdistill", description="Few-step flow-matching distillation lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("distill", "eval"):
            p.add_argument("--teacher", type=Path, help="teacher checkpoint manifest")
        if name in ("sample", "eval", "cfg-sweep", "bench"):
            p.add_argument("--checkpoint", type=Path, help="model checkpoint manifest")
        if name == "count-params":
            p.add_argument("--layers", type=int, default=16)
            p.add_argument("--width", type=int, default=512)
            p.add_argument("--num-steps", type=int, default=3)
            p.add_argument("--tokens-per-step", type=int, default=1)
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.mode is not None:
        cfg.set("plan.mode", args.mode)
    return cfg


def _out(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(args, payload: dict, rows: list[dict] | None = None, columns=None) -> None:
    if args.format == "csv" and rows is not None:
        print(",".join(columns))
        for row in rows:
            print(",".join(str(row[c]) for c in columns))
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))


def _train_data(cfg: RunConfig):
    if cfg["dataset.kind"] == "csv":
        if not cfg["dataset.csv"]:
            raise ConfigError("dataset.kind = csv needs dataset.csv = PATH")
        return load_csv(cfg["dataset.csv"], cfg["dataset.dim"], header=cfg["dataset.csv_header"],
                        seed=cfg["seed"])
    return generate(cfg.dataset_spec())


def _heldout(cfg: RunConfig, train):
    if cfg["dataset.kind"] == "csv":
        return train
    return generate(cfg.heldout_spec())


def _teacher_path(args, cfg: RunConfig, out: Path) -> Path:
    path = args.teacher or (Path(cfg["teacher.checkpoint"]) if cfg["teacher.checkpoint"] else None)
    path = path or out / "teacher.json"
    if not Path(path).exists():
        raise ConfigError(f"teacher checkpoint not found: {path}")
    return Path(path)


def _checkpoint_path(args, out: Path, default: str) -> Path:
    path = args.checkpoint or out / default
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return Path(path)


# -- commands -------------------------------------------------------------------

def cmd_train_teacher(args) -> int:
    cfg, out = _config(args), _out(args)
    train = _train_data(cfg)
    heldout = _heldout(cfg, train)
    seed = cfg["seed"]
    run = train_teacher(cfg.model_config("adaln", train.num_conditions, train.data_dim), train,
                        cfg["teacher.epochs"], seed, lr=cfg["teacher.lr"],
                        batch_size=cfg["teacher.batch_size"], p_uncond=cfg["teacher.p_uncond"])
    save_checkpoint(run.model, out / "teacher.json")
    plan = cfg.plan()
    sched = plan.teacher_schedule_obj()
    x = euler_solve(run.model, heldout.z, heldout.c, sched, plan.w_teacher).endpoint
    untrained = VelocityModel(run.model.config, seed + 777)
    xu = euler_solve(untrained, heldout.z, heldout.c, sched, plan.w_teacher).endpoint
    report = MetricReport(f"teacher-seed{seed}", [seed], cfg.echo())
    proj = cfg["eval.projections"]
    report.add("sliced_wasserstein", conditional_distance(x, heldout.c, heldout.x1, heldout.c, proj, seed))
    report.add("untrained_sliced_wasserstein",
               conditional_distance(xu, heldout.c, heldout.x1, heldout.c, proj, seed))
    report.add("final_loss", run.losses[-1])
    report.add("params", run.model.total_params())
    payload = report.to_dict()
    payload["loss_curve"] = run.losses
    save_report(payload, out / "teacher_report.json")
    write_rows_csv([{"step": i, "loss": v} for i, v in enumerate(run.losses)],
                   out / "teacher_loss.csv", ["step", "loss"])
    plot_curves({"teacher": run.losses}, out / "teacher_loss.svg", smooth=20)
    _emit(args, report.to_dict())
    return 0


def cmd_distill(args) -> int:
    cfg, out = _config(args), _out(args)
    teacher = load_checkpoint(_teacher_path(args, cfg, out))
    train = _train_data(cfg)
    plan = cfg.plan()
    if args.steps is not None:
        plan = replace(plan, step_counts=(args.steps,))
    config = cfg.model_config(cfg["student.mode"], train.num_conditions, train.data_dim)
    config = replace(config, step_counts=plan.step_counts)
    run = train_student(teacher, config, train, plan, seed=cfg["seed"])
    save_checkpoint(run.student, out / "student.json", extra={"plan": plan.to_dict()})
    heldout = _heldout(cfg, train)
    report = MetricReport(f"distill-seed{cfg['seed']}", [cfg["seed"]], cfg.echo())
    report.notes["rollout_mode"] = plan.mode
    w = cfg["eval.w"] if args.w is None else args.w
    for n in plan.step_counts:
        x = euler_solve(run.student, heldout.z, heldout.c, interval_schedule(plan, n), w,
                        _label(run.student, n)).endpoint
        report.add(f"sliced_wasserstein@{n}",
                   conditional_distance(x, heldout.c, heldout.x1, heldout.c,
                                        cfg["eval.projections"], cfg["seed"]))
    report.add("final_loss", run.curves["total"][-1])
    report.add("windowed_std", run.windowed_std())
    report.add("params", run.student.total_params())
    payload = report.to_dict()
    payload["plan"] = plan.to_dict()
    payload["curves"] = run.curves
    save_report(payload, out / "student_report.json")
    rows = [{"step": i, "total": run.curves["total"][i], "dual": run.curves["dual"][i],
             "cfg": run.curves["cfg"][i], "n_k": run.curves["n_k"][i]}
            for i in range(len(run.curves["total"]))]
    write_rows_csv(rows, out / "student_curves.csv", ["step", "total", "dual", "cfg", "n_k"])
    plot_curves({"total": run.curves["total"]}, out / "student_loss.svg", smooth=20)
    _emit(args, report.to_dict())
    return 0


def _load_student(args, out):
    return load_checkpoint(_checkpoint_path(args, out, "student.json"))


def _label(model: VelocityModel, n: int):
    return n if model.config.mode == "step-token" else None


def cmd_sample(args) -> int:
    cfg, out = _config(args), _out(args)
    model = _load_student(args, out)
    plan, n = cfg.plan(), args.steps or 1
    w = 0.05 if args.w is None else args.w
    heldout = _heldout(cfg, generate(cfg.dataset_spec()))
    x = euler_solve(model, heldout.z, heldout.c, interval_schedule(plan, n), w, _label(model, n)).endpoint
    rows = [{**{f"x{i}": repr(float(v)) for i, v in enumerate(row)}, "c": int(c)}
            for row, c in zip(x, heldout.c)]
    columns = [f"x{i}" for i in range(x.shape[1])] + ["c"]
    write_rows_csv(rows, out / "samples.csv", columns)
    if x.shape[1] == 2:
        plot_samples(x, heldout.c, out / "samples.svg", reference=heldout.x1)
    print(f"wrote {len(x)} samples to {out / 'samples.csv'}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg, out = _config(args), _out(args)
    student = _load_student(args, out)
    teacher = load_checkpoint(_teacher_path(args, cfg, out))
    plan, n = cfg.plan(), args.steps or 1
    w = cfg["eval.w"] if args.w is None else args.w
    heldout = _heldout(cfg, generate(cfg.dataset_spec()))
    seed, proj = cfg["seed"], cfg["eval.projections"]
    xs = euler_solve(student, heldout.z, heldout.c, interval_schedule(plan, n), w,
                     _label(student, n)).endpoint
    xt = euler_solve(teacher, heldout.z, heldout.c, plan.teacher_schedule_obj(), plan.w_teacher).endpoint
    report = MetricReport(f"eval-seed{seed}", [seed], cfg.echo())
    report.add("student_sliced_wasserstein", conditional_distance(xs, heldout.c, heldout.x1, heldout.c, proj, seed))
    report.add("teacher_sliced_wasserstein", conditional_distance(xt, heldout.c, heldout.x1, heldout.c, proj, seed))
    report.add("endpoint_mse", endpoint_mse(student, teacher, heldout.z, heldout.c, n, w, plan))
    report.add("ks_radial", ks_alignment(radial(xt), radial(xs)))
    lat_s = latency_bench(student, n, w=w, schedule=interval_schedule(plan, n))
    lat_t = latency_bench(teacher, plan.teacher_steps, w=plan.w_teacher,
                          schedule=plan.teacher_schedule_obj())
    report.add("student_seconds_per_sample", lat_s.seconds_per_sample)
    report.add("teacher_seconds_per_sample", lat_t.seconds_per_sample)
    report.add("student_nfe", lat_s.nfe)
    report.add("teacher_nfe", lat_t.nfe)
    report.add("student_params", student.total_params())
    report.add("teacher_params", teacher.total_params())
    report.notes["latency"] = "wall-clock seconds per sample; no audio duration exists, so no RTF"
    hi = float(np.ceil(radial(heldout.x1).max() + 1.0))
    for name, x in (("data", heldout.x1), ("teacher", xt), ("student", xs)):
        report.add_histogram(name, radial(x), 0.0, hi)
    save_report(report.to_dict(), out / "eval_report.json")
    plot_histograms(report.histograms, out / "eval_radial.svg")
    _emit(args, report.to_dict())
    return 0


def cmd_ablate(args) -> int:
    cfg, out = _config(args), _out(args)
    n = args.steps or cfg["eval.steps"]
    rows = ablate(cfg, cfg["ablate.axes"], cfg["seeds"], n=n,
                  w=cfg["eval.w"] if args.w is None else args.w)
    columns = ["arm", "dual", "weak_cfg", "step_token", "params", "median_distance"]
    write_rows_csv(rows, out / "ablation.csv", columns)
    save_report({"config": cfg.echo(), "rows": rows}, out / "ablation.json")
    _emit(args, {"rows": rows}, rows, columns)
    return 0


def cmd_cfg_sweep(args) -> int:
    cfg, out = _config(args), _out(args)
    model = _load_student(args, out)
    plan, n = cfg.plan(), args.steps or 1
    heldout = _heldout(cfg, generate(cfg.dataset_spec()))
    rows = []
    for w in cfg["sweep.weights"]:
        if not 0.0 <= w <= 1.0:
            raise ConfigError(f"sweep weight {w} outside [0, 1]")
        x = euler_solve(model, heldout.z, heldout.c, interval_schedule(plan, n), w,
                        _label(model, n)).endpoint
        rows.append({"w": w, "distance": conditional_distance(
            x, heldout.c, heldout.x1, heldout.c, cfg["eval.projections"], cfg["seed"])})
    write_rows_csv(rows, out / "cfg_sweep.csv", ["w", "distance"])
    plot_sweep([r["w"] for r in rows], [r["distance"] for r in rows], out / "cfg_sweep.svg")
    _emit(args, {"seed": cfg["seed"], "config": cfg.echo(), "rows": rows}, rows, ["w", "distance"])
    return 0


def cmd_bench(args) -> int:
    cfg, out = _config(args), _out(args)
    model = load_checkpoint(_checkpoint_path(args, out, "student.json"))
    plan = cfg.plan()
    n = args.steps or (1 if model.config.mode == "step-token" else plan.teacher_steps)
    w = 0.05 if args.w is None else args.w
    sched = interval_schedule(plan, n) if model.config.mode == "step-token" else None
    res = latency_bench(model, n, w=w, schedule=sched)
    payload = {"steps": n, "w": w, "nfe": res.nfe, "seconds_per_sample": res.seconds_per_sample,
               "repeats": res.repeats, "note": "wall-clock per sample, not RTF"}
    _emit(args, payload, [payload], ["steps", "w", "nfe", "seconds_per_sample"])
    return 0


def grad_check_suite(seed: int = 0) -> dict[str, float]:
    """Finite-difference checks of the distillation losses on a tiny random model."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(layers=2, width=6, data_dim=2, num_conditions=3, mode="step-token",
                      tokens_per_step=2, step_counts=(1, 2, 4))
    teacher = VelocityModel(replace(cfg, mode="adaln"), seed)
    student = VelocityModel(cfg, seed + 1)
    for _, node in teacher.store:
        node.value = 0.5 * rng.standard_normal(node.shape)
    plan = DistillPlan(teacher_steps=4, teacher_schedule="uniform")
    z = rng.standard_normal((5, 2))
    c = rng.integers(0, 3, size=5)
    one = teacher_targets(teacher, z, c, plan, 1)
    two = teacher_targets(teacher, z, c, plan, 2)
    four = teacher_targets(teacher, z, c, plan, 4)
    a = plan.alpha
    results = {
        "single_interval_dual_loss": nx.finite_diff_check(
            lambda: dual_loss(student, one, c, 1, a), student.store),
        "averaged_dual_loss": nx.finite_diff_check(
            lambda: dual_loss(student, four, c, 4, a), student.store),
        "averaged_dual_loss_free_rollout": nx.finite_diff_check(
            lambda: dual_loss(student, two, c, 2, a, "free-rollout", z), student.store),
    }
    xm = np.concatenate([t.x_mf for t in two])
    tm = np.concatenate([np.full(5, t.t_mf) for t in two])
    cc = np.tile(c, 2)
    # The stop-gradient target is held fixed while differencing, which is what sg means.
    with nx.no_grad():
        frozen = nx.constant(student(xm, tm, cc, 2).value)
    results["cfg_regularizer"] = nx.finite_diff_check(
        lambda: cfg_regularizer(student, xm, tm, cc, 2, 0.3, v_cond=frozen), student.store)
    student.store.zero_grad()
    nx.backward(cfg_regularizer(student, xm, tm, cc, 2, 0.3))
    cond_rows = student.store["cond.table"].grad[np.unique(cc)]
    results["sg_conditional_rows_max_abs"] = float(np.max(np.abs(cond_rows)))
    return results


def cmd_check_grads(args) -> int:
    res = grad_check_suite(args.seed or 0)
    print(json.dumps(res, indent=2, sort_keys=True))
    ok = all(v < GRAD_TOL for k, v in res.items() if k != "sg_conditional_rows_max_abs")
    ok = ok and res["sg_conditional_rows_max_abs"] == 0.0
    return 0 if ok else 2


def cmd_count_params(args) -> int:
    counts = count_conditioning_params(args.num_steps, args.layers, args.width, args.tokens_per_step)
    steps = [1, 2, 4][: args.num_steps] if args.num_steps <= 3 else list(range(1, args.num_steps + 1))
    payload = {
        "layers": args.layers, "width": args.width, "num_steps": args.num_steps,
        "tokens_per_step": args.tokens_per_step,
        "token_params": counts.token, "adaln_params": counts.adaln,
        "ratio": counts.ratio_rounded, "ratio_exact": f"{counts.ratio.numerator}/{counts.ratio.denominator}",
        "entropy_bits": step_entropy_bits(uniform_prior(steps)),
        "entropy_lower_bound": entropy_lower_bound_params(args.num_steps, args.width),
    }
    columns = ["token_params", "adaln_params", "ratio", "entropy_bits", "entropy_lower_bound"]
    _emit(args, payload, [payload], columns)
    return 0


HANDLERS = {
    "train-teacher": cmd_train_teacher, "distill": cmd_distill, "sample": cmd_sample,
    "eval": cmd_eval, "ablate": cmd_ablate, "cfg-sweep": cmd_cfg_sweep, "bench": cmd_bench,
    "check-grads": cmd_check_grads, "count-params": cmd_count_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # Finiteness is checked explicitly, so numpy's own overflow warnings are noise.
        with np.errstate(over="ignore", invalid="ignore"):
            return HANDLERS[args.command](args)
    except nx.NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
