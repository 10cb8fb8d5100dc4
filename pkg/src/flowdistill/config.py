"""Plain-text ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are errors so that
typos never fall back silently to defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .datasets import DatasetSpec, heldout_spec
from .distill import DistillPlan
from .models import ConfigError, ModelConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _words(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


SCHEMA: dict[str, tuple] = {
    "dataset.kind": (str, "gauss-mixture"),
    "dataset.dim": (int, 2),
    "dataset.conditions": (int, 4),
    "dataset.size": (int, 5000),
    "dataset.csv": (str, ""),
    "dataset.csv_header": (_bool, False),
    "heldout.size": (int, 2000),
    "model.layers": (int, 4),
    "model.width": (int, 64),
    "model.tokens_per_step": (int, 3),
    "teacher.epochs": (int, 40),
    "teacher.lr": (float, 1e-3),
    "teacher.batch_size": (int, 256),
    "teacher.p_uncond": (float, 0.02),
    "teacher.checkpoint": (str, ""),
    "plan.step_counts": (_ints, (1, 2, 4)),
    "plan.alpha": (float, 0.7),
    "plan.lam": (float, 0.01),
    "plan.w_teacher": (float, 0.7),
    "plan.teacher_steps": (int, 10),
    "plan.teacher_schedule": (str, "cosine"),
    "plan.mode": (str, "teacher-forced"),
    "plan.midpoint": (str, "global"),
    "plan.iters": (int, 1500),
    "plan.batch_size": (int, 128),
    "plan.lr": (float, 1e-3),
    "plan.init_from_teacher": (_bool, False),
    "plan.cache_teacher": (_bool, True),
    "student.mode": (str, "step-token"),
    "eval.projections": (int, 512),
    "eval.w": (float, 1.0),
    "eval.steps": (int, 1),
    "sweep.weights": (_floats, (0.0, 0.05, 0.1, 0.2, 0.5)),
    "ablate.axes": (_words, ("dual", "weak-cfg", "step-token")),
    "seed": (int, 0),
    "seeds": (_ints, tuple(range(10))),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    lines: list[str] = field(default_factory=list)
    source: str | None = None

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values.get(key, SCHEMA[key][1])

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def echo(self) -> dict:
        """Every key with its effective value, for embedding into reports."""
        out = {}
        for key in sorted(SCHEMA):
            value = self[key]
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    def dataset_spec(self, seed: int | None = None) -> DatasetSpec:
        return DatasetSpec(self["dataset.kind"], self["dataset.dim"], self["dataset.conditions"],
                           self["dataset.size"], self["seed"] if seed is None else seed)

    def heldout_spec(self, seed: int | None = None) -> DatasetSpec:
        return heldout_spec(self.dataset_spec(seed), self["heldout.size"])

    def model_config(self, mode: str, num_conditions: int | None = None,
                     data_dim: int | None = None) -> ModelConfig:
        return ModelConfig(
            layers=self["model.layers"], width=self["model.width"],
            data_dim=data_dim or self["dataset.dim"],
            num_conditions=num_conditions or self["dataset.conditions"],
            mode=mode, tokens_per_step=self["model.tokens_per_step"],
            step_counts=self["plan.step_counts"])

    def plan(self) -> DistillPlan:
        try:
            return DistillPlan(
                step_counts=self["plan.step_counts"], alpha=self["plan.alpha"],
                lam=self["plan.lam"], w_teacher=self["plan.w_teacher"],
                teacher_steps=self["plan.teacher_steps"],
                teacher_schedule=self["plan.teacher_schedule"], mode=self["plan.mode"],
                midpoint=self["plan.midpoint"], iters=self["plan.iters"],
                batch_size=self["plan.batch_size"], lr=self["plan.lr"],
                init_from_teacher=self["plan.init_from_teacher"],
                cache_teacher=self["plan.cache_teacher"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_config(text: str, source: str | None = None) -> RunConfig:
    cfg = RunConfig(lines=text.splitlines(), source=source)
    where = source or "<config>"
    for lineno, raw in enumerate(cfg.lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}:{lineno}: unknown config key {key!r}")
        kind = SCHEMA[key][0]
        try:
            cfg.values[key] = kind(value)
        except ValueError as exc:
            raise ConfigError(f"{where}:{lineno}: bad value for {key}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
