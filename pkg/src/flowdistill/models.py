"""Velocity fields v(x_t, t, c) with selectable conditioning pathways.

The backbone is a residual MLP over the flattened state. Time enters every
mode through a sinusoidal embedding projected into the input features;
the conditioning pathway then adds one of:

``adaln``       per-layer (scale, shift, gate) modulation computed from the
                time embedding by a bias-free D -> D -> 3D map whose output
                stage starts at zero.
``step-token``  a table of ``tokens_per_step`` learnable vectors for each
                supported step count. The selected tokens form a prefix whose
                pooled readout is added to the input features.
``plain``       nothing.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .numerics import Node, ParamStore

MODES = ("adaln", "step-token", "plain")
NULL = -1  # condition id meaning "no condition"; maps to the last embedding row


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    width: int = 64
    data_dim: int = 2
    num_conditions: int = 4
    mode: str = "adaln"
    tokens_per_step: int = 3
    step_counts: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown conditioning mode {self.mode!r}; expected one of {MODES}")
        if self.layers < 1 or self.width < 1 or self.data_dim < 1:
            raise ConfigError("layers, width and data_dim must be >= 1")
        if self.width % 2:
            raise ConfigError("width must be even (sin/cos time embedding)")
        if self.num_conditions < 1:
            raise ConfigError("num_conditions must be >= 1")
        if self.tokens_per_step < 1:
            raise ConfigError("tokens_per_step must be >= 1")
        if self.mode == "step-token" and not self.step_counts:
            raise ConfigError("step-token mode needs at least one supported step count")
        object.__setattr__(self, "step_counts", tuple(int(n) for n in self.step_counts))

    @property
    def time_width(self) -> int:
        return self.width

    def with_mode(self, mode: str) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "mode": mode})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_counts"] = list(self.step_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["step_counts"] = tuple(d.get("step_counts", (1, 2, 4)))
        return cls(**d)


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal features of ``t`` with frequencies geometric from 1 to 1000.

    Returns shape (1, width) for scalar ``t`` and (B, width) for a vector.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.geomspace(1.0, 1000.0, half) if half > 1 else np.ones(1)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class VelocityModel:
    """A velocity field whose parameters live in a :class:`ParamStore`."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        D, Dd, C = config.width, config.data_dim, config.num_conditions

        def normal(shape, fan_in, gain=1.0):
            return gain * rng.standard_normal(shape) / math.sqrt(fan_in)

        s = self.store
        s.add("in.w", normal((Dd, D), Dd))
        s.add("in.b", np.zeros(D))
        s.add("time.w", normal((D, D), D))
        s.add("time.b", np.zeros(D))
        s.add("cond.table", 0.5 * rng.standard_normal((C + 1, D)))
        for layer in range(config.layers):
            s.add(f"layer{layer}.w", normal((D, D), D))
            s.add(f"layer{layer}.b", np.zeros(D))
        s.add("out.w", normal((D, Dd), D, gain=0.5))
        s.add("out.b", np.zeros(Dd))
        if config.mode == "adaln":
            for layer in range(config.layers):
                s.add(f"layer{layer}.ada1", normal((D, D), D))
                s.add(f"layer{layer}.ada2", np.zeros((D, 3 * D)))
        elif config.mode == "step-token":
            rows = len(config.step_counts) * config.tokens_per_step
            s.add("tokens", 0.5 * rng.standard_normal((rows, D)))

    # -- bookkeeping --------------------------------------------------------

    @property
    def null_id(self) -> int:
        return self.config.num_conditions

    def parameters(self) -> ParamStore:
        return self.store

    def total_params(self) -> int:
        return self.store.total_param_count()

    def copy_shared_from(self, other: "VelocityModel") -> list[str]:
        """Copy every parameter whose name and shape match ``other``'s."""
        copied = []
        for name, node in self.store:
            if name in other.store and other.store[name].shape == node.shape:
                node.value = other.store[name].value.copy()
                copied.append(name)
        return copied

    def clone(self) -> "VelocityModel":
        twin = VelocityModel(self.config, self.seed)
        twin.store.load(self.store.snapshot())
        return twin

    def token_rows(self, n: int) -> np.ndarray:
        steps = self.config.step_counts
        if n not in steps:
            raise ValueError(f"unsupported step count {n}; model supports {steps}")
        m = self.config.tokens_per_step
        k = steps.index(n)
        return np.arange(k * m, (k + 1) * m)

    # -- forward ------------------------------------------------------------

    def __call__(self, x, t, c, n: int | None = None) -> Node:
        return self.forward(x, t, c, n)

    def forward(self, x, t, c, n: int | None = None) -> Node:
        """Velocity at states ``x`` (B, D_data), times ``t``, conditions ``c``.

        ``t`` is a scalar or a length-B vector in [0, 1]. ``c`` holds integer
        condition ids with :data:`NULL` for the unconditional branch. ``n``
        selects the step tokens and is required in step-token mode only.
        """
        cfg = self.config
        p = self.store
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
            raise ValueError("t must lie in [0, 1]")
        if cfg.mode == "step-token":
            if n is None:
                raise ValueError("step-token mode needs a step count n")
            rows = self.token_rows(n)
        c_idx = np.where(np.asarray(c) == NULL, self.null_id, np.asarray(c))
        if np.any(c_idx < 0) or np.any(c_idx > self.null_id):
            raise ValueError("condition id out of range")

        temb = nx.constant(time_embedding(t_arr, cfg.time_width))
        h = nx.matmul(x, p["in.w"]) + p["in.b"]
        h = h + (nx.matmul(temb, p["time.w"]) + p["time.b"])
        h = h + nx.take_rows(p["cond.table"], c_idx)
        if cfg.mode == "step-token":
            prefix = nx.take_rows(p["tokens"], rows)
            h = h + nx.mean(prefix, axis=0)

        D = cfg.width
        for layer in range(cfg.layers):
            normed = nx.layer_norm(h)
            if cfg.mode == "adaln":
                mod = nx.matmul(nx.silu(nx.matmul(temb, p[f"layer{layer}.ada1"])),
                                p[f"layer{layer}.ada2"])
                scale = nx.slice_cols(mod, 0, D)
                shift = nx.slice_cols(mod, D, 2 * D)
                gate = nx.slice_cols(mod, 2 * D, 3 * D)
                normed = (1.0 + scale) * normed + shift
                update = nx.silu(nx.matmul(normed, p[f"layer{layer}.w"]) + p[f"layer{layer}.b"])
                h = h + (1.0 + gate) * update
            else:
                h = h + nx.silu(nx.matmul(normed, p[f"layer{layer}.w"]) + p[f"layer{layer}.b"])
        return nx.matmul(h, p["out.w"]) + p["out.b"]


# -- parameter accounting -----------------------------------------------------

class ConditioningCount(NamedTuple):
    token: int
    adaln: int
    ratio: Fraction

    @property
    def ratio_rounded(self) -> int:
        """Ratio rounded half-up to an integer, as printed in the proof."""
        return math.floor(self.ratio + Fraction(1, 2))


def count_conditioning_params(steps: int, layers: int, width: int,
                              tokens_per_step: int = 1) -> ConditioningCount:
    """Exact step-conditioning parameter counts of the two pathways.

    Token conditioning stores ``steps * tokens_per_step`` vectors of width D;
    adaLN carries a bias-free D -> D -> 3D map per layer, 4 D^2 each.
    """
    token = steps * tokens_per_step * width
    adaln = 4 * layers * width * width
    return ConditioningCount(token, adaln, Fraction(adaln, token))


def adaln_pathway_params(config: ModelConfig) -> int:
    return 4 * config.layers * config.width ** 2


def token_pathway_params(config: ModelConfig) -> int:
    return len(config.step_counts) * config.tokens_per_step * config.width


def step_entropy_bits(prior) -> float:
    """Shannon entropy in bits of a distribution over supported step counts."""
    p = np.asarray(prior, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if not math.isclose(p.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
        raise ValueError(f"probabilities must sum to 1, got {p.sum()}")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz))) + 0.0


def uniform_prior(steps) -> np.ndarray:
    k = len(tuple(steps))
    return np.full(k, 1.0 / k)


def entropy_lower_bound_params(num_steps: int, width: int, bits_decimals: int | None = 2) -> int:
    """Parameter floor log2(K) * D, rounded up.

    The entropy is first rounded to ``bits_decimals`` places (the published
    arithmetic uses 1.58 bits for K=3); pass ``None`` for the unrounded bound.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    bits = math.log2(num_steps)
    if bits_decimals is not None:
        bits = round(bits, bits_decimals)
    return math.ceil(bits * width - 1e-9)


def total_params(model: VelocityModel) -> int:
    return model.total_params()
