import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowdistill import numerics as nx
from flowdistill.models import (
    NULL, ConfigError, ModelConfig, VelocityModel, adaln_pathway_params,
    count_conditioning_params, entropy_lower_bound_params, step_entropy_bits,
    time_embedding, token_pathway_params, uniform_prior,
)

from conftest import randomized, tiny_config


def test_published_token_count_and_ratio():
    counts = count_conditioning_params(steps=3, layers=16, width=512, tokens_per_step=1)
    assert counts.token == 1536
    assert counts.ratio == Fraction(4 * 16 * 512, 3)
    assert counts.ratio_rounded == 10923


def test_unit_case_of_ratio():
    counts = count_conditioning_params(1, 1, 1)
    assert (counts.token, counts.adaln, counts.ratio) == (1, 4, 4)


def test_entropy_values():
    assert abs(step_entropy_bits(uniform_prior((1, 2, 4))) - math.log2(3)) < 1e-12
    assert round(step_entropy_bits(uniform_prior((1, 2, 4))), 2) == 1.58
    assert step_entropy_bits([1.0, 0.0, 0.0]) == 0.0
    assert step_entropy_bits(uniform_prior(range(4))) == 2.0


def test_entropy_rejects_bad_prior():
    with pytest.raises(ValueError):
        step_entropy_bits([0.5, 0.6])
    with pytest.raises(ValueError):
        step_entropy_bits([1.5, -0.5])


def test_entropy_lower_bound():
    assert entropy_lower_bound_params(3, 512) == 809
    assert entropy_lower_bound_params(2, 1) == 1
    assert entropy_lower_bound_params(4, 100) == 200


def test_zero_gate_adaln_equals_plain_backbone(rng):
    cfg = tiny_config("adaln", width=8, layers=3)
    adaln = VelocityModel(cfg, seed=5)
    plain = VelocityModel(replace(cfg, mode="plain"), seed=99)
    assert set(plain.store.names()) <= set(adaln.store.names())
    plain.copy_shared_from(adaln)
    x = rng.standard_normal((7, 2))
    t = rng.uniform(size=7)
    c = np.array([0, 1, 2, NULL, 0, 1, NULL])
    assert np.array_equal(adaln(x, t, c).value, plain(x, t, c).value)


def test_step_tokens_change_output_after_training(rng):
    model = VelocityModel(tiny_config(), seed=3)
    x = rng.standard_normal((5, 2))
    target = rng.standard_normal((5, 2))
    for n in (1, 2):
        nx.backward(nx.sum(nx.square(model(x, 0.3, np.zeros(5, int), n) - target)))
        nx.adam_step(model.store, lr=1e-2)
    out1 = model(x, 0.3, np.zeros(5, int), 1).value
    out2 = model(x, 0.3, np.zeros(5, int), 2).value
    assert not np.allclose(out1, out2)


@pytest.mark.parametrize("mode", ["adaln", "step-token", "plain"])
def test_output_shape_matches_input(mode, rng):
    cfg = tiny_config(mode, data_dim=5)
    model = VelocityModel(cfg, seed=0)
    x = rng.standard_normal((4, 5))
    out = model(x, 0.5, np.array([0, 1, 2, NULL]), 2 if mode == "step-token" else None)
    assert out.shape == x.shape


def test_forward_input_validation(rng):
    model = VelocityModel(tiny_config(), seed=0)
    x = rng.standard_normal((2, 2))
    with pytest.raises(ValueError, match="step count"):
        model(x, 0.5, np.zeros(2, int))
    with pytest.raises(ValueError, match="unsupported"):
        model(x, 0.5, np.zeros(2, int), 3)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        model(x, 1.5, np.zeros(2, int), 1)
    with pytest.raises(ValueError, match="condition"):
        model(x, 0.5, np.array([0, 7]), 1)


def test_odd_width_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(width=7)


def test_step_token_smaller_than_adaln():
    cfg = ModelConfig(layers=4, width=64, num_conditions=4, tokens_per_step=3)
    assert VelocityModel(cfg.with_mode("step-token")).total_params() < VelocityModel(cfg).total_params()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([2, 4, 8, 16]), st.integers(1, 4),
       st.sampled_from([(1,), (1, 2), (1, 2, 4)]), st.integers(1, 5))
def test_param_difference_by_enumeration(layers, width, m, steps, conds):
    cfg = ModelConfig(layers=layers, width=width, data_dim=2, num_conditions=conds,
                      mode="adaln", tokens_per_step=m, step_counts=steps)
    adaln = VelocityModel(cfg)
    token = VelocityModel(cfg.with_mode("step-token"))
    plain = VelocityModel(cfg.with_mode("plain"))
    # Enumerate the tensors that exist only in one variant.
    ada_only = sum(node.value.size for name, node in adaln.store if name not in plain.store)
    tok_only = sum(node.value.size for name, node in token.store if name not in plain.store)
    assert ada_only == adaln_pathway_params(cfg) == 4 * layers * width ** 2
    assert tok_only == token_pathway_params(cfg) == len(steps) * m * width
    assert adaln.total_params() - token.total_params() == 4 * layers * width ** 2 - len(steps) * m * width
    assert plain.total_params() + adaln_pathway_params(cfg) == adaln.total_params()


def test_time_embedding_shapes():
    assert time_embedding(0.5, 8).shape == (1, 8)
    assert time_embedding(np.array([0.1, 0.2, 0.3]), 8).shape == (3, 8)


def test_clone_is_independent():
    model = randomized(VelocityModel(tiny_config()), 1)
    twin = model.clone()
    twin.store["out.b"].value = twin.store["out.b"].value + 1.0
    assert not np.array_equal(twin.store["out.b"].value, model.store["out.b"].value)
    assert np.array_equal(twin.store["tokens"].value, model.store["tokens"].value)
