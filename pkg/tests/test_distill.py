from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowdistill import numerics as nx
from flowdistill.datasets import DatasetSpec, endless_batches, generate
from flowdistill.distill import (
    DistillPlan, IntervalTarget, _compose, cfg_regularizer, dual_loss, endpoint_baseline_plan,
    endpoint_loss, halving_sequence, init_student, interval_schedule, knot_indices,
    progressive_distill, student_objective, student_sample, targets_from_trajectory,
    teacher_targets, train_student, velocity_loss,
)
from flowdistill.flow import cosine_lr_at, euler_solve, make_schedule, sq_error
from flowdistill.models import NULL, ModelConfig, VelocityModel

from conftest import ConstantField, randomized, tiny_config


class Lookup:
    """Student stub that answers with a fixed array whatever the inputs."""

    def __init__(self, out):
        self.out = np.asarray(out, dtype=float)

    def __call__(self, x, t, c, n=None):
        return nx.constant(self.out.copy())


def _target(k, t0, t1, x0, x1, v=None):
    x0, x1 = np.atleast_2d(np.asarray(x0, float)), np.atleast_2d(np.asarray(x1, float))
    v = (x1 - x0) / (t1 - t0) if v is None else np.atleast_2d(np.asarray(v, float))
    tm = (t0 + t1) / 2
    return IntervalTarget(k, t0, t1, x0, x1, v, tm, (1 - tm) * x0 + tm * x1)


@pytest.fixture
def teacher():
    return randomized(VelocityModel(tiny_config("adaln"), 0), 11)


def test_knot_indices():
    assert knot_indices(10, 1) == [0, 10]
    assert knot_indices(10, 2) == [0, 5, 10]
    assert knot_indices(10, 4) == [0, 2, 5, 7, 10]
    assert knot_indices(4, 4) == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        knot_indices(4, 5)


def test_single_interval_targets(teacher, rng):
    plan = DistillPlan(step_counts=(1,))
    z, c = rng.standard_normal((3, 2)), np.array([0, 1, 2])
    (tg,) = teacher_targets(teacher, z, c, plan, 1)
    traj = euler_solve(teacher, z, c, plan.teacher_schedule_obj(), plan.w_teacher)
    assert (tg.t_start, tg.t_end, tg.t_mf) == (0.0, 1.0, 0.5)
    assert np.array_equal(tg.v_mean, traj.endpoint - z)
    assert np.allclose(tg.x_mf, (z + traj.endpoint) / 2, rtol=0, atol=1e-15)


def test_two_interval_midpoint_weights(teacher, rng):
    plan = DistillPlan(step_counts=(2,))
    z, c = rng.standard_normal((3, 2)), np.array([0, 1, 2])
    first = teacher_targets(teacher, z, c, plan, 2)[0]
    traj = euler_solve(teacher, z, c, plan.teacher_schedule_obj(), plan.w_teacher)
    assert (first.t_start, first.t_end, first.t_mf) == (0.0, 0.5, 0.25)
    assert np.allclose(first.x_mf, 0.75 * z + 0.25 * traj.states[5], rtol=0, atol=1e-15)


def test_local_midpoint_rule(teacher, rng):
    plan = DistillPlan(step_counts=(2,), midpoint="local")
    z, c = rng.standard_normal((2, 2)), np.array([0, 1])
    second = teacher_targets(teacher, z, c, plan, 2)[1]
    assert np.allclose(second.x_mf, (second.x_start + second.x_end) / 2)


def test_constant_teacher_gives_constant_mean_velocity(rng):
    u = np.array([0.4, -2.0])
    plan = DistillPlan()
    z = rng.standard_normal((5, 2))
    for n in plan.step_counts:
        for tg in teacher_targets(ConstantField(u), z, np.zeros(5, int), plan, n):
            assert np.allclose(tg.v_mean, u, rtol=0, atol=1e-12)


def test_endpoint_loss_oracle_student_is_zero(teacher, rng):
    plan = DistillPlan()
    z, c = rng.standard_normal((4, 2)), np.array([0, 1, 2, 0])
    targets = teacher_targets(teacher, z, c, plan, 4)
    stub = Lookup(np.concatenate([t.v_mean for t in targets]))
    assert endpoint_loss(stub, targets, c, 4).value < 1e-24


def test_endpoint_loss_zero_student_two_interval_fixture():
    # Interval 1: 0 -> (1, 2); interval 2: (1, 2) -> (4, 6). Squared gaps 5 and 25.
    targets = [_target(0, 0.0, 0.5, [0, 0], [1, 2]), _target(1, 0.5, 1.0, [1, 2], [4, 6])]
    loss = endpoint_loss(Lookup(np.zeros((2, 2))), targets, [0], 2)
    assert loss.value == pytest.approx(15.0, abs=1e-12)


def test_free_rollout_one_step():
    z = np.array([[0.5, -1.0]])
    vbar = np.array([[2.0, 1.0]])
    target = _target(0, 0.0, 1.0, z, [[1.0, 1.0]])
    loss = endpoint_loss(Lookup(vbar), [target], [0], 1, mode="free-rollout", z=z)
    assert loss.value == pytest.approx(np.sum((z + vbar - [[1.0, 1.0]]) ** 2), abs=1e-14)


def test_velocity_loss_fixtures(teacher, rng):
    tg = _target(0, 0.0, 1.0, [0, 0], [3, 4])
    assert velocity_loss(Lookup(np.zeros((1, 2))), [tg], [0], 1).value == 25.0
    assert velocity_loss(Lookup(tg.v_mean), [tg], [0], 1).value == 0.0


@settings(max_examples=30, deadline=None)
@given(st.permutations([0, 1, 2, 3]))
def test_velocity_loss_ignores_interval_order(perm):
    r = np.random.default_rng(0)
    targets = [_target(k, k / 4, (k + 1) / 4, r.standard_normal((1, 2)), r.standard_normal((1, 2)))
               for k in range(4)]
    base = velocity_loss(Lookup(np.zeros((4, 2))), targets, [0], 4).value
    shuffled = velocity_loss(Lookup(np.zeros((4, 2))), [targets[i] for i in perm], [0], 4).value
    assert shuffled == pytest.approx(base, rel=1e-14)


def test_dual_loss_mixing_fixture():
    # Endpoint gap (1, 1) -> 2 per interval; mean velocity (1, 3) -> 10 per interval.
    targets = [_target(k, k / 2, (k + 1) / 2, [0, 0], [1, 1], v=[1, 3]) for k in range(2)]
    loss = dual_loss(Lookup(np.zeros((2, 2))), targets, [0], 2, 0.7)
    assert loss.value == pytest.approx(4.4, abs=1e-12)


def test_dual_loss_degenerate_weights(teacher, rng):
    student = randomized(VelocityModel(tiny_config(), 1), 2)
    plan = DistillPlan()
    for trial in range(100):
        r = np.random.default_rng(trial)
        z, c = r.standard_normal((3, 2)), r.integers(0, 3, 3)
        n = int(r.choice(plan.step_counts))
        targets = teacher_targets(teacher, z, c, plan, n)
        mode = ("teacher-forced", "free-rollout")[trial % 2]
        assert (dual_loss(student, targets, c, n, 1.0, mode, z).value
                == endpoint_loss(student, targets, c, n, mode, z).value)
        assert dual_loss(student, targets, c, n, 0.0).value == velocity_loss(student, targets, c, n).value


def test_regularizer_zero_when_branches_agree(rng):
    stub = ConstantField([1.0, -1.0])
    assert cfg_regularizer(stub, rng.standard_normal((3, 2)), 0.5, [0, 1, 2], None, 0.1).value == 0.0


def test_regularizer_conditional_rows_get_no_gradient(rng):
    student = randomized(VelocityModel(tiny_config(), 0), 5)
    c = np.array([0, 1, 1, 2])
    student.store.zero_grad()
    nx.backward(cfg_regularizer(student, rng.standard_normal((4, 2)), rng.uniform(size=4), c, 2, 0.5))
    g = student.store["cond.table"].grad
    assert np.all(g[:3] == 0.0)
    assert np.any(g[student.null_id] != 0.0)


def test_gradient_checks_pass():
    from flowdistill.cli import GRAD_TOL, grad_check_suite

    res = grad_check_suite(seed=3)
    assert res.pop("sg_conditional_rows_max_abs") == 0.0
    assert len(res) == 4
    assert all(v < GRAD_TOL for v in res.values()), res


@pytest.fixture(scope="module")
def small_setup():
    ds = generate(DatasetSpec(size=400, seed=0))
    teacher = randomized(VelocityModel(ModelConfig(layers=2, width=8, mode="adaln"), 0), 1, std=0.3)
    cfg = ModelConfig(layers=2, width=8, mode="step-token", tokens_per_step=2)
    return ds, teacher, cfg


def _manual_dual_only(teacher, cfg, ds, plan, seed, iters):
    """Independent training loop with the dual loss and no regularizer term at all."""
    student = init_student(teacher, cfg, seed, plan.init_from_teacher)
    rng = np.random.default_rng([seed, 2])
    batches = endless_batches(ds, plan.batch_size, seed)
    losses = []
    for it in range(iters):
        batch = next(batches)
        n = int(rng.choice(plan.step_counts))
        traj = euler_solve(teacher, batch.z, batch.c, plan.teacher_schedule_obj(), plan.w_teacher)
        targets = targets_from_trajectory(traj, plan, n)
        loss = dual_loss(student, targets, batch.c, n, plan.alpha, plan.mode, batch.z)
        nx.backward(loss)
        nx.adam_step(student.store, lr=cosine_lr_at(plan.lr, it, iters))
        losses.append(float(loss.value))
    return student, losses


def test_lambda_zero_matches_unregularized_run(small_setup):
    ds, teacher, cfg = small_setup
    plan = DistillPlan(lam=0.0, batch_size=32, iters=12)
    run = train_student(teacher, cfg, ds, plan, seed=4)
    student, losses = _manual_dual_only(teacher, cfg, ds, plan, 4, 12)
    assert run.curves["total"] == losses
    for (_, a), (_, b) in zip(run.student.store, student.store):
        assert a.value.tobytes() == b.value.tobytes()


def test_endpoint_baseline_subsumption(small_setup):
    ds, teacher, _ = small_setup
    cfg = ModelConfig(layers=2, width=8, mode="adaln")
    plan = endpoint_baseline_plan(DistillPlan(batch_size=32, iters=10))
    assert (plan.alpha, plan.lam, plan.step_counts, plan.mode) == (1.0, 0.0, (1,), "free-rollout")
    run = train_student(teacher, cfg, ds, plan, seed=2)
    # Plain one-step endpoint distillation written out directly.
    student = init_student(teacher, cfg, 2, True)
    batches = endless_batches(ds, 32, 2)
    losses = []
    for it in range(10):
        b = next(batches)
        ref = euler_solve(teacher, b.z, b.c, plan.teacher_schedule_obj(), plan.w_teacher).endpoint
        loss = sq_error(nx.add(b.z, nx.scale(student(b.z, 0.0, b.c), 1.0)), ref)
        nx.backward(loss)
        nx.adam_step(student.store, lr=cosine_lr_at(plan.lr, it, 10))
        losses.append(float(loss.value))
    assert run.curves["total"] == losses


def test_training_is_reproducible(small_setup):
    ds, teacher, cfg = small_setup
    plan = DistillPlan(batch_size=32, iters=8)
    a = train_student(teacher, cfg, ds, plan, seed=1)
    b = train_student(teacher, cfg, ds, plan, seed=1)
    assert a.curves == b.curves
    assert set(a.curves["n_k"]) <= {1, 2, 4}


def test_training_graph_is_first_order_and_teacher_frozen(small_setup):
    ds, teacher, cfg = small_setup
    before = {k: v.tobytes() for k, v in teacher.store.snapshot().items()}
    plan = DistillPlan(batch_size=16)
    batch = next(endless_batches(ds, 16, 0))
    student = init_student(teacher, cfg, 0, True)
    for n in plan.step_counts:
        traj = euler_solve(teacher, batch.z, batch.c, plan.teacher_schedule_obj(), plan.w_teacher)
        losses = student_objective(student, targets_from_trajectory(traj, plan, n), batch.c, n, plan, batch.z)
        nx.backward(losses.total)
        assert nx.count_higher_order_nodes(losses.total) == 0
    train_student(teacher, cfg, ds, replace(plan, iters=3), seed=0)
    assert {k: v.tobytes() for k, v in teacher.store.snapshot().items()} == before


def test_halving_sequences():
    assert halving_sequence(4) == [2, 1]
    assert halving_sequence(10) == [8, 4, 2, 1]
    assert halving_sequence(1) == []


def test_halving_round_with_oracle_copy_is_lossless(rng):
    u = np.array([0.3, -0.8])
    prev = ConstantField(u)
    x0 = rng.standard_normal((4, 2))
    knots = make_schedule("uniform", 4).knots
    target = _compose(prev, x0, np.zeros(4, int), knots[0:3], None, 1.0)
    pred = x0 + (knots[2] - knots[0]) * u
    assert sq_error(pred, target).value < 1e-28


def test_progressive_rounds_for_four_knots(small_setup):
    ds, teacher, _ = small_setup
    cfg = ModelConfig(layers=2, width=8, mode="adaln")
    plan = DistillPlan(teacher_steps=4, step_counts=(1,), batch_size=32, iters=8)
    run = progressive_distill(teacher, cfg, ds, seed=0, plan=plan)
    assert [plan.teacher_steps] + run.rounds == [4, 2, 1]
    assert sorted(run.losses) == [1, 2]
    assert all(len(v) == 4 for v in run.losses.values())


@pytest.mark.parametrize("w,calls", [(0.05, 2), (0.0, 1)])
def test_student_sample_call_counts(w, calls, rng):
    stub = ConstantField([1.0, 1.0], mode="step-token")
    z = rng.standard_normal((3, 2))
    out = student_sample(stub, z, np.array([0, 1, 2]), 1, w=w)
    assert len(stub.calls) == calls
    assert all(n == 1 for _, n in stub.calls)
    assert np.allclose(out, z + 1.0)


def test_default_weak_guidance():
    import inspect

    assert inspect.signature(student_sample).parameters["w"].default == 0.05


def test_interval_schedule_uses_teacher_knots():
    plan = DistillPlan()
    teacher_knots = plan.teacher_schedule_obj().knots
    assert interval_schedule(plan, 4).knots == tuple(teacher_knots[i] for i in (0, 2, 5, 7, 10))


def test_plan_validation():
    with pytest.raises(ValueError):
        DistillPlan(alpha=1.5)
    with pytest.raises(ValueError):
        DistillPlan(mode="sideways")
    with pytest.raises(ValueError):
        DistillPlan(step_counts=(16,))
