import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from ddifuse.exceptions import ConfigError, LeakageError
from ddifuse.graph import SplitPlan, TripleSet, node_holdout_split
from ddifuse.student import (NO_INTERACTION, UNLABELED, DistilledStudent, DistillTargets, RelationMLP,
                             StudentParams, _loss_and_dz, bce_with_logits, combined_loss, distill,
                             entropy_bernoulli, gradient_check_student, hard_targets, kd_loss, soft_targets,
                             student_forward, student_loss_and_grads, sup_loss)
from ddifuse.teacher import FusionTeacher, finite_difference_check

LN2 = math.log(2.0)


def test_soft_target_oracles():
    assert soft_targets([0.0])[0] == 0.5
    assert soft_targets([2.0], tau=2.0)[0] == pytest.approx(0.7310585786300049, abs=1e-15)
    with pytest.raises(ConfigError):
        soft_targets([1.0], tau=0.0)


def test_bce_and_kd_oracles():
    assert bce_with_logits(0.0, 1.0) == pytest.approx(LN2, abs=1e-15)
    assert kd_loss([0.0, 0.0], [0.5, 1.0]) == pytest.approx(LN2, abs=1e-15)
    # softplus(ln 3) = ln 4 against target 0
    assert sup_loss(np.array([math.log(3.0), 0.0]), NO_INTERACTION) == pytest.approx((math.log(4) + LN2) / 2)
    assert entropy_bernoulli([0.5, 0.0, 1.0]) == pytest.approx(LN2 / 3)


def test_hard_targets_codes():
    h = hard_targets([1, NO_INTERACTION, 0], 3)
    assert h.tolist() == [[0, 1, 0], [0, 0, 0], [1, 0, 0]]
    with pytest.raises(ValueError):
        hard_targets([UNLABELED], 3)


def test_combined_loss_oracle():
    z = np.array([0.0, math.log(3.0)])
    t = DistillTargets.from_logits(np.array([0.0, 0.0]), y=1)
    kd = (LN2 + (math.log(4.0) - 0.5 * math.log(3.0))) / 2
    sup = (LN2 + (math.log(4.0) - math.log(3.0))) / 2
    assert combined_loss(z, t, 0.3) == pytest.approx(0.3 * kd + 0.7 * sup, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.0, 1.0))
def test_unlabeled_rows_equal_alpha_kd_bitwise(seed, alpha):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(6, 4)) * 3
    q = rng.random((6, 4))
    y = np.array([UNLABELED, 2, UNLABELED, NO_INTERACTION, 0, UNLABELED])
    out = combined_loss(z, DistillTargets(q, y), alpha)
    un = y == UNLABELED
    assert np.array_equal(out[un], alpha * kd_loss(z[un], q[un]))
    assert combined_loss(z[0], DistillTargets(q[0], None), alpha) == alpha * kd_loss(z[0], q[0])
    assert combined_loss(z[0], DistillTargets(q[0], UNLABELED), alpha) == alpha * kd_loss(z[0], q[0])


def test_combined_loss_rejects_bad_alpha():
    with pytest.raises(ConfigError):
        combined_loss(np.zeros(2), DistillTargets(np.zeros(2)), 1.5)


def test_loss_and_dz_matches_combined_loss():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 3))
    q = rng.random((5, 3))
    y = np.array([0, UNLABELED, NO_INTERACTION, 2, 1])
    loss, _ = _loss_and_dz(z, y, q, 0.4)
    assert loss == pytest.approx(np.mean(combined_loss(z, DistillTargets(q, y), 0.4)), abs=1e-14)


def test_kd_minimum_is_entropy():
    q = np.array([0.2, 0.7, 0.5])
    z_opt = np.log(q / (1 - q))
    assert kd_loss(z_opt, q) == pytest.approx(entropy_bernoulli(q), abs=1e-14)
    assert kd_loss(z_opt + 0.1, q) > entropy_bernoulli(q)


def _student_instance(seed, n=8, d=5, H=6, R=4):
    rng = np.random.default_rng(seed)
    p = StudentParams.initialize(d, H, R, rng)
    p.b1[:] = rng.normal(size=H) * 0.1
    x = rng.normal(size=(n, d))
    y = rng.choice([UNLABELED, NO_INTERACTION, 0, 1, 2, 3], size=n)
    q = rng.random((n, R))
    return p, (x, y, q)


@pytest.mark.parametrize("seed", range(5))
def test_student_gradient_check(seed):
    p, sample = _student_instance(seed)
    assert gradient_check_student(p, sample, epsilon=1e-4) < 1e-5
    x, y, _ = sample
    assert gradient_check_student(p, (x, y, None), epsilon=1e-4) < 1e-5


def test_student_gradient_kl_mode():
    p, (x, y, _) = _student_instance(0)
    z_t = np.random.default_rng(1).normal(size=(len(x), 4))
    _, grads = student_loss_and_grads(p, x, y, q=z_t, alpha=0.6, kd_mode="kl", z_t=z_t, tau=2.0)
    arrays = p.as_dict()

    def loss_fn():
        return _loss_and_dz(student_forward(x, p), y, z_t, 0.6, "kl", z_t, 2.0)[0]

    assert max(finite_difference_check(loss_fn, arrays, grads, 1e-4).values()) < 1e-5


def test_student_gradient_detects_corruption():
    p, sample = _student_instance(3)
    x, y, q = sample
    _, g = student_loss_and_grads(p, x, y, q)
    g["b2"] = g["b2"] + 0.1
    assert gradient_check_student(p, sample, grads=g) > 1e-2


def test_kd_fixed_point_constant_teacher():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(500, 6))
    z_t = np.tile([1.5, -0.5, 0.0, 2.5], (500, 1))
    s = DistilledStudent(n_relations=4, hidden=16, lr=0.01, batch_size=32, epochs=30, alpha=1.0,
                         optimizer="adam", seed=0)
    s.fit(X, np.full(500, UNLABELED), teacher_logits=z_t)
    q = soft_targets(z_t)
    gap = kd_loss(s.decision_function(X), q).mean() - entropy_bernoulli(q[0])
    assert 0 <= gap < 1e-3


def test_relation_mlp_api(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 4))
    y = rng.integers(0, 3, 60)
    y[:10] = NO_INTERACTION
    m = RelationMLP(n_relations=3, hidden=8, epochs=3, seed=0).fit(X, y)
    assert m.decision_function(X).shape == (60, 3)
    assert np.all((m.predict_proba(X) > 0) & (m.predict_proba(X) < 1))
    assert clone(m).fit(X, y).loss_trace_ == m.loss_trace_
    m.save(tmp_path / "m")
    back, manifest = RelationMLP.load(tmp_path / "m")
    assert manifest["kind"] == "feature_mlp"
    assert np.array_equal(back.decision_function(X), m.decision_function(X))
    with pytest.raises(ValueError):
        RelationMLP(n_relations=3).fit(X, np.full(60, 5))
    with pytest.raises(ValueError):
        RelationMLP(n_relations=3).fit(X, np.full(60, -3))


def test_distilled_student_needs_teacher_logits():
    with pytest.raises(ValueError):
        DistilledStudent(n_relations=2).fit(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ConfigError):
        DistilledStudent(n_relations=2, alpha=2.0).fit(np.zeros((3, 2)), np.zeros(3), np.zeros((3, 2)))


def test_distill_pipeline_and_leakage_abort(small_world):
    plan = node_holdout_split(small_world.kg, 0.8, 0.1, seed=0)
    teacher = FusionTeacher(features=small_world.features, n_relations=4, n_drugs=60, dim=8, epochs=3,
                            seed=0).fit(plan.train_edges.pairs, plan.train_edges.relations)
    pipe = distill(teacher, plan, small_world.features, hidden=8, epochs=2, seed=0)
    assert pipe.decision_function(plan.test_edges.pairs).shape == (len(plan.test_edges), 4)
    again = distill(teacher, plan, small_world.features, hidden=8, epochs=2, seed=0)
    assert pipe.steps[-1][1].loss_trace_ == again.steps[-1][1].loss_trace_

    # plant one test-node edge in the training split
    leak = np.array([[int(plan.train_nodes[0]), 0, int(plan.test_nodes[0])]])
    bad = SplitPlan(plan.regime, TripleSet(np.concatenate([plan.train_edges.triples, leak]), 60, 4),
                    plan.valid_edges, plan.test_edges, plan.train_nodes, plan.valid_nodes,
                    plan.test_nodes, plan.seed, plan.train_frac, plan.test_frac)
    with pytest.raises(LeakageError) as exc:
        distill(teacher, bad, small_world.features, epochs=1)
    assert not exc.value.report.checks["endpoints"].passed
    assert exc.value.exit_code == 3

    with pytest.raises(LeakageError):
        distill(teacher, plan, small_world.features, negatives=[[int(plan.test_nodes[0]), int(plan.train_nodes[0])]])
