from itertools import combinations

import numpy as np
import pytest

from mdiff import datastore as dst
from mdiff import envs
from mdiff import numcore as nc
from mdiff import taskcontext as tc


def robot_data(n_tasks=8, n_random=10, seed=0):
    tasks = envs.sample_tasks("point_robot", n_tasks, seed)
    return dst.merge(dst.collect(tasks, "expert", 1, seed), dst.collect(tasks, "random", n_random, seed + 1))


@pytest.fixture(scope="module")
def robot():
    ds = robot_data()
    res = tc.train_context(ds, tc.ContextConfig(epochs=600, lr=3e-4, seed=0))
    return ds, res


def fresh_models(dtype=np.float64, h=4):
    ds = robot_data(2, 1)
    return tc.init_models("point_robot", ds.norm, h, 5, np.random.default_rng(0), (8, 8), (8,), dtype), ds


# -- encoding ---------------------------------------------------------------------


def test_zero_weight_encoder_outputs_bias():
    models, ds = fresh_models()
    enc = models.encoder
    w = [np.zeros_like(x) for x in enc.weights]
    models = models.with_nets(nc.ParamStore(w, enc.biases, enc.activations), models.reward_model, models.dyn_model)
    for seg in dst.sample_segments(ds, 4, 3, np.random.default_rng(1)):
        z = tc.encode_segment(models, seg)
        expected = nc.forward(models.encoder, np.zeros(models.encoder.in_dim))
        np.testing.assert_array_equal(z, expected)


def test_identical_segments_identical_z():
    models, ds = fresh_models()
    seg = dst.sample_segments(ds, 4, 1, np.random.default_rng(1))[0]
    np.testing.assert_array_equal(tc.encode_segment(models, seg), tc.encode_segment(models, seg))


def test_encoding_is_order_sensitive():
    models, ds = fresh_models()
    seg = dst.sample_segments(ds.all_trajectories()[1:2], 4, 1, np.random.default_rng(1))[0]
    rev = dst.Segment(seg.task_id, seg.s[::-1], seg.a[::-1], seg.r[::-1], seg.s_next[::-1])
    assert not np.allclose(tc.encode_segment(models, seg), tc.encode_segment(models, rev))


def test_wrong_h_is_shape_error():
    models, ds = fresh_models()
    seg = dst.sample_segments(ds, 5, 1, np.random.default_rng(1))[0]
    with pytest.raises(nc.ShapeError):
        tc.encode_segment(models, seg)


def test_pool_properties(rng):
    z = rng.standard_normal(6)
    np.testing.assert_array_equal(tc.pool([z]), z)
    np.testing.assert_array_equal(tc.pool([z, -z]), np.zeros(6))
    np.testing.assert_allclose(tc.pool([z] * 7), z, rtol=1e-15)
    with pytest.raises(ValueError):
        tc.pool([])


# -- joint objective --------------------------------------------------------------


def test_perfect_predictors_zero_loss():
    # one task with the goal at the start and zero actions: every transition is (0, 0, 0, 0)
    spec = envs.TaskSpec("point_robot", (0.0, 0.0), 0)
    L = 20
    tr = dst.Trajectory(0, np.zeros((L + 1, 2), np.float32), np.zeros((L, 2), np.float32), np.zeros(L, np.float32))
    ds = dst.OfflineDataset("point_robot", [spec], {0: [tr]}, {0: "train"})
    models = tc.init_models("point_robot", ds.norm, 4, 3, np.random.default_rng(0), (8,), (8,), np.float64)
    zero = lambda p: nc.ParamStore([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases], p.activations)
    models = models.with_nets(models.encoder, zero(models.reward_model), zero(models.dyn_model))
    batch = tc.make_batch(models, [tr], np.array([[0, 0], [0, 5]]), np.random.default_rng(0))
    loss, _ = tc.joint_loss(models, *batch)
    assert loss == 0.0


def test_loss_non_negative_and_grads_checked(rng):
    models, ds = fresh_models(np.float64)
    trajs = ds.all_trajectories()
    pairs = tc._index_segments(trajs, 4)[rng.choice(len(tc._index_segments(trajs, 4)), 6)]
    batch = tc.make_batch(models, trajs, pairs, rng, tc._group_by_task(trajs))
    loss, grads = tc.joint_loss(models, *batch)
    assert loss >= 0
    for which in range(3):
        def lg(p, which=which):
            nets = list(models.nets())
            nets[which] = p
            l, g = tc.joint_loss(models.with_nets(*nets), *batch)
            return l, g[which]

        assert nc.grad_check(models.nets()[which], lg, fd_step=1e-3, stencil=5) <= 1e-4


def test_pooled_joint_loss_grads(rng):
    models, ds = fresh_models(np.float64)
    trajs = ds.all_trajectories()
    pairs = tc._index_segments(trajs, 4)[:5]
    batch = tc.make_batch(models, trajs, pairs, rng, tc._group_by_task(trajs), pool_k=3)
    assert batch[0].ndim == 3

    def lg(p):
        l, g = tc.joint_loss(models.with_nets(p, models.reward_model, models.dyn_model), *batch)
        return l, g[0]

    assert nc.grad_check(models.encoder, lg, fd_step=1e-3, stencil=5) <= 1e-6


def test_loss_invariant_to_task_relabeling(rng):
    models, ds = fresh_models(np.float64)
    trajs = ds.all_trajectories()
    relabeled = [dst.Trajectory(t.task_id + 100, t.states, t.actions, t.rewards, t.policy) for t in trajs]
    pairs = tc._index_segments(trajs, 4)[:8]
    a = tc.make_batch(models, trajs, pairs, np.random.default_rng(3), tc._group_by_task(trajs))
    b = tc.make_batch(models, relabeled, pairs, np.random.default_rng(3), tc._group_by_task(relabeled))
    assert tc.joint_loss(models, *a)[0] == tc.joint_loss(models, *b)[0]


def test_batch_segments_match_segment_features(rng):
    models, ds = fresh_models(np.float32)
    trajs = ds.all_trajectories()
    pairs = tc._index_segments(trajs, 4)[rng.choice(len(tc._index_segments(trajs, 4)), 7)]
    seg_x = tc.make_batch(models, trajs, pairs, rng)[0]
    segs = [dst.segment_of(trajs[i], t0, 4) for i, t0 in pairs]
    np.testing.assert_array_equal(seg_x, tc.segment_features(models, segs))


def test_heads_take_only_state_action_context():
    models, _ = fresh_models()
    info = envs.family_info("point_robot")
    assert models.reward_model.in_dim == info.state_dim + info.action_dim + models.d_z
    assert models.dyn_model.in_dim == info.state_dim + info.action_dim + models.d_z
    assert models.dyn_model.out_dim == info.state_dim


# -- training ---------------------------------------------------------------------


def test_training_halves_loss(robot):
    losses = robot[1].losses
    assert np.mean(losses[-100:]) <= 0.5 * np.mean(losses[:100])


def test_training_repeatable():
    ds = robot_data(3, 2)
    cfg = tc.ContextConfig(epochs=2, seed=4)
    a, b = tc.train_context(ds, cfg).models, tc.train_context(ds, cfg).models
    for x, y in zip(a.nets(), b.nets()):
        for s, t in zip(x.tensors(), y.tensors()):
            np.testing.assert_array_equal(s, t)


def test_far_goals_farther_than_within_task(robot):
    ds, res = robot
    rng = np.random.default_rng(9)
    goals = np.array([t.params for t in ds.tasks])
    i, j = np.unravel_index(np.argmax(np.linalg.norm(goals[:, None] - goals[None], axis=-1)), (8, 8))
    zi = tc.encode_segments(res.models, dst.sample_segments(ds.trajectories[i], 4, 20, rng))
    zj = tc.encode_segments(res.models, dst.sample_segments(ds.trajectories[j], 4, 20, rng))
    within = np.median([np.linalg.norm(a - b) for Z in (zi, zj) for a, b in combinations(Z, 2)])
    assert np.linalg.norm(zi[0] - zj[0]) > within


def test_centroid_identification(robot):
    ds, res = robot
    m = res.models
    centroids = {tid: tc.infer_context(m, ds.trajectories[tid], m=32, seed=0) for tid in ds.task_ids()}
    held = dst.merge(dst.collect(ds.tasks, "expert", 1, 77), dst.collect(ds.tasks, "random", 10, 78))
    hits = total = 0
    for tid in ds.task_ids():
        for k in range(5):
            z = tc.infer_context(m, held.trajectories[tid], m=16, seed=k)
            hits += tc.nearest_centroid(centroids, z) == tid
            total += 1
    assert hits / total >= 0.9


def test_infer_context_m1_is_single_encoding(robot):
    ds, res = robot
    trajs = ds.trajectories[0]
    z = tc.infer_context(res.models, trajs, m=1, seed=3)
    seg = dst.sample_segments(trajs, 4, 1, np.random.default_rng(3))[0]
    np.testing.assert_array_equal(z, tc.encode_segment(res.models, seg))


def test_infer_context_errors(robot):
    ds, res = robot
    with pytest.raises(ValueError):
        tc.infer_context(res.models, [])
    with pytest.raises(ValueError):
        tc.infer_context(res.models, ds.trajectories[0], h=25)


def test_expert_random_contexts_closer_than_between(robot):
    ds, res = robot
    ze = {t: tc.infer_context(res.models, [x for x in ds.trajectories[t] if x.policy == "expert"], m=16) for t in ds.task_ids()}
    zr = {t: tc.infer_context(res.models, [x for x in ds.trajectories[t] if x.policy == "random"], m=16) for t in ds.task_ids()}
    between = np.median([np.linalg.norm(ze[a] - ze[b]) for a, b in combinations(ze, 2)])
    cross = np.mean([np.linalg.norm(ze[t] - zr[t]) for t in ze])
    assert cross <= between


def test_context_stable_in_m(robot):
    ds, res = robot
    a = tc.infer_context(res.models, ds.trajectories[2], m=64, seed=0)
    b = tc.infer_context(res.models, ds.trajectories[2], m=128, seed=1)
    assert np.linalg.norm(a - b) <= 0.1 * np.linalg.norm(b)


@pytest.fixture(scope="module")
def dyn_pair():
    tasks = envs.sample_tasks("point_mass_dyn", 8, 0)
    ds = dst.merge(dst.collect(tasks, "expert", 1, 0), dst.collect(tasks, "random", 4, 1))
    cfg = tc.ContextConfig(epochs=200, h=8, lr=3e-4, seed=0)
    return tasks, ds, tc.train_context(ds, cfg).models, tc.train_context(ds, cfg, use_context=False).models


def one_step_error(ds, models, held, use_z):
    out = []
    for tid, trajs in held.trajectories.items():
        z = tc.infer_context(models, trajs, m=16) if use_z else np.zeros(models.d_z)
        for tr in trajs:
            s, a = ds.norm_s(tr.states[:-1]), ds.norm_a(tr.actions)
            pred = tc.predict_next(models, s, a, np.tile(z, (len(s), 1)))
            out.append(np.mean(np.sum((pred - ds.norm_s(tr.states[1:])) ** 2, axis=1)))
    return float(np.mean(out))


def test_dynamics_context_beats_context_free(dyn_pair):
    # fresh trajectories from the training policies; z inferred from them alone
    tasks, ds, with_ctx, without = dyn_pair
    held = dst.merge(dst.collect(tasks, "expert", 1, 50), dst.collect(tasks, "random", 2, 51))
    assert one_step_error(ds, with_ctx, held, True) <= 0.2 * one_step_error(ds, without, held, False)


def test_dynamics_context_helps_on_unseen_quality(dyn_pair):
    tasks, ds, with_ctx, without = dyn_pair
    held = dst.collect(tasks, "medium", 2, 5)
    assert one_step_error(ds, with_ctx, held, True) <= 0.5 * one_step_error(ds, without, held, False)


def test_checkpoint_round_trip(robot, tmp_path):
    _, res = robot
    tc.save_models(res.models, tmp_path)
    back = tc.load_models(tmp_path)
    assert (back.family, back.h, back.d_z) == (res.models.family, res.models.h, res.models.d_z)
    for x, y in zip(back.nets(), res.models.nets()):
        for s, t in zip(x.tensors(), y.tensors()):
            assert s.tobytes() == t.tobytes()


def test_context_bank_shapes(robot):
    ds, res = robot
    bank = tc.context_bank(res.models, ds, ("expert", "random"), size=4)
    assert set(bank) == set(ds.task_ids("train"))
    assert all(v.shape == (4, res.models.d_z) for v in bank.values())
