import json

import numpy as np
import pytest

from mdiff import datastore as dst
from mdiff import diffusion as df
from mdiff import envs
from mdiff import harness as hx
from mdiff import planner as pl
from mdiff import taskcontext as tc


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("planner")
    cfg = hx.ExperimentConfig(n_train=30, n_test=5, ctx_epochs=100, diff_steps=6000, out=str(out),
                              eval_seeds=[0], episodes_per_task=2).validate()
    _, data = hx.gen_data(cfg)
    return cfg, hx.train(cfg, data, out / "ckpt")


@pytest.fixture(scope="module")
def tiny():
    """Untrained but well-formed models, for mechanics that do not depend on quality."""
    tasks = envs.sample_tasks("point_robot", 3, 0)
    ds = dst.collect(tasks, "random", 1, 0)
    rng = np.random.default_rng(0)
    ctx = tc.init_models("point_robot", ds.norm, 4, 4, rng, (16,), (16,))
    noise = df.init_noise_model(2, 4, 4, 2, 5, rng, (16,))
    return tasks, pl.PlannerModels(ctx, noise), df.GuideConfig(K=5, H=2)


def test_models_must_agree_on_context_size(tiny):
    _, models, _ = tiny
    noise = df.init_noise_model(2, 4, 3, 2, 5, np.random.default_rng(0), (8,))
    with pytest.raises(ValueError):
        pl.PlannerModels(models.ctx, noise)


def test_trace_consistency_and_action_box(tiny):
    tasks, models, cfg = tiny
    tr = pl.plan_episode(tasks[0], models, np.zeros(4), cfg, seed=3, keep_plans=True)
    L = envs.family_info("point_robot").max_steps
    assert tr.states.shape == (L + 1, 2) and tr.actions.shape == (L, 2) and tr.rewards.shape == (L,)
    assert len(tr.plans) == L and tr.plans[0].shape == (2, 4)
    assert tr.return_ == pytest.approx(tr.rewards.sum())
    assert np.all(np.abs(tr.actions) <= 0.1)
    assert np.all(np.isfinite(tr.dyn_gap))


def test_episode_deterministic_per_seed(tiny):
    tasks, models, cfg = tiny
    a = pl.plan_episode(tasks[1], models, np.ones(4), cfg, seed=[5, 1])
    b = pl.plan_episode(tasks[1], models, np.ones(4), cfg, seed=[5, 1])
    c = pl.plan_episode(tasks[1], models, np.ones(4), cfg, seed=[5, 2])
    np.testing.assert_array_equal(a.actions, b.actions)
    assert not np.array_equal(a.actions, c.actions)


def test_replay_reproduces_rewards(tiny):
    tasks, models, cfg = tiny
    tr = pl.plan_episode(tasks[2], models, np.zeros(4), cfg, seed=0)
    np.testing.assert_array_equal(pl.replay(tasks[2], tr.actions), tr.rewards)


def test_single_row_horizon_is_one_step_policy(tiny):
    tasks, models, _ = tiny
    noise = df.init_noise_model(1, 4, 4, 2, 5, np.random.default_rng(1), (16,))
    m = pl.PlannerModels(models.ctx, noise)
    tr = pl.plan_episode(tasks[0], m, np.zeros(4), df.GuideConfig(K=5, H=1), seed=0)
    assert np.isfinite(tr.return_)
    assert np.all(np.isnan(tr.dyn_gap)) and np.isnan(tr.mean_dyn_gap)


def test_horizon_mismatch_is_config_error(tiny):
    tasks, models, _ = tiny
    with pytest.raises(envs.ConfigError):
        pl.plan_episode(tasks[0], models, np.zeros(4), df.GuideConfig(K=5, H=3), seed=0)
    with pytest.raises(envs.ConfigError):
        pl.plan_episode(tasks[0], models, np.zeros(4), df.GuideConfig(K=7, H=2), seed=0)


def test_empty_meta_test(tiny):
    tasks, models, cfg = tiny
    for rep in (pl.meta_test(tasks, models, pl.WarmStart(), cfg, 0), pl.meta_test([], models, pl.WarmStart(), cfg, 3)):
        assert rep.rows == [] and np.isnan(rep.mean_return)
        doc = json.loads(rep.dumps())
        assert doc["summary"]["n_episodes"] == 0 and doc["summary"]["mean_return"] is None
    with pytest.raises(envs.ConfigError):
        pl.meta_test(tasks, models, pl.WarmStart(), cfg, -1)


def test_meta_test_report_shape(tiny):
    tasks, models, cfg = tiny
    rep = pl.meta_test(tasks[:2], models, pl.WarmStart("random", 2, 0, 4), cfg, 3, seed=1)
    assert [r.task_id for r in rep.rows] == [t.task_id for t in tasks[:2]]
    assert all(len(r.returns) == 3 for r in rep.rows)
    assert rep.returns.shape == (6,)
    assert rep.mean_oracle == pytest.approx(np.mean([envs.oracle_return(t) for t in tasks[:2]]))
    lines = rep.to_csv().strip().splitlines()
    assert lines[0].startswith("task_id,") and len(lines) == 3


def test_given_contexts_match_inferred(tiny):
    tasks, models, cfg = tiny
    warm = pl.WarmStart("expert", 2, 4, 8)
    zs = pl.warm_start_contexts(tasks[:2], models, warm)
    a = pl.meta_test(tasks[:2], models, warm, cfg, 2)
    b = pl.meta_test(tasks[:2], models, warm, cfg, 2, contexts=zs)
    assert a.dumps() == b.dumps()


def test_warm_start_contexts_use_trajectories_only(tiny, monkeypatch):
    tasks, models, _ = tiny
    seen = []
    real = tc.infer_context

    def spy(models_, trajs, *a, **kw):
        seen.append(trajs)
        return real(models_, trajs, *a, **kw)

    monkeypatch.setattr(pl, "infer_context", spy)
    pl.warm_start_contexts(tasks, models, pl.WarmStart("random", 2, 0, 4))
    assert all(isinstance(t, dst.Trajectory) for trajs in seen for t in trajs)


# -- trained pipeline ---------------------------------------------------------------


def test_reaches_a_fixed_goal(trained):
    cfg, models = trained
    spec = envs.TaskSpec("point_robot", (0.4, 0.4), 999)
    z = pl.warm_start_contexts([spec], models, pl.WarmStart("expert", 5, 0, 16))[999]
    traces = pl.run_episodes([spec] * 5, models, [z] * 5, cfg.guide(), [[0, i] for i in range(5)])
    for tr in traces:
        assert np.linalg.norm(tr.states[-1] - np.array([0.4, 0.4])) <= 0.15


def test_plans_respect_step_bound(trained):
    cfg, models = trained
    _, test = hx.make_tasks(cfg)
    zs = pl.warm_start_contexts(test, models, pl.WarmStart("expert", 5, 0, 16))
    traces = pl.run_episodes(test, models, [zs[t.task_id] for t in test], cfg.guide(),
                             [[1, t.task_id] for t in test], keep_plans=True)
    n = models.ctx.norm
    steps = []
    for tr in traces:
        for p in tr.plans:
            s = dst.denormalize(p[:, :2], n.s_min, n.s_max)
            steps.extend(np.linalg.norm(np.diff(s, axis=0), axis=1))
    bound = 0.1 * np.sqrt(2) + 0.05  # largest clipped action, plus slack
    assert np.mean(np.asarray(steps) <= bound) >= 0.95


def test_seen_tasks_no_harder_than_unseen(trained):
    # compare returns relative to each task set's own oracle, since goal distances differ
    cfg, models = trained
    train, test = hx.make_tasks(cfg)
    warm = pl.WarmStart("expert", 5, 1000, 16)
    seen = pl.meta_test(train[:5], models, warm, cfg.guide(), 2)
    unseen = pl.meta_test(test, models, warm, cfg.guide(), 2)
    assert seen.mean_return / seen.mean_oracle <= unseen.mean_return / unseen.mean_oracle
