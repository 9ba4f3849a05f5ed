"""Receding-horizon control with the guided diffusion sampler.

Each environment step samples a fresh plan conditioned on the observed state
and the task context, executes its first action and discards the rest.
Episodes are simulated in lockstep so the network runs on whole batches;
every episode draws its noise from its own seeded generator, so its random
stream does not depend on which other episodes share its batch (results can
still differ in the last bits through batched matrix products).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datastore, envs
from .datastore import denormalize, normalize
from .diffusion import GuideConfig, NoiseModel, make_schedule, sample_plan
from .taskcontext import ContextModels, infer_context


@dataclass
class PlannerModels:
    ctx: ContextModels
    noise: NoiseModel

    def __post_init__(self):
        if self.noise.d_z != self.ctx.d_z:
            raise ValueError(f"noise model expects d_z={self.noise.d_z}, context models give {self.ctx.d_z}")


@dataclass
class EpisodeTrace:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dyn_gap: np.ndarray
    plans: list[np.ndarray] | None = None

    @property
    def return_(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def mean_dyn_gap(self) -> float:
        gaps = self.dyn_gap[np.isfinite(self.dyn_gap)]
        return float(np.mean(gaps)) if gaps.size else float("nan")


def run_episodes(specs: list[envs.TaskSpec], models: PlannerModels, zs, cfg: GuideConfig,
                 seeds: list, keep_plans: bool = False) -> list[EpisodeTrace]:
    """Plan ``len(specs)`` episodes side by side; ``zs[i]`` is the context for ``specs[i]``.

    The dynamics gap at step t is the distance between the state the env
    actually reached and the second row of the plan that chose the action
    (NaN when H == 1).
    """
    if cfg.H != models.noise.H or cfg.K != models.noise.K:
        raise envs.ConfigError(f"guide config (H={cfg.H}, K={cfg.K}) does not match the trained "
                               f"model (H={models.noise.H}, K={models.noise.K})")
    cfg.validate()
    B = len(specs)
    if B == 0:
        return []
    norm = models.ctx.norm
    ds_ = models.noise.state_dim
    sched = make_schedule(models.noise.K, models.noise.schedule_kind)
    rngs = [np.random.default_rng(s) for s in seeds]
    env_list = [envs.reset(s) for s in specs]
    zs = np.asarray(zs, dtype=models.noise.net.dtype).reshape(B, -1)
    states = [[e.state] for e in env_list]
    actions, rewards, gaps = [[] for _ in specs], [[] for _ in specs], [[] for _ in specs]
    plans = [[] for _ in specs] if keep_plans else None
    while not all(e.done for e in env_list):
        live = [i for i, e in enumerate(env_list) if not e.done]
        obs = np.stack([env_list[i].state for i in live])
        x = sample_plan(models.noise, sched, models.ctx, zs[live], cfg,
                        normalize(obs, norm.s_min, norm.s_max), [rngs[i] for i in live])
        first = denormalize(x[:, 0, ds_:], norm.a_min, norm.a_max)
        for j, i in enumerate(live):
            a = envs.clip_action(specs[i].family, first[j])
            env_list[i], r, _ = envs.step(env_list[i], a)
            states[i].append(env_list[i].state)
            actions[i].append(a)
            rewards[i].append(r)
            if cfg.H > 1:
                nxt = denormalize(x[j, 1, :ds_], norm.s_min, norm.s_max)
                gaps[i].append(float(np.linalg.norm(env_list[i].state - nxt)))
            else:
                gaps[i].append(float("nan"))
            if keep_plans:
                plans[i].append(x[j].copy())
    return [
        EpisodeTrace(np.asarray(states[i]), np.asarray(actions[i]), np.asarray(rewards[i]),
                     np.asarray(gaps[i]), plans[i] if keep_plans else None)
        for i in range(B)
    ]


def plan_episode(spec: envs.TaskSpec, models: PlannerModels, z, cfg: GuideConfig, seed,
                 keep_plans: bool = False) -> EpisodeTrace:
    return run_episodes([spec], models, [z], cfg, [seed], keep_plans)[0]


def replay(spec: envs.TaskSpec, actions) -> np.ndarray:
    """Rewards from executing ``actions`` open loop."""
    env = envs.reset(spec)
    out = []
    for a in actions:
        env, r, _ = envs.step(env, a)
        out.append(r)
    return np.asarray(out)


# -- meta-test ------------------------------------------------------------------


@dataclass
class WarmStart:
    quality: str = "expert"
    n_traj: int = 5
    seed: int = 0
    m: int = 16


@dataclass
class TaskRow:
    task_id: int
    params: list[float]
    mean_return: float
    std_return: float
    mean_dyn_gap: float
    oracle_return: float
    returns: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    rows: list[TaskRow]
    config: dict
    seeds: dict

    @property
    def returns(self) -> np.ndarray:
        return np.asarray([r for row in self.rows for r in row.returns], dtype=np.float64)

    @property
    def mean_return(self) -> float:
        rets = self.returns
        return float(np.mean(rets)) if rets.size else float("nan")

    @property
    def std_return(self) -> float:
        rets = self.returns
        return float(np.std(rets)) if rets.size else float("nan")

    @property
    def mean_oracle(self) -> float:
        return float(np.mean([r.oracle_return for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_dyn_gap(self) -> float:
        gaps = [r.mean_dyn_gap for r in self.rows if np.isfinite(r.mean_dyn_gap)]
        return float(np.mean(gaps)) if gaps else float("nan")

    def to_json(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not np.isfinite(v) else v

        return {
            "summary": {
                "n_tasks": len(self.rows),
                "n_episodes": int(self.returns.size),
                "mean_return": clean(self.mean_return),
                "std_return": clean(self.std_return),
                "mean_oracle_return": clean(self.mean_oracle),
                "mean_dyn_gap": clean(self.mean_dyn_gap),
            },
            "tasks": [{k: clean(v) for k, v in asdict(r).items()} for r in self.rows],
            "config": self.config,
            "seeds": self.seeds,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_id", "params", "mean_return", "std_return", "mean_dyn_gap", "oracle_return"])
        for r in self.rows:
            w.writerow([r.task_id, " ".join(f"{p:.6g}" for p in r.params), f"{r.mean_return:.6g}",
                        f"{r.std_return:.6g}", f"{r.mean_dyn_gap:.6g}", f"{r.oracle_return:.6g}"])
        return buf.getvalue()

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def warm_start_contexts(test_tasks: list[envs.TaskSpec], models: PlannerModels,
                        warm: WarmStart) -> dict[int, np.ndarray]:
    """Collect warm-start data per task and pool it into one context each.

    Only the trajectories reach the encoder; task parameters are used solely
    by the environment that generates them.
    """
    if not test_tasks:
        return {}
    data = datastore.collect(test_tasks, warm.quality, warm.n_traj, warm.seed)
    return {
        t.task_id: infer_context(models.ctx, data.trajectories[t.task_id], m=warm.m,
                                 seed=warm.seed * 100003 + t.task_id)
        for t in test_tasks
    }


def meta_test(test_tasks: list[envs.TaskSpec], models: PlannerModels, warm: WarmStart,
              cfg: GuideConfig, episodes_per_task: int, seed: int = 0,
              contexts: dict[int, np.ndarray] | None = None) -> EvalReport:
    """Evaluate the planner on ``test_tasks``; episode e of task t uses seed ``[seed, t, e]``."""
    if episodes_per_task < 0:
        raise envs.ConfigError("episodes_per_task must be >= 0")
    echo = {"guide": asdict(cfg), "warm_start": asdict(warm), "episodes_per_task": episodes_per_task}
    seeds = {"eval": seed, "warm_start": warm.seed}
    if episodes_per_task == 0 or not test_tasks:
        return EvalReport([], echo, seeds)
    if contexts is None:
        contexts = warm_start_contexts(test_tasks, models, warm)
    specs, zs, ep_seeds = [], [], []
    for t in test_tasks:
        for e in range(episodes_per_task):
            specs.append(t)
            zs.append(contexts[t.task_id])
            ep_seeds.append([seed, t.task_id, e])
    traces = run_episodes(specs, models, zs, cfg, ep_seeds)
    rows = []
    for n, t in enumerate(test_tasks):
        tr = traces[n * episodes_per_task : (n + 1) * episodes_per_task]
        rets = [x.return_ for x in tr]
        gaps = [x.mean_dyn_gap for x in tr]
        gaps = [g for g in gaps if np.isfinite(g)]
        rows.append(TaskRow(t.task_id, list(t.params), float(np.mean(rets)), float(np.std(rets)),
                            float(np.mean(gaps)) if gaps else float("nan"),
                            envs.oracle_return(t), rets))
    return EvalReport(rows, echo, seeds)
