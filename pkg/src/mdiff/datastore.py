"""Offline multi-task datasets: collection, normalization, sampling, storage.

On disk a dataset is a directory holding ``meta.json`` and one
``tasks/<task_id>.jsonl`` file per task with one trajectory per line.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .envs import ConfigError, TaskSpec

POLICIES = ("expert", "medium", "random")
MEDIUM_EXPERT_PROB = 0.5


class DatasetParseError(ValueError):
    pass


@dataclass
class Trajectory:
    task_id: int
    states: np.ndarray  # (L+1, d_s)
    actions: np.ndarray  # (L, d_a)
    rewards: np.ndarray  # (L,)
    policy: str = "expert"

    @property
    def return_(self) -> float:
        return float(np.sum(self.rewards))

    def __len__(self) -> int:
        return len(self.actions)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "policy": self.policy,
            "states": _fmt(self.states),
            "actions": _fmt(self.actions),
            "rewards": _fmt(self.rewards),
            "return": float(np.float32(self.return_)),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Trajectory":
        return cls(
            int(doc["task_id"]),
            np.asarray(doc["states"], dtype=np.float32),
            np.asarray(doc["actions"], dtype=np.float32),
            np.asarray(doc["rewards"], dtype=np.float32),
            doc.get("policy", "expert"),
        )


def _fmt(a):
    # 9 significant digits round-trip any float32 exactly
    def conv(v):
        return [conv(x) for x in v] if isinstance(v, list) else float("%.9g" % v)

    return conv(np.asarray(a, dtype=np.float32).tolist())


@dataclass
class NormStats:
    s_min: np.ndarray
    s_max: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray

    @classmethod
    def fit(cls, trajs: list[Trajectory]) -> "NormStats":
        s = np.concatenate([t.states for t in trajs])
        a = np.concatenate([t.actions for t in trajs])
        return cls(s.min(0), s.max(0), a.min(0), a.max(0))

    @property
    def x_min(self) -> np.ndarray:
        return np.concatenate([self.s_min, self.a_min])

    @property
    def x_max(self) -> np.ndarray:
        return np.concatenate([self.s_max, self.a_max])

    def to_json(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("s_min", "s_max", "a_min", "a_max")}

    @classmethod
    def from_json(cls, doc: dict) -> "NormStats":
        return cls(*(np.asarray(doc[k], dtype=np.float32) for k in ("s_min", "s_max", "a_min", "a_max")))


def normalize(x, lo, hi) -> np.ndarray:
    """Affine map of [lo, hi] onto [-1, 1]; constant dimensions map to 0."""
    x = np.asarray(x, dtype=np.float32)
    lo = np.asarray(lo, dtype=np.float32)
    span = np.asarray(hi, dtype=np.float32) - lo
    safe = np.where(span > 0, span, 1).astype(np.float32)
    out = np.float32(2) * (x - lo) / safe - np.float32(1)
    return np.where(span > 0, out, np.float32(0)).astype(np.float32)


def denormalize(x, lo, hi) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    lo = np.asarray(lo, dtype=np.float32)
    span = np.asarray(hi, dtype=np.float32) - lo
    return ((x + np.float32(1)) * np.float32(0.5) * span + lo).astype(np.float32)


@dataclass
class Segment:
    """``h`` contiguous transitions from one trajectory, in raw units."""

    task_id: int
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray

    def __len__(self) -> int:
        return len(self.a)


@dataclass
class OfflineDataset:
    family: str
    tasks: list[TaskSpec]
    trajectories: dict[int, list[Trajectory]]
    splits: dict[int, str]
    norm: NormStats | None = None
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        known = {t.task_id for t in self.tasks}
        for tid, trajs in self.trajectories.items():
            if tid not in known:
                raise ConfigError(f"trajectories for unknown task {tid}")
            for tr in trajs:
                if tr.task_id != tid:
                    raise ConfigError(f"trajectory tagged {tr.task_id} filed under task {tid}")
        if self.norm is None:
            train = self.train_trajectories()
            if train:
                self.norm = NormStats.fit(train)

    @property
    def info(self) -> envs.FamilyInfo:
        return envs.family_info(self.family)

    def task(self, task_id: int) -> TaskSpec:
        return next(t for t in self.tasks if t.task_id == task_id)

    def task_ids(self, split: str | None = None) -> list[int]:
        return [t.task_id for t in self.tasks if split is None or self.splits[t.task_id] == split]

    def train_trajectories(self, policy: str | None = None) -> list[Trajectory]:
        out = []
        for tid in self.task_ids("train"):
            out += [t for t in self.trajectories.get(tid, []) if policy is None or t.policy == policy]
        return out

    def all_trajectories(self) -> list[Trajectory]:
        return [t for tid in sorted(self.trajectories) for t in self.trajectories[tid]]

    def norm_s(self, s) -> np.ndarray:
        return normalize(s, self.norm.s_min, self.norm.s_max)

    def norm_a(self, a) -> np.ndarray:
        return normalize(a, self.norm.a_min, self.norm.a_max)


def split_labels(tasks: list[TaskSpec], n_train: int) -> dict[int, str]:
    return {t.task_id: ("train" if i < n_train else "test") for i, t in enumerate(tasks)}


def rollout(spec: TaskSpec, policy: str, rng: np.random.Generator) -> Trajectory:
    if policy not in POLICIES:
        raise ConfigError(f"unknown data policy {policy!r}")
    info = envs.family_info(spec.family)
    env = envs.reset(spec)
    states, actions, rewards = [env.state], [], []
    while not env.done:
        # one expert-vs-uniform draw per step keeps the rng stream policy independent
        use_expert = rng.random() < MEDIUM_EXPERT_PROB
        uniform = rng.uniform(-info.action_bound, info.action_bound, size=info.action_dim)
        if policy == "expert" or (policy == "medium" and use_expert):
            a = envs.expert_action(spec, env.state)
        else:
            a = uniform
        env, r, _ = envs.step(env, a)
        states.append(env.state)
        actions.append(envs.clip_action(spec.family, a))
        rewards.append(r)
    return Trajectory(
        spec.task_id,
        np.asarray(states, dtype=np.float32),
        np.asarray(actions, dtype=np.float32),
        np.asarray(rewards, dtype=np.float32),
        policy,
    )


def collect(
    tasks: list[TaskSpec],
    policy: str,
    n_traj_per_task: int,
    seed: int,
    n_train: int | None = None,
) -> OfflineDataset:
    """Roll out ``policy`` on every task; the first ``n_train`` tasks form the train split."""
    if n_traj_per_task < 1:
        raise ConfigError("n_traj_per_task must be >= 1")
    if not tasks:
        raise ConfigError("need at least one task")
    family = tasks[0].family
    n_train = len(tasks) if n_train is None else n_train
    trajs = {}
    for spec in tasks:
        rng = np.random.default_rng([seed, spec.task_id])
        trajs[spec.task_id] = [rollout(spec, policy, rng) for _ in range(n_traj_per_task)]
    return OfflineDataset(family, list(tasks), trajs, split_labels(tasks, n_train),
                          seeds={"collect": seed, "policy": policy})


def merge(*datasets: OfflineDataset) -> OfflineDataset:
    """Union of trajectories over identical task sets; norm stats are refit."""
    base = datasets[0]
    trajs = {tid: [] for tid in base.trajectories}
    for ds in datasets:
        if [t.task_id for t in ds.tasks] != [t.task_id for t in base.tasks]:
            raise ConfigError("can only merge datasets over the same tasks")
        for tid, lst in ds.trajectories.items():
            trajs[tid] = trajs.get(tid, []) + list(lst)
    seeds = {"merged": [ds.seeds for ds in datasets]}
    return OfflineDataset(base.family, list(base.tasks), trajs, dict(base.splits), seeds=seeds)


def with_norm(ds: OfflineDataset, norm: NormStats) -> OfflineDataset:
    return OfflineDataset(ds.family, ds.tasks, ds.trajectories, ds.splits, norm, ds.seeds)


# -- sampling -------------------------------------------------------------------


def plan_rows(ds: OfflineDataset, traj: Trajectory) -> np.ndarray:
    """Normalized (state, action) rows of a trajectory, shape (L, d_s + d_a)."""
    return np.concatenate([ds.norm_s(traj.states[:-1]), ds.norm_a(traj.actions)], axis=1)


def sample_plan_batch(
    ds: OfflineDataset,
    H: int,
    batch_size: int,
    rng: np.random.Generator,
    trajs: list[Trajectory] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (plans (B, H, d_s + d_a), task_ids (B,), trajectory indices (B,))."""
    trajs = ds.train_trajectories() if trajs is None else trajs
    L = ds.info.max_steps
    if H > L:
        raise ConfigError(f"plan horizon {H} exceeds episode length {L}")
    idx = rng.integers(0, len(trajs), size=batch_size)
    starts = rng.integers(0, L - H + 1, size=batch_size)
    out = np.empty((batch_size, H, ds.info.state_dim + ds.info.action_dim), dtype=np.float32)
    for b, (i, t0) in enumerate(zip(idx, starts)):
        out[b] = plan_rows(ds, trajs[i])[t0 : t0 + H]
    return out, np.array([trajs[i].task_id for i in idx]), idx


def segment_of(traj: Trajectory, t0: int, h: int) -> Segment:
    return Segment(
        traj.task_id,
        traj.states[t0 : t0 + h],
        traj.actions[t0 : t0 + h],
        traj.rewards[t0 : t0 + h],
        traj.states[t0 + 1 : t0 + h + 1],
    )


def sample_segments(
    trajs: list[Trajectory] | OfflineDataset, h: int, m: int, rng: np.random.Generator
) -> list[Segment]:
    if isinstance(trajs, OfflineDataset):
        trajs = trajs.train_trajectories()
    if not trajs:
        raise ConfigError("no trajectories to sample segments from")
    L = min(len(t) for t in trajs)
    if h > L:
        raise ConfigError(f"segment length {h} exceeds episode length {L}")
    out = []
    for _ in range(m):
        tr = trajs[rng.integers(0, len(trajs))]
        t0 = int(rng.integers(0, len(tr) - h + 1))
        out.append(segment_of(tr, t0, h))
    return out


# -- storage --------------------------------------------------------------------


def save(ds: OfflineDataset, directory) -> Path:
    d = Path(directory)
    (d / "tasks").mkdir(parents=True, exist_ok=True)
    info = ds.info
    meta = {
        "family": ds.family,
        "dims": {"state": info.state_dim, "action": info.action_dim, "episode_length": info.max_steps},
        "tasks": [t.to_json() for t in ds.tasks],
        "splits": {str(k): v for k, v in ds.splits.items()},
        "norm": ds.norm.to_json() if ds.norm is not None else None,
        "seeds": ds.seeds,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    for tid in sorted(ds.trajectories):
        lines = [json.dumps(tr.to_json(), separators=(",", ":")) for tr in ds.trajectories[tid]]
        (d / "tasks" / f"{tid}.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return d


def load(directory) -> OfflineDataset:
    d = Path(directory)
    meta_path = d / "meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetParseError(f"{meta_path}: {e}") from e
    family = meta["family"]
    tasks = [TaskSpec(family, tuple(t["params"]), int(t["task_id"])) for t in meta["tasks"]]
    trajs: dict[int, list[Trajectory]] = {}
    for t in tasks:
        path = d / "tasks" / f"{t.task_id}.jsonl"
        if not path.exists():
            continue
        lst = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                lst.append(Trajectory.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetParseError(f"{path}:{lineno}: {e}") from e
        trajs[t.task_id] = lst
    norm = NormStats.from_json(meta["norm"]) if meta.get("norm") else None
    splits = {int(k): v for k, v in meta["splits"].items()}
    return OfflineDataset(family, tasks, trajs, splits, norm, meta.get("seeds", {}))
