"""Parametric multi-task environments and their scripted experts.

point_robot
    2D navigation from the origin to a goal in the unit square. Action is a
    displacement clipped to [-0.1, 0.1] per axis; reward is the negative
    distance to the goal after moving. 20 steps.
point_mass_dyn
    Damped point mass driven towards a fixed target (1, 1). Tasks differ only
    in friction ``c`` and control gain ``g``:
    ``v' = (1 - c) v + g * 0.05 * a``, ``p' = p + v'``. 64 steps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FAMILIES = ("point_robot", "point_mass_dyn")

PM_TARGET = np.array([1.0, 1.0])
PM_KP = 2.0
PM_KD = 4.0


class ConfigError(ValueError):
    pass


class EnvStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class FamilyInfo:
    state_dim: int
    action_dim: int
    action_bound: float
    max_steps: int
    param_low: tuple[float, ...]
    param_high: tuple[float, ...]


FAMILY_INFO = {
    "point_robot": FamilyInfo(2, 2, 0.1, 20, (0.0, 0.0), (1.0, 1.0)),
    "point_mass_dyn": FamilyInfo(4, 2, 1.0, 64, (0.1, 0.5), (1.0, 1.5)),
}


def family_info(family: str) -> FamilyInfo:
    try:
        return FAMILY_INFO[family]
    except KeyError:
        raise ConfigError(f"unknown env family {family!r}; expected one of {FAMILIES}") from None


@dataclass(frozen=True)
class TaskSpec:
    family: str
    params: tuple[float, ...]
    task_id: int

    def __post_init__(self):
        info = family_info(self.family)
        if len(self.params) != len(info.param_low):
            raise ConfigError(f"{self.family} expects {len(info.param_low)} params")
        for v, lo, hi in zip(self.params, info.param_low, info.param_high):
            if not lo <= v <= hi:
                raise ConfigError(f"param {v} outside [{lo}, {hi}] for {self.family}")

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "params": list(self.params)}


@dataclass
class EnvInstance:
    spec: TaskSpec
    state: np.ndarray
    step_count: int = 0
    max_steps: int = field(default=0)

    @property
    def done(self) -> bool:
        return self.step_count >= self.max_steps


def sample_tasks(family: str, n: int, seed: int, first_id: int = 0) -> list[TaskSpec]:
    info = family_info(family)
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    draws = rng.uniform(info.param_low, info.param_high, size=(n, len(info.param_low)))
    return [
        TaskSpec(family, tuple(float(v) for v in row), first_id + i) for i, row in enumerate(draws)
    ]


def reset(spec: TaskSpec, seed: int | None = None) -> EnvInstance:
    # both families start deterministically at rest at the origin; seed kept for API symmetry
    info = family_info(spec.family)
    return EnvInstance(spec, np.zeros(info.state_dim), 0, info.max_steps)


def clip_action(family: str, action) -> np.ndarray:
    bound = family_info(family).action_bound
    return np.clip(np.asarray(action, dtype=np.float64), -bound, bound)


def step(env: EnvInstance, action) -> tuple[EnvInstance, float, bool]:
    if env.done:
        raise EnvStateError("step() called on a finished episode; reset first")
    spec = env.spec
    a = clip_action(spec.family, action)
    if a.shape != (2,):
        raise ConfigError(f"action must have 2 components, got shape {a.shape}")
    if spec.family == "point_robot":
        pos = env.state + a
        state = pos
        reward = -float(np.linalg.norm(pos - np.asarray(spec.params)))
    else:
        c, g = spec.params
        vel = (1.0 - c) * env.state[2:] + g * 0.05 * a
        pos = env.state[:2] + vel
        state = np.concatenate([pos, vel])
        reward = -float(np.linalg.norm(pos - PM_TARGET))
    new = replace(env, state=state, step_count=env.step_count + 1)
    return new, reward, new.done


def expert_action(spec: TaskSpec, state) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if spec.family == "point_robot":
        return clip_action(spec.family, np.asarray(spec.params) - state)
    pos, vel = state[:2], state[2:]
    return clip_action(spec.family, (PM_TARGET - pos) * PM_KP - vel * PM_KD)


def oracle_return(spec: TaskSpec) -> float:
    """Return of one scripted-expert episode (environments are deterministic)."""
    env = reset(spec)
    total = 0.0
    while not env.done:
        env, r, _ = step(env, expert_action(spec, env.state))
        total += r
    return total


# -- task-set files -----------------------------------------------------------


def tasks_to_json(family: str, seed: int, tasks: list[TaskSpec]) -> dict:
    return {"family": family, "seed": seed, "tasks": [t.to_json() for t in tasks]}


def tasks_from_json(doc: dict) -> list[TaskSpec]:
    family = doc["family"]
    return [TaskSpec(family, tuple(t["params"]), int(t["task_id"])) for t in doc["tasks"]]


def save_tasks(path, family: str, seed: int, tasks: list[TaskSpec]) -> None:
    Path(path).write_text(json.dumps(tasks_to_json(family, seed, tasks), indent=1))


def load_tasks(path) -> list[TaskSpec]:
    return tasks_from_json(json.loads(Path(path).read_text()))
