"""Experiment configuration and the pipeline stages behind the CLI.

Directory layout under an output root::

    <out>/data/        tasks.json, meta.json, tasks/<id>.jsonl
    <out>/ckpt/        context/, diffusion/, manifest.json, *_losses.csv
    <out>/eval/        report.json, report.csv
    <out>/ablate/      table.csv, table.json

Every JSON artifact carries the resolved config and a build identifier.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import datastore, envs
from . import diffusion as df
from . import numcore as nc
from . import planner as pl
from . import taskcontext as tc

log = logging.getLogger(__name__)

DEFAULT_H_CTX = {"point_robot": 4, "point_mass_dyn": 16}
QUALITIES = datastore.POLICIES
# parameters an ablation can vary without retraining
TEST_TIME = ("omega", "lam", "guide_step", "temperature", "clip_denoised")
# parameters whose change needs only the diffusion model retrained
DIFFUSION_TIME = ("drop_prob", "K", "H", "schedule", "diff_steps", "diff_batch", "diff_lr", "diff_seed")


@dataclass
class ExperimentConfig:
    family: str = "point_robot"
    n_train: int = 30
    n_test: int = 10
    task_seed: int = 0
    # offline data: trajectories per training task, by quality
    n_expert: int = 1
    n_medium: int = 0
    n_random: int = 10
    data_seed: int = 0
    # context encoder
    h: int = 0  # 0 -> family default
    d_z: int = 16
    ctx_epochs: int = 30
    ctx_batch: int = 64
    ctx_lr: float = 1e-3
    ctx_hidden: list = field(default_factory=lambda: [128, 128, 128])
    ctx_seed: int = 0
    bank_size: int = 8
    bank_qualities: list = field(default_factory=lambda: ["expert"])
    # diffusion
    H: int = 4
    K: int = 100
    schedule: str = "cosine"
    drop_prob: float = 0.3
    diff_steps: int = 20000
    diff_batch: int = 128
    diff_lr: float = 1e-3
    diff_hidden: list = field(default_factory=lambda: [256, 256, 256])
    diff_seed: int = 0
    # sampling
    omega: float = 1.6
    lam: float = 0.5
    guide_step: float = 1.0
    temperature: float = 0.5
    clip_denoised: bool = True
    # evaluation
    warm_qualities: list = field(default_factory=lambda: ["expert"])
    warm_n_traj: int = 5
    warm_m: int = 16
    eval_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    episodes_per_task: int = 10
    jobs: int = 0  # 0 -> os.cpu_count()
    out: str = "runs/default"

    @property
    def ctx_h(self) -> int:
        return self.h or DEFAULT_H_CTX[self.family]

    def validate(self) -> "ExperimentConfig":
        info = envs.family_info(self.family)  # raises ConfigError on unknown family
        ints = dict(n_train=1, n_test=0, n_expert=1, n_medium=0, n_random=0, d_z=1, ctx_epochs=1,
                    ctx_batch=1, bank_size=1, H=1, K=1, diff_steps=0, diff_batch=1,
                    warm_n_traj=1, warm_m=1, episodes_per_task=0, jobs=0)
        for name, lo in ints.items():
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < lo:
                raise envs.ConfigError(f"{name} must be an integer >= {lo}, got {v!r}")
        if not 1 <= self.ctx_h <= info.max_steps:
            raise envs.ConfigError(f"h={self.ctx_h} outside [1, {info.max_steps}]")
        if self.H > info.max_steps:
            raise envs.ConfigError(f"H={self.H} exceeds episode length {info.max_steps}")
        if self.schedule not in ("cosine", "linear"):
            raise envs.ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise envs.ConfigError("drop_prob must lie in [0, 1]")
        if self.ctx_lr <= 0 or self.diff_lr <= 0:
            raise envs.ConfigError("learning rates must be > 0")
        for q in list(self.warm_qualities) + list(self.bank_qualities):
            if q not in QUALITIES:
                raise envs.ConfigError(f"unknown data quality {q!r}; expected one of {QUALITIES}")
        counts = {"expert": self.n_expert, "medium": self.n_medium, "random": self.n_random}
        for q in self.bank_qualities:
            if counts[q] == 0:
                raise envs.ConfigError(f"bank quality {q!r} needs n_{q} > 0")
        if not self.eval_seeds:
            raise envs.ConfigError("eval_seeds must be non-empty")
        self.guide().validate()
        return self

    def guide(self) -> df.GuideConfig:
        # a model trained with every context dropped has only its unconditional branch
        omega = 0.0 if self.drop_prob >= 1.0 else self.omega
        return df.GuideConfig(omega, self.lam, self.guide_step, self.temperature, self.K, self.H,
                              self.clip_denoised)

    def context_config(self) -> tc.ContextConfig:
        return tc.ContextConfig(epochs=self.ctx_epochs, batch=self.ctx_batch, lr=self.ctx_lr, h=self.ctx_h,
                                d_z=self.d_z, seed=self.ctx_seed, hidden=tuple(self.ctx_hidden), pool_k=1)

    def diffusion_config(self) -> df.DiffusionConfig:
        return df.DiffusionConfig(H=self.H, K=self.K, schedule=self.schedule, steps=self.diff_steps,
                                  batch=self.diff_batch, lr=self.diff_lr, drop_prob=self.drop_prob,
                                  hidden=tuple(self.diff_hidden), seed=self.diff_seed)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise envs.ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def override(self, **kv) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kv.items() if v is not None})


def coerce(cfg: ExperimentConfig, key: str, text: str):
    """Parse a command-line string into the type of config field ``key``."""
    kinds = {f.name: f for f in fields(ExperimentConfig)}
    if key not in kinds:
        raise envs.ConfigError(f"unknown config key {key!r}")
    cur = getattr(cfg, key)
    try:
        if isinstance(cur, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(cur, int):
            return int(text)
        if isinstance(cur, float):
            return float(text)
        if isinstance(cur, list):
            items = [t for t in text.split(",") if t]
            if cur and isinstance(cur[0], int):
                return [int(t) for t in items]
            return items
        return text
    except ValueError:
        raise envs.ConfigError(f"cannot parse {text!r} for {key}") from None


def build_id() -> str:
    """git-describe identifier of the source tree, or the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "mdiff-0.1.0"


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _envelope(cfg: ExperimentConfig, **body) -> dict:
    return {"build": build_id(), "config": cfg.to_json(), **body}


# -- stages -----------------------------------------------------------------------


def make_tasks(cfg: ExperimentConfig) -> tuple[list[envs.TaskSpec], list[envs.TaskSpec]]:
    tasks = envs.sample_tasks(cfg.family, cfg.n_train + max(cfg.n_test, 0) or 1, cfg.task_seed)
    return tasks[: cfg.n_train], tasks[cfg.n_train : cfg.n_train + cfg.n_test]


def gen_data(cfg: ExperimentConfig, out: Path | None = None) -> tuple[datastore.OfflineDataset, Path]:
    """Collect the offline dataset (train split only carries data) and save it."""
    out = Path(out or Path(cfg.out) / "data")
    train, test = make_tasks(cfg)
    parts = []
    for k, (q, n) in enumerate((("expert", cfg.n_expert), ("medium", cfg.n_medium), ("random", cfg.n_random))):
        if n > 0:
            parts.append(datastore.collect(train, q, n, cfg.data_seed * 7 + k, n_train=len(train)))
    ds = datastore.merge(*parts)
    ds = datastore.OfflineDataset(ds.family, train + test, ds.trajectories,
                                  {**ds.splits, **{t.task_id: "test" for t in test}}, None,
                                  {"data": cfg.data_seed, "tasks": cfg.task_seed})
    datastore.save(ds, out)
    envs.save_tasks(out / "tasks.json", cfg.family, cfg.task_seed, train + test)
    _write_json(out / "config.json", _envelope(cfg))
    return ds, out


def summarize_returns(ds: datastore.OfflineDataset) -> dict[str, float]:
    """Mean per-trajectory return for each data quality present."""
    out: dict[str, list[float]] = {}
    for tr in ds.all_trajectories():
        out.setdefault(tr.policy, []).append(tr.return_)
    return {q: float(np.mean(v)) for q, v in sorted(out.items())}


def _losses_csv(path: Path, losses) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(losses):
        w.writerow([i + 1, f"{v:.8g}"])
    path.write_text(buf.getvalue())


def train(cfg: ExperimentConfig, data_dir: Path, ckpt: Path, resume: bool = False,
          stop_at: int | None = None) -> pl.PlannerModels:
    """Train context models, then the diffusion model; write checkpoints and loss CSVs.

    With ``resume`` the context models and the diffusion training state are
    loaded from ``ckpt`` and training continues to ``cfg.diff_steps``.
    ``stop_at`` halts diffusion training early (used to exercise resume).
    """
    ds = datastore.load(data_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    state = None
    if resume and (ckpt / "diffusion" / "train_state.json").exists():
        ctx = tc.load_models(ckpt / "context")
        state = df.load_train_state(ckpt / "diffusion")
        log.info("resuming diffusion training at step %d", state.step)
    else:
        res = tc.train_context(ds, cfg.context_config())
        ctx = res.models
        tc.save_models(ctx, ckpt / "context")
        _losses_csv(ckpt / "context_losses.csv", res.losses)
    bank = None
    if cfg.drop_prob < 1.0:
        bank = tc.context_bank(ctx, ds, tuple(cfg.bank_qualities), cfg.bank_size, cfg.warm_n_traj,
                               cfg.warm_m, cfg.ctx_seed)
    until = cfg.diff_steps if stop_at is None else min(stop_at, cfg.diff_steps)
    state = df.train_diffusion(ds, bank, cfg.diffusion_config(), cfg.d_z, state, until)
    df.save_train_state(state, ckpt / "diffusion")
    _losses_csv(ckpt / "diffusion_losses.csv", state.losses)
    _write_json(ckpt / "manifest.json", _envelope(cfg, steps_done=state.step,
                                                 context=str(ckpt / "context"),
                                                 diffusion=str(ckpt / "diffusion")))
    return pl.PlannerModels(ctx, state.model)


def load_planner(ckpt: Path) -> pl.PlannerModels:
    for f in ("context/context.json", "diffusion/diffusion.json"):
        if not (ckpt / f).exists():
            raise FileNotFoundError(f"missing checkpoint file {ckpt / f}")
    return pl.PlannerModels(tc.load_models(ckpt / "context"), df.load_model(ckpt / "diffusion"))


def evaluate(cfg: ExperimentConfig, models: pl.PlannerModels, test_tasks: list[envs.TaskSpec],
             quality: str, guide: df.GuideConfig | None = None) -> list[pl.EvalReport]:
    """One meta-test report per evaluation seed; seed s drives both the
    warm-start collection and the sampling noise."""
    guide = guide or cfg.guide()
    reps = []
    for s in cfg.eval_seeds:
        warm = pl.WarmStart(quality, cfg.warm_n_traj, 1000 + int(s), cfg.warm_m)
        reps.append(pl.meta_test(test_tasks, models, warm, guide, cfg.episodes_per_task, seed=int(s)))
    return reps


def combine(reports: list[pl.EvalReport]) -> dict:
    """Pool seeds: per task and overall mean/std of returns, mean dynamics gap."""
    per_task: dict[int, dict] = {}
    for rep in reports:
        for row in rep.rows:
            d = per_task.setdefault(row.task_id, {"task_id": row.task_id, "params": row.params,
                                                  "returns": [], "gaps": [],
                                                  "oracle_return": row.oracle_return})
            d["returns"].extend(row.returns)
            d["gaps"].append(row.mean_dyn_gap)
    rows = []
    for tid in sorted(per_task):
        d = per_task[tid]
        gaps = [g for g in d["gaps"] if np.isfinite(g)]
        rows.append({"task_id": tid, "params": d["params"], "mean_return": float(np.mean(d["returns"])),
                     "std_return": float(np.std(d["returns"])),
                     "mean_dyn_gap": float(np.mean(gaps)) if gaps else None,
                     "oracle_return": d["oracle_return"], "n_episodes": len(d["returns"])})
    rets = [r for d in per_task.values() for r in d["returns"]]
    gaps = [r["mean_dyn_gap"] for r in rows if r["mean_dyn_gap"] is not None]
    oracle = [r["oracle_return"] for r in rows]
    summary = {
        "n_tasks": len(rows), "n_episodes": len(rets),
        "mean_return": float(np.mean(rets)) if rets else None,
        "std_return": float(np.std(rets)) if rets else None,
        "seed_means": [r.mean_return if r.rows else None for r in reports],
        "mean_dyn_gap": float(np.mean(gaps)) if gaps else None,
        "mean_oracle_return": float(np.mean(oracle)) if oracle else None,
    }
    if rets and oracle:
        summary["relative_gap"] = (summary["mean_oracle_return"] - summary["mean_return"]) / abs(
            summary["mean_oracle_return"])
    return {"summary": summary, "tasks": rows}


def eval_report(cfg: ExperimentConfig, models: pl.PlannerModels, test_tasks) -> dict:
    body = {q: combine(evaluate(cfg, models, test_tasks, q)) for q in cfg.warm_qualities}
    return _envelope(cfg, qualities=body)


def report_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quality", "task_id", "params", "mean_return", "std_return", "mean_dyn_gap",
                "oracle_return", "n_episodes"])
    for q, body in doc["qualities"].items():
        for r in body["tasks"]:
            w.writerow([q, r["task_id"], " ".join(f"{p:.6g}" for p in r["params"]), _f(r["mean_return"]),
                        _f(r["std_return"]), _f(r["mean_dyn_gap"]), _f(r["oracle_return"]), r["n_episodes"]])
    return buf.getvalue()


def _f(v) -> str:
    return "" if v is None else f"{v:.6g}"


# -- ablation ---------------------------------------------------------------------


def expand_grid(grid: dict[str, list]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise envs.ConfigError("ablation grid must name at least one parameter with values")
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


@dataclass
class CellJob:
    index: int
    params: dict
    cfg: dict
    ckpt: str
    data_dir: str
    cell_dir: str


def run_cell(job: CellJob) -> dict:
    """One grid cell. Test-time cells reuse the base checkpoint; other cells retrain.

    Evaluation seeds are shared by all cells so cells are compared on common
    random numbers; retraining cells derive their training seeds as
    ``seed ^ cell_index``.
    """
    row = {"cell": job.index, **job.params}
    try:
        cfg = ExperimentConfig.from_json(job.cfg).override(**job.params).validate()
        keys = set(job.params)
        if keys <= set(TEST_TIME):
            models = load_planner(Path(job.ckpt))
        else:
            if keys <= set(TEST_TIME) | set(DIFFUSION_TIME):
                cfg = cfg.override(diff_seed=cfg.diff_seed ^ job.index)
            else:
                cfg = cfg.override(diff_seed=cfg.diff_seed ^ job.index, ctx_seed=cfg.ctx_seed ^ job.index)
            cell_ckpt = Path(job.cell_dir) / "ckpt"
            if keys <= set(TEST_TIME) | set(DIFFUSION_TIME):
                models = _retrain_diffusion(cfg, Path(job.data_dir), Path(job.ckpt), cell_ckpt)
            else:
                models = train(cfg, Path(job.data_dir), cell_ckpt)
        _, test = make_tasks(cfg)
        summary = {q: combine(evaluate(cfg, models, test, q))["summary"] for q in cfg.warm_qualities}
        s = summary[cfg.warm_qualities[0]]
        row.update(status="ok", mean_return=s["mean_return"], std_return=s["std_return"],
                   mean_dyn_gap=s["mean_dyn_gap"], n_episodes=s["n_episodes"])
    except (envs.ConfigError, nc.NumericError, nc.ShapeError, FileNotFoundError, ValueError) as e:
        row.update(status=f"failed: {type(e).__name__}: {e}", mean_return=None, std_return=None,
                   mean_dyn_gap=None, n_episodes=0)
    return row


def _retrain_diffusion(cfg, data_dir: Path, base_ckpt: Path, cell_ckpt: Path) -> pl.PlannerModels:
    ds = datastore.load(data_dir)
    ctx = tc.load_models(base_ckpt / "context")
    bank = None
    if cfg.drop_prob < 1.0:
        bank = tc.context_bank(ctx, ds, tuple(cfg.bank_qualities), cfg.bank_size, cfg.warm_n_traj,
                               cfg.warm_m, cfg.ctx_seed)
    state = df.train_diffusion(ds, bank, cfg.diffusion_config(), cfg.d_z)
    df.save_model(state.model, cell_ckpt / "diffusion")
    return pl.PlannerModels(ctx, state.model)


def ablate(cfg: ExperimentConfig, grid: dict[str, list], ckpt: Path, data_dir: Path, out: Path,
           jobs: int | None = None) -> list[dict]:
    cells = expand_grid(grid)
    log.info("ablation grid: %d cells over %s", len(cells), ", ".join(grid))
    work = [CellJob(i, c, cfg.to_json(), str(ckpt), str(data_dir), str(out / f"cell{i:03d}"))
            for i, c in enumerate(cells)]
    jobs = jobs or cfg.jobs or os.cpu_count() or 1
    if jobs == 1 or len(work) == 1:
        rows = [run_cell(j) for j in work]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            rows = list(pool.map(run_cell, work))
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(ablation_csv(rows, list(grid)))
    _write_json(out / "table.json", _envelope(cfg, grid=grid, rows=rows))
    return rows


def ablation_csv(rows: list[dict], keys: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["cell", *keys, "mean_return", "std_return", "mean_dyn_gap", "n_episodes", "status"]
    w.writerow(cols)
    for r in rows:
        w.writerow([_f(r[c]) if isinstance(r.get(c), float) or r.get(c) is None else r[c] for c in cols])
    return buf.getvalue()


# -- report -----------------------------------------------------------------------


def render_markdown(paths: list[Path]) -> str:
    """Render CSV files as Markdown tables, one section per file."""
    parts = []
    for p in paths:
        rows = list(csv.reader(p.read_text().splitlines()))
        parts.append(f"## {p.parent.name}/{p.name}\n")
        if not rows:
            parts.append("(empty)\n")
            continue
        parts.append("| " + " | ".join(rows[0]) + " |")
        parts.append("|" + "---|" * len(rows[0]))
        for r in rows[1:]:
            parts.append("| " + " | ".join(r) + " |")
        parts.append("")
    return "\n".join(parts) + "\n"
