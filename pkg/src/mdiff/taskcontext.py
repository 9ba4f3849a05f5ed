"""Task-context encoder trained jointly with context-conditioned reward and
dynamics models.

A segment of ``h`` transitions is flattened in time order, each transition
as ``[s, a, r, s_next]`` with states/actions normalized and rewards raw. The
encoder maps it to ``z``; the reward model predicts ``r`` from ``(s, a, z)``
and the dynamics model predicts the normalized next state from ``(s, a, z)``
as ``s + net(s, a, z)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datastore import NormStats, OfflineDataset, Segment, Trajectory, normalize, sample_segments, segment_of
from .envs import ConfigError, family_info

log = logging.getLogger(__name__)


@dataclass
class ContextModels:
    encoder: nc.ParamStore
    reward_model: nc.ParamStore
    dyn_model: nc.ParamStore
    family: str
    h: int
    d_z: int
    norm: NormStats

    @property
    def state_dim(self) -> int:
        return family_info(self.family).state_dim

    @property
    def action_dim(self) -> int:
        return family_info(self.family).action_dim

    def nets(self) -> tuple[nc.ParamStore, nc.ParamStore, nc.ParamStore]:
        return self.encoder, self.reward_model, self.dyn_model

    def with_nets(self, enc, rew, dyn) -> "ContextModels":
        return ContextModels(enc, rew, dyn, self.family, self.h, self.d_z, self.norm)

    def astype(self, dtype) -> "ContextModels":
        return self.with_nets(*(n.astype(dtype) for n in self.nets()))


@dataclass
class ContextConfig:
    epochs: int = 30
    batch: int = 64
    lr: float = 1e-3
    h: int = 4
    d_z: int = 16
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128, 128)
    head_hidden: tuple[int, ...] = (128, 128)
    task_targets: bool = True
    pool_k: int = 1


def init_models(family: str, norm: NormStats, h: int, d_z: int, rng,
                hidden=(128, 128, 128), head_hidden=(128, 128), dtype=np.float32) -> ContextModels:
    info = family_info(family)
    ds_, da = info.state_dim, info.action_dim
    enc = nc.mlp(h * (2 * ds_ + da + 1), hidden, d_z, rng, "mish", dtype)
    rew = nc.mlp(ds_ + da + d_z, head_hidden, 1, rng, "mish", dtype)
    dyn = nc.mlp(ds_ + da + d_z, head_hidden, ds_, rng, "mish", dtype)
    return ContextModels(enc, rew, dyn, family, h, d_z, norm)


# -- encoding -------------------------------------------------------------------


def segment_features(models: ContextModels, segments: list[Segment]) -> np.ndarray:
    """Flatten segments into encoder inputs, shape (m, h * (2 d_s + d_a + 1))."""
    n = models.norm
    rows = []
    for seg in segments:
        if len(seg) != models.h:
            raise nc.ShapeError(f"segment has {len(seg)} transitions, encoder expects h={models.h}")
        per_step = np.concatenate(
            [
                normalize(seg.s, n.s_min, n.s_max),
                normalize(seg.a, n.a_min, n.a_max),
                np.asarray(seg.r, dtype=np.float32)[:, None],
                normalize(seg.s_next, n.s_min, n.s_max),
            ],
            axis=1,
        )
        rows.append(per_step.reshape(-1))
    return np.asarray(rows, dtype=models.encoder.dtype).reshape(len(segments), -1)


def encode_segment(models: ContextModels, segment: Segment) -> np.ndarray:
    return nc.forward(models.encoder, segment_features(models, [segment])[0])


def encode_segments(models: ContextModels, segments: list[Segment]) -> np.ndarray:
    return nc.forward(models.encoder, segment_features(models, segments))


def pool(contexts) -> np.ndarray:
    contexts = list(contexts)
    if not contexts:
        raise ValueError("pool() needs at least one context")
    return np.mean(np.stack(contexts), axis=0)


def infer_context(models: ContextModels, warm_start: list[Trajectory], h: int | None = None,
                  m: int = 16, seed: int = 0) -> np.ndarray:
    h = models.h if h is None else h
    if not warm_start:
        raise ValueError("need at least one warm-start trajectory")
    short = [len(t) for t in warm_start if len(t) < h]
    if short:
        raise ValueError(f"warm-start trajectory of length {short[0]} shorter than h={h}")
    segs = sample_segments(warm_start, h, m, np.random.default_rng(seed))
    return pool(encode_segments(models, segs))


def context_bank(models: ContextModels, ds: OfflineDataset, qualities=("expert",), size: int = 8,
                 n_traj: int = 5, m: int = 16, seed: int = 0) -> dict[int, np.ndarray]:
    """Per training task, ``size`` pooled contexts drawn the way warm-start
    contexts are drawn at test time, from the task's own offline trajectories.

    Each entry pools ``m`` segments from up to ``n_traj`` trajectories of one
    quality; qualities are cycled. Returns task_id -> (size, d_z).
    """
    rng = np.random.default_rng(seed)
    bank = {}
    for tid in ds.task_ids("train"):
        by_q = {q: [t for t in ds.trajectories[tid] if t.policy == q] for q in qualities}
        by_q = {q: ts for q, ts in by_q.items() if ts}
        if not by_q:
            raise ConfigError(f"task {tid} has no trajectories of quality {qualities}")
        zs = []
        for j in range(size):
            trajs = list(by_q.values())[j % len(by_q)]
            pick = rng.choice(len(trajs), size=min(n_traj, len(trajs)), replace=False)
            zs.append(infer_context(models, [trajs[i] for i in pick], m=m, seed=int(rng.integers(2**31))))
        bank[tid] = np.stack(zs)
    return bank


def nearest_centroid(centroids: dict[int, np.ndarray], z) -> int:
    """Task id whose centroid context is closest to ``z`` (Euclidean)."""
    if not centroids:
        raise ValueError("no centroids")
    ids = list(centroids)
    d = [np.linalg.norm(np.asarray(centroids[i]) - z) for i in ids]
    return ids[int(np.argmin(d))]


# -- joint objective ----------------------------------------------------------


def heads_input(models: ContextModels, s_n, a_n, z) -> np.ndarray:
    return np.concatenate([s_n, a_n, z], axis=-1).astype(models.encoder.dtype, copy=False)


def predict_reward(models: ContextModels, s_n, a_n, z) -> np.ndarray:
    return nc.forward(models.reward_model, heads_input(models, s_n, a_n, z))[..., 0]


def predict_next(models: ContextModels, s_n, a_n, z) -> np.ndarray:
    return np.asarray(s_n, dtype=models.encoder.dtype) + nc.forward(
        models.dyn_model, heads_input(models, s_n, a_n, z)
    )


def joint_loss(models: ContextModels, seg_x, s_n, a_n, r, s_next_n):
    """Mean over the batch of ||s_next_hat - s_next||^2 + (r_hat - r)^2.

    ``seg_x`` holds encoder inputs (see :func:`segment_features`), either
    (B, in) or (B, k, in); in the latter case ``z`` is the mean of the k
    segment encodings. The other arrays hold one target transition per row.
    Returns ``(loss, (enc_grads, rew_grads, dyn_grads))``.
    """
    enc, rew, dyn = models.nets()
    dt = enc.dtype
    seg_x = np.asarray(seg_x, dt)
    pooled = seg_x.ndim == 3
    B = seg_x.shape[0]
    k = seg_x.shape[1] if pooled else 1
    flat = seg_x.reshape(B * k, -1)
    zs, enc_cache = nc.forward_cached(enc, flat)
    z = zs.reshape(B, k, -1).mean(axis=1) if pooled else zs
    s_n = np.asarray(s_n, dt)
    inp = np.concatenate([s_n, np.asarray(a_n, dt), z], axis=1)
    r_hat, r_cache = nc.forward_cached(rew, inp)
    delta, d_cache = nc.forward_cached(dyn, inp)
    r_err = r_hat[:, 0] - np.asarray(r, dt)
    s_err = s_n + delta - np.asarray(s_next_n, dt)
    loss = float((np.sum(s_err.astype(np.float64) ** 2) + np.sum(r_err.astype(np.float64) ** 2)) / B)
    g_rew, gin_r = nc.backward(rew, inp, (2.0 / B * r_err)[:, None].astype(dt), r_cache)
    g_dyn, gin_d = nc.backward(dyn, inp, (2.0 / B * s_err).astype(dt), d_cache)
    gz = (gin_r + gin_d)[:, -models.d_z:]
    if pooled:
        gz = np.repeat(gz / dt.type(k), k, axis=0)
    g_enc, _ = nc.backward(enc, flat, gz, enc_cache)
    return loss, (g_enc, g_rew, g_dyn)


def _index_segments(trajs: list[Trajectory], h: int) -> np.ndarray:
    pairs = [(i, t0) for i, tr in enumerate(trajs) for t0 in range(len(tr) - h + 1)]
    return np.asarray(pairs, dtype=np.int64)


class SegmentIndex:
    """Normalized per-step features of a trajectory list, flattened once so that
    batches are built with array indexing.

    Row ``offset[i] + t`` holds ``(s_t, a_t, r_t, s_{t+1})`` of trajectory i,
    normalized the way :func:`segment_features` does.
    """

    def __init__(self, models: ContextModels, trajs: list[Trajectory], by_task: dict[int, list[int]] | None):
        n = models.norm
        self.h = models.h
        self.ds = models.state_dim
        self.da = models.action_dim
        self.length = np.array([len(t) for t in trajs], dtype=np.int64)
        self.offset = np.concatenate([[0], np.cumsum(self.length)[:-1]]).astype(np.int64)
        self.feat = np.concatenate([
            np.concatenate([
                normalize(t.states[:-1], n.s_min, n.s_max),
                normalize(t.actions, n.a_min, n.a_max),
                np.asarray(t.rewards, np.float32)[:, None],
                normalize(t.states[1:], n.s_min, n.s_max),
            ], axis=1)
            for t in trajs
        ]).astype(models.encoder.dtype)
        if by_task:
            groups = [by_task[t.task_id] for t in trajs]
        else:
            groups = [[i] for i in range(len(trajs))]
        width = max(len(g) for g in groups)
        self.peers = np.zeros((len(trajs), width), dtype=np.int64)
        self.n_peers = np.array([len(g) for g in groups], dtype=np.int64)
        for i, g in enumerate(groups):
            self.peers[i, : len(g)] = g

    def _peer(self, anchors, rng):
        k = np.floor(rng.random(len(anchors)) * self.n_peers[anchors]).astype(np.int64)
        return self.peers[anchors, k]

    def _segments(self, traj, t0):
        rows = (self.offset[traj] + t0)[:, None] + np.arange(self.h)
        return self.feat[rows].reshape(len(traj), -1)

    def batch(self, pairs: np.ndarray, rng: np.random.Generator, pool_k: int = 1):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        anchors = pairs[:, 0]
        B = len(pairs)
        seg_x = self._segments(anchors, pairs[:, 1])
        if pool_k > 1:
            cols = [seg_x]
            for _ in range(pool_k - 1):
                j = self._peer(anchors, rng)
                t0 = np.floor(rng.random(B) * (self.length[j] - self.h + 1)).astype(np.int64)
                cols.append(self._segments(j, t0))
            seg_x = np.stack(cols, axis=1)
        j = self._peer(anchors, rng)
        t = np.floor(rng.random(B) * self.length[j]).astype(np.int64)
        row = self.feat[self.offset[j] + t]
        ds_, da = self.ds, self.da
        return (seg_x, row[:, :ds_], row[:, ds_ : ds_ + da], row[:, ds_ + da], row[:, ds_ + da + 1 :])


def make_batch(models: ContextModels, trajs: list[Trajectory], pairs: np.ndarray,
               rng: np.random.Generator, by_task: dict[int, list[int]] | None = None,
               pool_k: int = 1):
    """Encoder inputs for the given (trajectory, offset) pairs plus one target
    transition per row.

    With ``pool_k > 1`` each row gets ``pool_k - 1`` extra segments from random
    trajectories of the same task, to be mean-pooled into one context. The
    target is drawn uniformly over the task's transitions (a uniform trajectory
    of that task when ``by_task`` is given, else the anchor trajectory, then a
    uniform step), so ``z`` has to describe the task rather than the
    neighbourhood of the segment.
    """
    return SegmentIndex(models, trajs, by_task).batch(pairs, rng, pool_k)


def _group_by_task(trajs: list[Trajectory]) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for i, tr in enumerate(trajs):
        out.setdefault(tr.task_id, []).append(i)
    return out


@dataclass
class ContextTrainResult:
    models: ContextModels
    losses: list[float] = field(default_factory=list)


def train_context(ds: OfflineDataset, cfg: ContextConfig, trajs: list[Trajectory] | None = None,
                  use_context: bool = True) -> ContextTrainResult:
    """Jointly fit encoder, reward and dynamics models on training-split data.

    One epoch visits every (trajectory, offset) segment once in shuffled order.
    ``use_context=False`` zeroes ``z`` so the heads see only (s, a); used as the
    context-free ablation.
    """
    trajs = ds.train_trajectories() if trajs is None else trajs
    if not trajs:
        raise ConfigError("no training trajectories")
    rng = np.random.default_rng(cfg.seed)
    models = init_models(ds.family, ds.norm, cfg.h, cfg.d_z, rng, cfg.hidden, cfg.head_hidden)
    if not use_context:
        models.encoder.weights[-1][:] = 0
    opts = [nc.adam_init(p, cfg.lr) for p in models.nets()]
    pairs = _index_segments(trajs, cfg.h)
    by_task = _group_by_task(trajs) if cfg.task_targets else None
    index = SegmentIndex(models, trajs, by_task)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order) - cfg.batch + 1, cfg.batch):
            batch = index.batch(pairs[order[start : start + cfg.batch]], rng, cfg.pool_k)
            loss, grads = joint_loss(models, *batch)
            if not np.isfinite(loss):
                raise nc.NumericError(f"context training diverged at epoch {epoch}")
            if not use_context:
                grads = (grads[0].zeros_like(),) + grads[1:]
            nets = []
            for j, (opt, p, g) in enumerate(zip(opts, models.nets(), grads)):
                opts[j], p = nc.opt_step(opt, p, g)
                nets.append(p)
            models = models.with_nets(*nets)
            losses.append(loss)
        log.debug("context epoch %d loss %.5f", epoch, np.mean(losses[-10:]))
    return ContextTrainResult(models, losses)


# -- checkpoints --------------------------------------------------------------


def save_models(models: ContextModels, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nc.save_params(models.encoder, d / "encoder.bin")
    nc.save_params(models.reward_model, d / "reward.bin")
    nc.save_params(models.dyn_model, d / "dynamics.bin")
    manifest = {"family": models.family, "h": models.h, "d_z": models.d_z, "norm": models.norm.to_json()}
    (d / "context.json").write_text(json.dumps(manifest, indent=1))


def load_models(directory) -> ContextModels:
    d = Path(directory)
    man = json.loads((d / "context.json").read_text())
    return ContextModels(
        nc.load_params(d / "encoder.bin"),
        nc.load_params(d / "reward.bin"),
        nc.load_params(d / "dynamics.bin"),
        man["family"], man["h"], man["d_z"], NormStats.from_json(man["norm"]),
    )
