"""Context-conditioned trajectory diffusion.

Plans are arrays of shape (H, d_s + d_a) holding normalized (state, action)
rows. Noise levels are 1-based in the sampler (``k = K .. 1``) and 0-based in
the schedule arrays: level ``k`` uses ``alpha[k - 1]``, and ``q_sample(x0, i)``
produces the level ``i + 1`` latent. The noise network is a dense MLP over
``[flattened plan, sinusoidal(i), z, drop bit]``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .datastore import OfflineDataset, sample_plan_batch
from .envs import ConfigError
from .taskcontext import ContextModels, heads_input

log = logging.getLogger(__name__)

TEMB_DIM = 16


# -- schedule -------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    K: int
    kind: str
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray


def make_schedule(K: int, kind: str = "cosine", max_beta: float = 0.999) -> NoiseSchedule:
    if K < 1:
        raise ConfigError("K must be >= 1")
    if kind == "cosine":
        s = 0.008
        t = np.arange(K + 1, dtype=np.float64) / K
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
    elif kind == "linear":
        betas = np.linspace(1e-4, 2e-2, K) * (100.0 / K)
        betas = np.clip(betas, 0.0, max_beta)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - betas
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * betas
    return NoiseSchedule(K, kind, alpha, alpha_bar, posterior_var)


def q_sample(x0, i, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward noising to level ``i + 1``; ``i`` may be an array over the batch."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise nc.ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    ab = sched.alpha_bar[np.asarray(i)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


# -- noise model ----------------------------------------------------------------


@dataclass
class NoiseModel:
    net: nc.ParamStore
    H: int
    width: int
    d_z: int
    state_dim: int
    K: int
    schedule_kind: str = "cosine"

    @property
    def plan_size(self) -> int:
        return self.H * self.width

    def manifest(self) -> dict:
        return {
            "H": self.H, "width": self.width, "d_z": self.d_z, "state_dim": self.state_dim,
            "K": self.K, "schedule_kind": self.schedule_kind, "temb_dim": TEMB_DIM,
        }


def init_noise_model(H, width, d_z, state_dim, K, rng, hidden=(256, 256, 256),
                     schedule_kind="cosine", dtype=np.float32) -> NoiseModel:
    in_dim = H * width + TEMB_DIM + d_z + 1
    net = nc.mlp(in_dim, hidden, H * width, rng, "mish", dtype)
    return NoiseModel(net, H, width, d_z, state_dim, K, schedule_kind)


def timestep_embedding(i) -> np.ndarray:
    i = np.asarray(i, dtype=np.float64).reshape(-1, 1)
    half = TEMB_DIM // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(i * freqs), np.cos(i * freqs)], axis=1)


def model_input(model: NoiseModel, x, i, z, drop) -> np.ndarray:
    """Dropped rows get a zero context and drop bit 1."""
    x = np.asarray(x)
    B = x.shape[0]
    if x.shape[1:] != (model.H, model.width):
        raise nc.ShapeError(f"plan shape {x.shape[1:]} != ({model.H}, {model.width})")
    drop = np.broadcast_to(np.asarray(drop, dtype=bool), (B,))
    z = np.broadcast_to(np.asarray(z, dtype=np.float64), (B, model.d_z))
    z = np.where(drop[:, None], 0.0, z)
    i = np.broadcast_to(np.asarray(i), (B,))
    parts = [x.reshape(B, -1), timestep_embedding(i), z, drop[:, None].astype(np.float64)]
    return np.concatenate(parts, axis=1).astype(model.net.dtype)


def predict_noise(model: NoiseModel, x, i, z, drop=False) -> np.ndarray:
    x = np.asarray(x)
    out = nc.forward(model.net, model_input(model, x, i, z, drop))
    return out.reshape(x.shape)


def diffusion_loss(model: NoiseModel, sched: NoiseSchedule, x0, z, drop_prob: float,
                   rng: np.random.Generator | None = None, i=None, eps=None, drop=None,
                   inpaint_state: bool = False):
    """Noise-prediction loss, mean over items of the squared error summed over entries.

    ``i``, ``eps`` and ``drop`` are drawn from ``rng`` unless given. With
    ``inpaint_state`` the noisy input carries the clean first-row state, as it
    will at sampling time, and those entries drop out of the loss.
    Returns ``(loss, grads)``.
    """
    if not 0.0 <= drop_prob <= 1.0:
        raise ConfigError("drop probability must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=model.net.dtype)
    B = x0.shape[0]
    if i is None:
        i = rng.integers(0, sched.K, size=B)
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    if drop is None:
        drop = rng.random(B) < drop_prob
    xk = q_sample(x0, i, np.asarray(eps, x0.dtype), sched)
    if inpaint_state:
        xk = inpaint(xk, x0[:, 0, : model.state_dim], model.state_dim)
    inp = model_input(model, xk, i, z, drop)
    out, cache = nc.forward_cached(model.net, inp)
    err = out - np.asarray(eps, x0.dtype).reshape(B, -1)
    if inpaint_state:
        err = err.reshape(x0.shape)
        err[:, 0, : model.state_dim] = 0
        err = err.reshape(B, -1)
    loss = float(np.sum(err.astype(np.float64) ** 2) / B)
    grads, _ = nc.backward(model.net, inp, (2.0 / B) * err, cache)
    return loss, grads


# -- guidance -------------------------------------------------------------------


@dataclass
class GuideConfig:
    omega: float = 1.6
    lam: float = 0.5
    guide_step: float = 1.0
    temperature: float = 0.5
    K: int = 100
    H: int = 4
    clip_denoised: bool = True

    def validate(self) -> None:
        vals = asdict(self)
        if not all(np.isfinite(float(v)) for v in vals.values()):
            raise ConfigError("guide config values must be finite")
        if self.omega < 0 or self.lam < 0 or self.guide_step < 0:
            raise ConfigError("omega, lam and guide_step must be >= 0")
        if not 0.0 <= self.temperature <= 1.0:
            raise ConfigError("temperature must lie in [0, 1]")


def cf_noise(model: NoiseModel, x, z, i, omega: float) -> np.ndarray:
    """omega * eps(x, z) + (1 - omega) * eps(x, dropped); the two degenerate
    weights evaluate only the branch they keep."""
    if omega == 1.0:
        return predict_noise(model, x, i, z, False)
    if omega == 0.0:
        return predict_noise(model, x, i, z, True)
    cond = predict_noise(model, x, i, z, False)
    uncond = predict_noise(model, x, i, z, True)
    return omega * cond + (1.0 - omega) * uncond


def guide_objective(ctx: ContextModels, x, z, lam: float) -> np.ndarray:
    """Per-plan ``J - lam * zeta``: predicted return minus dynamics discrepancy."""
    x = np.asarray(x, dtype=ctx.encoder.dtype)
    B, H, _ = x.shape
    ds = ctx.state_dim
    zr = np.repeat(np.asarray(z, dtype=x.dtype), H, axis=0)
    inp = heads_input(ctx, x[:, :, :ds].reshape(B * H, ds), x[:, :, ds:].reshape(B * H, -1), zr)
    J = nc.forward(ctx.reward_model, inp)[:, 0].reshape(B, H).sum(axis=1)
    if H < 2 or lam == 0:
        return J.astype(np.float64)
    pred = x[:, :-1, :ds] + nc.forward(ctx.dyn_model, inp).reshape(B, H, ds)[:, :-1]
    zeta = np.sum((x[:, 1:, :ds] - pred).astype(np.float64) ** 2, axis=(1, 2))
    return J - lam * zeta


def dual_guide_grad(ctx: ContextModels, x, z, lam: float) -> np.ndarray:
    """Gradient of :func:`guide_objective` w.r.t. the plan; reward and dynamics
    networks and ``z`` are held fixed."""
    dt = ctx.encoder.dtype
    x = np.asarray(x, dtype=dt)
    B, H, W = x.shape
    ds = ctx.state_dim
    zr = np.repeat(np.asarray(z, dtype=dt), H, axis=0)
    inp = heads_input(ctx, x[:, :, :ds].reshape(B * H, ds), x[:, :, ds:].reshape(B * H, -1), zr)
    _, gin = nc.backward(ctx.reward_model, inp, np.ones((B * H, 1), dtype=dt))
    g = gin[:, : W].reshape(B, H, W).copy()
    if H < 2 or lam == 0:
        return g
    delta, cache = nc.forward_cached(ctx.dyn_model, inp)
    delta = delta.reshape(B, H, ds)
    resid = x[:, 1:, :ds] - x[:, :-1, :ds] - delta[:, :-1]  # (B, H-1, ds)
    # d zeta / d s_{t+1} = 2 r_t ; d zeta / d (s_t, a_t) = -2 r_t (I + d net / d (s_t, a_t))
    out_grad = np.zeros((B, H, ds), dtype=dt)
    out_grad[:, :-1] = -2.0 * resid
    _, gin_d = nc.backward(ctx.dyn_model, inp, out_grad.reshape(B * H, ds), cache)
    gz = gin_d[:, :W].reshape(B, H, W)
    gz[:, :-1, :ds] += -2.0 * resid
    gz[:, 1:, :ds] += 2.0 * resid
    return g - dt.type(lam) * gz


# -- sampling -------------------------------------------------------------------


def _normal(rng, shape) -> np.ndarray:
    """Standard normals of ``shape``; a list of generators draws one item each."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ValueError(f"{len(rngs)} generators for a batch of {shape[0]}")
    return np.stack([r.standard_normal(shape[1:]) for r in rngs])


def inpaint(x, observed_state, state_dim: int) -> np.ndarray:
    if observed_state is None:
        return x
    x = x.copy()
    x[:, 0, :state_dim] = observed_state
    return x


def guided_denoise_step(model: NoiseModel, sched: NoiseSchedule, ctx: ContextModels | None,
                        x, z, k: int, cfg: GuideConfig, observed_state, rng) -> np.ndarray:
    """One reverse step from level ``k`` (1..K) to ``k - 1``."""
    if not 1 <= k <= sched.K:
        raise ValueError(f"denoise level {k} outside [1, {sched.K}]")
    i = k - 1
    dt = model.net.dtype
    x = np.asarray(x, dtype=dt)
    eps_hat = cf_noise(model, x, z, i, cfg.omega)
    if cfg.guide_step > 0 and ctx is not None:
        g = dual_guide_grad(ctx, x, z, cfg.lam)
        eps_hat = eps_hat - np.sqrt(1.0 - sched.alpha_bar[i]) * cfg.guide_step * g
    a, ab = sched.alpha[i], sched.alpha_bar[i]
    if cfg.clip_denoised:
        # same posterior mean, written through a clipped estimate of x_0
        ab_prev = sched.alpha_bar[i - 1] if i > 0 else 1.0
        x0 = np.clip((x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -1.0, 1.0)
        mean = (np.sqrt(ab_prev) * (1.0 - a) * x0 + np.sqrt(a) * (1.0 - ab_prev) * x) / (1.0 - ab)
    else:
        mean = (x - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    if k > 1:
        noise = _normal(rng, x.shape)
        mean = mean + cfg.temperature * np.sqrt(sched.posterior_var[i]) * noise
    return inpaint(mean.astype(dt), observed_state, model.state_dim)


def sample_plan(model: NoiseModel, sched: NoiseSchedule, ctx: ContextModels | None, z,
                cfg: GuideConfig, observed_state, rng, batch: int | None = None) -> np.ndarray:
    """Denoise a batch of plans from noise. ``z`` is (B, d_z) or (d_z,);
    ``observed_state`` is (B, d_s), (d_s,) or None for no inpainting."""
    z = np.asarray(z, dtype=model.net.dtype)
    if z.ndim == 1:
        z = z[None]
    B = z.shape[0] if batch is None else batch
    z = np.broadcast_to(z, (B, model.d_z))
    if observed_state is not None:
        observed_state = np.broadcast_to(np.asarray(observed_state, dtype=model.net.dtype),
                                         (B, model.state_dim))
    x = (cfg.temperature * _normal(rng, (B, model.H, model.width))).astype(model.net.dtype)
    x = inpaint(x, observed_state, model.state_dim)
    for k in range(sched.K, 0, -1):
        x = guided_denoise_step(model, sched, ctx, x, z, k, cfg, observed_state, rng)
    return x


# -- training -------------------------------------------------------------------


@dataclass
class DiffusionConfig:
    H: int = 4
    K: int = 100
    schedule: str = "cosine"
    steps: int = 20000
    batch: int = 128
    lr: float = 1e-3
    drop_prob: float = 0.3
    hidden: tuple[int, ...] = (256, 256, 256)
    inpaint_state: bool = True
    seed: int = 0


@dataclass
class DiffusionTrainState:
    model: NoiseModel
    opt: nc.OptState
    rng: np.random.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)


def init_train_state(cfg: DiffusionConfig, width: int, d_z: int, state_dim: int) -> DiffusionTrainState:
    rng = np.random.default_rng(cfg.seed)
    model = init_noise_model(cfg.H, width, d_z, state_dim, cfg.K, rng, cfg.hidden, cfg.schedule)
    return DiffusionTrainState(model, nc.adam_init(model.net, cfg.lr), rng)


def train_steps(state: DiffusionTrainState, cfg: DiffusionConfig, sample_batch, until: int) -> DiffusionTrainState:
    """Advance training to ``until`` total steps.

    ``sample_batch(rng, batch) -> (x0, z)`` supplies plans and their contexts.
    """
    sched = make_schedule(cfg.K, cfg.schedule)
    model, opt, rng = state.model, state.opt, state.rng
    while state.step < until:
        x0, z = sample_batch(rng, cfg.batch)
        loss, grads = diffusion_loss(model, sched, x0, z, cfg.drop_prob, rng,
                                     inpaint_state=cfg.inpaint_state)
        if not np.isfinite(loss):
            raise nc.NumericError(f"diffusion training diverged at step {state.step}")
        opt, net = nc.opt_step(opt, model.net, grads)
        model = NoiseModel(net, model.H, model.width, model.d_z, model.state_dim, model.K,
                           model.schedule_kind)
        state.losses.append(loss)
        state.step += 1
        state.model, state.opt = model, opt
        if state.step % 1000 == 0:
            log.info("diffusion step %d loss %.4f", state.step, float(np.mean(state.losses[-1000:])))
    return state


def plan_sampler(ds: OfflineDataset, bank: dict[int, np.ndarray] | None, H: int, d_z: int,
                 policy: str = "expert"):
    """Batch source for :func:`train_steps`: windows of ``policy`` training
    trajectories, each paired with a random context of its task from ``bank``
    (zeros when ``bank`` is None, e.g. for the unconditional model)."""
    trajs = ds.train_trajectories(policy)
    if not trajs:
        raise ConfigError(f"dataset has no {policy!r} training trajectories")

    def sample(rng, batch):
        x0, tids, _ = sample_plan_batch(ds, H, batch, rng, trajs)
        if bank is None:
            return x0, np.zeros((batch, d_z), dtype=np.float32)
        z = np.stack([bank[t][rng.integers(0, len(bank[t]))] for t in tids])
        return x0, z

    return sample


def train_diffusion(ds: OfflineDataset, bank, cfg: DiffusionConfig, d_z: int,
                    state: DiffusionTrainState | None = None, until: int | None = None,
                    policy: str = "expert") -> DiffusionTrainState:
    """Train (or continue training) the noise model to ``until`` steps (default ``cfg.steps``)."""
    info = ds.info
    if state is None:
        state = init_train_state(cfg, info.state_dim + info.action_dim, d_z, info.state_dim)
    sample = plan_sampler(ds, bank, cfg.H, d_z, policy)
    return train_steps(state, cfg, sample, cfg.steps if until is None else until)


# -- checkpoints --------------------------------------------------------------


def save_model(model: NoiseModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nc.save_params(model.net, d / "noise.bin")
    (d / "diffusion.json").write_text(json.dumps(model.manifest(), indent=1))


def load_model(directory) -> NoiseModel:
    d = Path(directory)
    man = json.loads((d / "diffusion.json").read_text())
    return NoiseModel(nc.load_params(d / "noise.bin"), man["H"], man["width"], man["d_z"],
                      man["state_dim"], man["K"], man["schedule_kind"])


def save_train_state(state: DiffusionTrainState, directory) -> None:
    d = Path(directory)
    save_model(state.model, d)
    nc.save_opt(state.opt, d / "noise_opt")
    meta = {"step": state.step, "rng": state.rng.bit_generator.state, "losses": state.losses}
    (d / "train_state.json").write_text(json.dumps(meta))


def load_train_state(directory) -> DiffusionTrainState:
    d = Path(directory)
    meta = json.loads((d / "train_state.json").read_text())
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return DiffusionTrainState(load_model(d), nc.load_opt(d / "noise_opt"), rng, meta["step"],
                               meta["losses"])
