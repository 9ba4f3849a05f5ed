"""Dense networks with hand-written reverse-mode gradients, Adam, and a
finite-difference gradient oracle.

All arrays are numpy. ``forward``/``backward`` accept a single input vector
or a batch of row vectors; parameter gradients are summed over the batch.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "mish", "identity")
_MAGIC = b"MDPS"
F64_FLOOR = 1e-8
F32_FLOOR = 1e-3


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class ParamStore:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i}: in-dim {w.shape[1]} != previous out-dim {self.weights[i - 1].shape[0]}"
                )

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    @property
    def precision(self) -> str:
        return "f64" if self.dtype == np.float64 else "f32"

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def tensor_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "ParamStore":
        return ParamStore(list(tensors[0::2]), list(tensors[1::2]), list(self.activations))

    def copy(self) -> "ParamStore":
        return self.with_tensors([t.copy() for t in self.tensors()])

    def astype(self, dtype) -> "ParamStore":
        return self.with_tensors([t.astype(dtype) for t in self.tensors()])

    def zeros_like(self) -> "ParamStore":
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())


def init_params(
    sizes: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
    dtype=np.float32,
) -> ParamStore:
    """Glorot-uniform weights, zero biases. ``sizes`` lists layer widths input first."""
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return ParamStore(weights, biases, list(activations))


def mlp(in_dim, hidden, out_dim, rng, act="mish", dtype=np.float32) -> ParamStore:
    sizes = [in_dim, *hidden, out_dim]
    return init_params(sizes, [act] * len(hidden) + ["identity"], rng, dtype)


def _mish_parts(x):
    """tanh(softplus(x)) and sigmoid(x) from one exponential.

    With n = e^x, tanh(log(1 + n)) = n (n + 2) / (n (n + 2) + 2); x is capped
    at 20 where both factors equal 1 to working precision.
    """
    n = np.exp(np.minimum(x, 20.0))
    q = n * (n + 2.0)
    return q / (q + 2.0), n / (1.0 + n)


def _activate(act: str, pre: np.ndarray) -> np.ndarray:
    if act == "identity":
        return pre
    if act == "tanh":
        return np.tanh(pre)
    return pre * _mish_parts(pre)[0]


def _activation_grad(act: str, pre: np.ndarray) -> np.ndarray:
    if act == "identity":
        return np.ones_like(pre)
    if act == "tanh":
        return 1.0 - np.tanh(pre) ** 2
    t, sig = _mish_parts(pre)
    return t + pre * (1.0 - t * t) * sig


def _as_batch(params: ParamStore, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"layer 0: expected input dim {params.in_dim}, got shape {x.shape}")
    return x, single


def forward_cached(params: ParamStore, x) -> tuple[np.ndarray, list]:
    xb, single = _as_batch(params, x)
    cache = []
    h = xb
    for w, b, act in zip(params.weights, params.biases, params.activations):
        pre = h @ w.T + b
        cache.append((h, pre))
        h = _activate(act, pre)
    return (h[0] if single else h), cache


def forward(params: ParamStore, x) -> np.ndarray:
    return forward_cached(params, x)[0]


def backward(params: ParamStore, x, output_grad, cache=None) -> tuple[ParamStore, np.ndarray]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. parameters and input."""
    xb, single = _as_batch(params, x)
    g = np.asarray(output_grad, dtype=params.dtype)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], params.out_dim):
        raise ShapeError(
            f"layer {len(params.weights) - 1}: output grad shape {g.shape} does not match "
            f"({xb.shape[0]}, {params.out_dim})"
        )
    if cache is None:
        _, cache = forward_cached(params, xb)
    gw: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    for i in reversed(range(len(params.weights))):
        h_in, pre = cache[i]
        act = params.activations[i]
        if act != "identity":
            g = g * _activation_grad(act, pre)
        gw[i] = g.T @ h_in
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    grads = ParamStore(gw, gb, list(params.activations))
    return grads, (g[0] if single else g)


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|analytic - numeric| / |numeric|, or the absolute difference when both
    magnitudes are below ``floor``."""
    a = np.abs(analytic)
    n = np.abs(numeric)
    diff = np.abs(analytic - numeric)
    tiny = np.maximum(a, n) < floor
    return np.where(tiny, diff, diff / np.maximum(n, floor))


def numeric_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float, stencil: int = 3
) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; x is perturbed in place and restored.

    ``stencil=3`` is the plain (f(x+h) - f(x-h)) / 2h rule; ``stencil=5`` adds the
    +-2h points for a fourth-order estimate.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    offsets = (1.0, -1.0) if stencil == 3 else (1.0, -1.0, 2.0, -2.0)
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for o in offsets:
            flat[i] = orig + o * step
            vals.append(f(x))
        flat[i] = orig
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"non-finite loss while perturbing entry {i}")
        if stencil == 3:
            gflat[i] = (vals[0] - vals[1]) / (2.0 * step)
        else:
            gflat[i] = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * step)
    return grad


def grad_check(
    params: ParamStore,
    loss_and_grad: Callable[[ParamStore], tuple[float, ParamStore]],
    fd_step: float = 1e-5,
    oracle_dtype=np.float64,
    stencil: int = 3,
    floor: float | None = None,
) -> float:
    """Worst per-entry relative error between analytic and central-difference gradients.

    The analytic gradient is taken at ``params`` in their own precision. The
    finite differences are evaluated on a copy cast to ``oracle_dtype``, so an
    f32 network is checked against an f64 oracle of the same code path.
    Entries where both magnitudes are below ``floor`` are compared absolutely;
    the default floor is 1e-8 for f64 and 1e-3 for f32, whose gradients carry
    ~1e-7 absolute round-off.
    """
    if floor is None:
        floor = F64_FLOOR if params.dtype == np.float64 else F32_FLOOR
    loss, analytic = loss_and_grad(params)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite at the given parameters")
    probe = params.astype(oracle_dtype)
    tensors = probe.tensors()
    worst = 0.0
    for idx, (t, g) in enumerate(zip(tensors, analytic.tensors())):

        def f(_, idx=idx):
            return float(loss_and_grad(probe.with_tensors(tensors))[0])

        num = numeric_grad(f, t, fd_step, stencil)
        err = relative_error(np.asarray(g, dtype=np.float64), num, floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptState:
    m: ParamStore
    v: ParamStore
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def adam_init(params: ParamStore, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> OptState:
    return OptState(params.zeros_like(), params.zeros_like(), lr, beta1, beta2, eps, 0)


def opt_step(opt: OptState, params: ParamStore, grads: ParamStore) -> tuple[OptState, ParamStore]:
    names = params.tensor_names()
    for name, g in zip(names, grads.tensors()):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    t = opt.step + 1
    dt = params.dtype
    b1, b2 = dt.type(opt.beta1), dt.type(opt.beta2)
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    step_size = dt.type(opt.lr / bc1)
    inv_bc2 = dt.type(1.0 / bc2)
    eps = dt.type(opt.eps)
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params.tensors(), grads.tensors(), opt.m.tensors(), opt.v.tensors()):
        g = g.astype(dt, copy=False)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        new_p.append(p - step_size * m / (np.sqrt(v * inv_bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    state = OptState(
        params.with_tensors(new_m), params.with_tensors(new_v),
        opt.lr, opt.beta1, opt.beta2, opt.eps, t,
    )
    return state, params.with_tensors(new_p)


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 header length, JSON header, raw little-endian values


def _header(params: ParamStore) -> dict:
    return {
        "layers": [list(w.shape) for w in params.weights],
        "activations": list(params.activations),
        "precision": params.precision,
    }


def dumps_params(params: ParamStore) -> bytes:
    header = json.dumps(_header(params), sort_keys=True).encode("utf-8")
    code = "<f8" if params.precision == "f64" else "<f4"
    body = b"".join(np.ascontiguousarray(t, dtype=code).tobytes() for t in params.tensors())
    return _MAGIC + struct.pack("<I", len(header)) + header + body


def loads_params(blob: bytes) -> ParamStore:
    if blob[:4] != _MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    code = "<f8" if header["precision"] == "f64" else "<f4"
    dtype = np.float64 if header["precision"] == "f64" else np.float32
    values = np.frombuffer(blob, dtype=code, offset=8 + hlen)
    tensors, pos = [], 0
    for out_dim, in_dim in header["layers"]:
        n = out_dim * in_dim
        tensors.append(values[pos : pos + n].reshape(out_dim, in_dim).astype(dtype))
        pos += n
        tensors.append(values[pos : pos + out_dim].astype(dtype))
        pos += out_dim
    if pos != values.size:
        raise ValueError(f"checkpoint has {values.size} values, header implies {pos}")
    return ParamStore(tensors[0::2], tensors[1::2], header["activations"])


def save_params(params: ParamStore, path) -> None:
    Path(path).write_bytes(dumps_params(params))


def load_params(path) -> ParamStore:
    return loads_params(Path(path).read_bytes())


def save_opt(opt: OptState, path) -> None:
    """Moments go to ``<path>.m`` / ``<path>.v``; scalars to ``<path>.json``."""
    path = Path(path)
    save_params(opt.m, path.with_suffix(".m"))
    save_params(opt.v, path.with_suffix(".v"))
    meta = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}
    path.with_suffix(".json").write_text(json.dumps(meta))


def load_opt(path) -> OptState:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return OptState(load_params(path.with_suffix(".m")), load_params(path.with_suffix(".v")), **meta)
