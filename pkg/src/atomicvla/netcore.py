"""Dense numeric kernel: SwiGLU blocks, analytic gradients, AdamW, schedule, EMA, checkpoints.

Arrays are numpy; float32 for training and inference, float64 for gradient checks.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str, msg: str = "non-finite values"):
        super().__init__(f"{name}: {msg}")
        self.name = name


@dataclass
class Tensor2:
    """Row-major matrix used at serialization boundaries."""

    rows: int
    cols: int
    data: list

    def __post_init__(self):
        if len(self.data) != self.rows * self.cols:
            raise DimensionError(f"data length {len(self.data)} != {self.rows}x{self.cols}")
        if not all(math.isfinite(v) for v in self.data):
            raise NonFiniteError("Tensor2")

    @classmethod
    def from_array(cls, a) -> "Tensor2":
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return cls(a.shape[0], a.shape[1], a.reshape(-1).tolist())

    def array(self, dtype=np.float64) -> np.ndarray:
        return np.array(self.data, dtype=dtype).reshape(self.rows, self.cols)


def check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(name)


# -- gated feed-forward ----------------------------------------------------

@dataclass
class GatedFfnParams:
    w_gate: np.ndarray  # (d_in, d_hidden)
    w_up: np.ndarray  # (d_in, d_hidden)
    w_down: np.ndarray  # (d_hidden, d_out)
    b_gate: np.ndarray | None = None
    b_up: np.ndarray | None = None
    b_down: np.ndarray | None = None

    def __post_init__(self):
        di, dh = self.w_gate.shape
        if self.w_up.shape != (di, dh) or self.w_down.shape[0] != dh:
            raise DimensionError(
                f"inconsistent gated block shapes gate {self.w_gate.shape}, up {self.w_up.shape}, down {self.w_down.shape}"
            )

    @property
    def shapes(self) -> tuple:
        return (self.w_gate.shape, self.w_up.shape, self.w_down.shape)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"gate": self.w_gate, "up": self.w_up, "down": self.w_down}
        for k in ("b_gate", "b_up", "b_down"):
            v = getattr(self, k)
            if v is not None:
                out[k] = v
        return out

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
             out_scale: float = 1.0) -> "GatedFfnParams":
        g = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_hidden))
        u = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_hidden))
        d = rng.normal(0.0, out_scale / math.sqrt(d_hidden), (d_hidden, d_out))
        return cls(g.astype(dtype), u.astype(dtype), d.astype(dtype))


def sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form stays finite for large |v|
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def silu(v: np.ndarray) -> np.ndarray:
    return v * sigmoid(v)


def gated_ffn_forward(p: GatedFfnParams, x: np.ndarray):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != p.w_gate.shape[0]:
        raise DimensionError(f"input shape {x.shape} does not match gate weights {p.w_gate.shape}")
    check_finite("x", x)
    a = x @ p.w_gate
    if p.b_gate is not None:
        a = a + p.b_gate
    b = x @ p.w_up
    if p.b_up is not None:
        b = b + p.b_up
    s = sigmoid(a)
    h = a * s * b
    y = h @ p.w_down
    if p.b_down is not None:
        y = y + p.b_down
    cache = {"x": x, "a": a, "b": b, "s": s, "h": h, "shapes": p.shapes, "owner": id(p)}
    return y, cache


def gated_ffn_backward(p: GatedFfnParams, cache: Mapping, dy: np.ndarray):
    if cache.get("owner") != id(p) or cache.get("shapes") != p.shapes:
        raise ContractError("cache does not come from a forward pass of these parameters")
    h = cache["h"]
    if dy.shape != (h.shape[0], p.w_down.shape[1]):
        raise ContractError(f"dy shape {dy.shape} != output shape {(h.shape[0], p.w_down.shape[1])}")
    x, a, b, s = cache["x"], cache["a"], cache["b"], cache["s"]
    grads = {"down": h.T @ dy}
    dh = dy @ p.w_down.T
    silu_a = a * s
    db = dh * silu_a
    da = dh * b * (s * (1.0 + a * (1.0 - s)))
    grads["gate"] = x.T @ da
    grads["up"] = x.T @ db
    if p.b_gate is not None:
        grads["b_gate"] = da.sum(0)
    if p.b_up is not None:
        grads["b_up"] = db.sum(0)
    if p.b_down is not None:
        grads["b_down"] = dy.sum(0)
    dx = da @ p.w_gate.T + db @ p.w_up.T
    return dx, grads


# -- optimizer -------------------------------------------------------------

@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Mapping[str, np.ndarray], weight_decay: float = 0.0, clip_norm: float = 1.0) -> "OptState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()},
                   0, weight_decay, clip_norm)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grads(grads: Mapping[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    n = global_norm(grads)
    if clip_norm > 0 and n > clip_norm:
        scale = clip_norm / n
        return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, n
    return dict(grads), n


def adamw_step(s: OptState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
               trainable: Mapping[str, bool] | None = None):
    """Clip, then bias-corrected Adam with decoupled weight decay. Returns (params', state')."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    for k, g in grads.items():
        if k not in params:
            raise DimensionError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise DimensionError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(k, "non-finite gradient")
    if trainable is not None:
        grads = {k: g for k, g in grads.items() if trainable.get(k, False)}
    g_clip, _ = clip_grads(grads, s.clip_norm)
    t = s.step + 1
    c1 = 1.0 - s.beta1 ** t
    c2 = 1.0 - s.beta2 ** t
    new_params = dict(params)
    m, v = dict(s.m), dict(s.v)
    for k, g in g_clip.items():
        p = params[k]
        mk = s.beta1 * s.m[k] + (1.0 - s.beta1) * g
        vk = s.beta2 * s.v[k] + (1.0 - s.beta2) * g * g
        upd = (mk / c1) / (np.sqrt(vk / c2) + s.eps)
        newp = p - lr * upd
        if s.weight_decay:
            newp = newp - lr * s.weight_decay * p
        new_params[k] = newp.astype(p.dtype)
        m[k] = mk.astype(p.dtype)
        v[k] = vk.astype(p.dtype)
    return new_params, OptState(m, v, t, s.weight_decay, s.clip_norm, s.beta1, s.beta2, s.eps)


# -- schedule and averaging ------------------------------------------------

@dataclass
class ScheduleCfg:
    warmup_steps: int = 1000
    peak_lr: float = 1e-3
    final_lr: float = 1e-4
    total_steps: int = 5000

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps ({self.warmup_steps}) < total_steps ({self.total_steps})")
        if self.final_lr > self.peak_lr:
            raise ValueError("final_lr must not exceed peak_lr")


def lr_schedule(step: int, cfg: ScheduleCfg) -> float:
    """Linear warmup from 0, then cosine decay from peak to final; clamps past the end."""
    if step >= cfg.total_steps:
        return cfg.final_lr
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * frac))


def ema_update(ema: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    out = {}
    for k, p in params.items():
        e = ema[k]
        if e.shape != p.shape:
            raise DimensionError(f"{k}: ema shape {e.shape} != param shape {p.shape}")
        out[k] = (decay * e + (1.0 - decay) * p).astype(p.dtype)
    return out


# -- gradient checking -----------------------------------------------------

def grad_check(fn: Callable[[dict], tuple[float, dict]], params: Mapping[str, np.ndarray], probes: int = 20,
               eps: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error of analytic vs central-difference gradients on seeded random coordinates.

    ``fn(params) -> (loss, grads)``. Relative error uses max(|a|, |n|, floor) as the denominator.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = fn(params)
    rng = np.random.default_rng(seed)
    names = sorted(k for k in params if params[k].size)
    worst = 0.0
    for _ in range(probes):
        k = names[int(rng.integers(len(names)))]
        idx = int(rng.integers(params[k].size))
        p = params[k].reshape(-1)
        old = p[idx]
        p[idx] = old + eps
        lp, _ = fn(params)
        p[idx] = old - eps
        lm, _ = fn(params)
        p[idx] = old
        num = (lp - lm) / (2 * eps)
        ana = float(np.asarray(grads.get(k, np.zeros_like(params[k]))).reshape(-1)[idx])
        err = abs(num - ana) / max(abs(num), abs(ana), floor)
        worst = max(worst, err)
    return worst


# -- checkpoint IO ---------------------------------------------------------

def tensor_digest(arrs: Mapping[str, np.ndarray], names=None) -> str:
    h = hashlib.sha256()
    for k in names or sorted(arrs):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrs[k], dtype="<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(path: str, order: list[str], sections: Mapping[str, Mapping[str, np.ndarray]], meta: Mapping) -> None:
    """Write ``manifest.json`` plus ``weights.bin`` (little-endian float32, sections concatenated in order)."""
    os.makedirs(path, exist_ok=True)
    first = next(iter(sections.values()))
    tensors = [{"name": k, "shape": list(first[k].shape)} for k in order]
    manifest = dict(meta)
    manifest["tensors"] = tensors
    manifest["sections"] = list(sections)
    manifest["dtype"] = "float32-le"
    blob = bytearray()
    for sec in sections.values():
        for k in order:
            blob += np.ascontiguousarray(sec[k], dtype="<f4").tobytes()
    with open(os.path.join(path, "weights.bin"), "wb") as fh:
        fh.write(bytes(blob))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    raw = np.fromfile(os.path.join(path, "weights.bin"), dtype="<f4")
    off = 0
    sections = {}
    for sec in manifest["sections"]:
        d = {}
        for t in manifest["tensors"]:
            n = int(np.prod(t["shape"])) if t["shape"] else 1
            d[t["name"]] = raw[off:off + n].reshape(t["shape"]).astype(np.float32)
            off += n
        sections[sec] = d
    if off != raw.size:
        raise ContractError(f"weights blob has {raw.size} floats, manifest accounts for {off}")
    return manifest, sections
