"""Skill-guided mixture of experts: registry, skill embedding, router, blended decoder, expansion.

The action decoder is a stack of residual blocks. Each block blends a shared
SwiGLU expert with one selected skill expert,

    h <- h + (1 - w) F_share(h) + w F_k(h),

where (k, w) comes from the router. Variants differ only in what the router
sees: the skill embedding (sg_moe), the token's hidden state (token_moe), the
quantized flow time (timestep_moe), or nothing at all (no_moe, w = 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .netcore import ContractError, DimensionError, GatedFfnParams, gated_ffn_backward, gated_ffn_forward

K_MAX = 16
SIGMA_MAX = 100.0
OMEGA_MAX = 1e-2
TIME_OMEGA_MAX = 1e-3
VARIANTS = ("sg_moe", "no_moe", "token_moe", "timestep_moe")
BALANCE_COEF = 0.01


class RegistryError(ValueError):
    pass


class ConflictError(RegistryError):
    pass


class CapacityError(RegistryError):
    pass


class DomainError(ValueError):
    pass


class RoutingError(KeyError):
    pass


# -- registry --------------------------------------------------------------

@dataclass(frozen=True)
class SkillEntry:
    name: str
    sigma: float
    expert: int


@dataclass
class SkillRegistry:
    entries: list[SkillEntry] = field(default_factory=list)
    k_max: int = K_MAX

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ConflictError(f"duplicate skill names in {names}")
        if [e.expert for e in self.entries] != list(range(len(self.entries))):
            raise RegistryError("expert indices must be 0..K-1 in order")
        sig = [e.sigma for e in self.entries]
        if any(b <= a for a, b in zip(sig, sig[1:])):
            raise RegistryError("sigmas must increase strictly with expert index")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def index(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.expert
        raise RoutingError(f"skill {name!r} is not registered")

    def sigma(self, name: str) -> float:
        return self.entries[self.index(name)].sigma

    def to_json(self) -> list[dict]:
        return [{"name": e.name, "sigma": e.sigma, "expert": e.expert} for e in self.entries]

    @classmethod
    def from_json(cls, d: Sequence[Mapping], k_max: int = K_MAX) -> "SkillRegistry":
        return cls([SkillEntry(str(e["name"]), float(e["sigma"]), int(e["expert"])) for e in d], k_max)


def sigma_grid(k: int, k_max: int = K_MAX) -> float:
    return SIGMA_MAX ** ((k + 1) / (k_max + 1))


def assign_sigma(reg: SkillRegistry, name: str) -> float:
    if name in reg.names:
        raise ConflictError(f"skill {name!r} already registered")
    k = len(reg)
    if k >= reg.k_max:
        raise CapacityError(f"registry full ({reg.k_max} skills)")
    return sigma_grid(k, reg.k_max)


def register(reg: SkillRegistry, name: str) -> SkillRegistry:
    s = assign_sigma(reg, name)
    return SkillRegistry(reg.entries + [SkillEntry(name, s, len(reg))], reg.k_max)


def make_registry(names: Sequence[str], k_max: int = K_MAX) -> SkillRegistry:
    reg = SkillRegistry([], k_max)
    for n in names:
        reg = register(reg, n)
    return reg


# -- embeddings ------------------------------------------------------------

def _sinusoid(u: float, d: int, omega_max: float) -> np.ndarray:
    if d % 2:
        raise DimensionError(f"embedding width must be even, got {d}")
    j = np.arange(d // 2)
    ang = u / omega_max ** (2.0 * j / d)
    out = np.empty(d)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


def embed_sigma(sigma: float, d_emb: int = 16) -> np.ndarray:
    """Z_sigma: sinusoidal map of log(sigma) / log(100)."""
    if not (1.0 <= sigma <= SIGMA_MAX) or not math.isfinite(sigma):
        raise DomainError(f"sigma must lie in [1, 100], got {sigma}")
    u = math.log(sigma) / math.log(SIGMA_MAX)
    return _sinusoid(u, d_emb, OMEGA_MAX)


def time_embedding(t: float | np.ndarray, d: int = 16) -> np.ndarray:
    """Flow-time features for the velocity field; a separate map from the skill embedding."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    j = np.arange(d // 2)
    ang = t[:, None] / TIME_OMEGA_MAX ** (2.0 * j / d) * 0.01
    out = np.empty((len(t), d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


# -- routing ---------------------------------------------------------------

@dataclass(frozen=True)
class RouteDecision:
    k: int
    w: float
    probs: tuple[float, ...]


@dataclass
class RouterParams:
    w_route: np.ndarray  # (d_in, K)
    b_route: np.ndarray  # (K,)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def route_logits(rp: RouterParams, z: np.ndarray) -> np.ndarray:
    if z.shape[-1] != rp.w_route.shape[0]:
        raise DimensionError(f"embedding width {z.shape[-1]} != router input {rp.w_route.shape[0]}")
    return z @ rp.w_route + rp.b_route


def route(rp: RouterParams, z: np.ndarray) -> RouteDecision:
    p = softmax(route_logits(rp, np.asarray(z, dtype=np.float64)).astype(np.float64))
    k = int(np.argmax(p))  # first maximum: lowest index wins ties
    return RouteDecision(k, float(p[k]), tuple(float(v) for v in p))


# -- model config and bundle -----------------------------------------------

@dataclass
class ModelCfg:
    variant: str = "sg_moe"
    d_in: int = 0  # token input width, fixed by the policy's feature layout
    d_model: int = 64
    d_hidden: int = 128
    n_blocks: int = 2
    horizon: int = 8
    d_emb: int = 16
    d_temb: int = 16
    flow_steps: int = 10
    k_max: int = K_MAX
    d_mode: int = 0  # per-skill mode-head width (features + bias)
    d_plan: int = 0  # planner feature width (features + bias)
    n_targets: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def to_json(self) -> dict:
        return dict(self.__dict__)


def expert_tensor_names(cfg: ModelCfg, k: int) -> list[str]:
    names = []
    for b in range(cfg.n_blocks):
        names += [f"blocks.{b}.expert.{k}.{t}" for t in ("gate", "up", "down")]
        if cfg.variant == "token_moe":
            names += [f"blocks.{b}.router.col.{k}", f"blocks.{b}.router.bias.{k}"]
    if cfg.d_mode:
        names.append(f"mode.{k}")
    if cfg.d_plan:
        names.append(f"planner.skill.{k}")
    return names


def router_tensor_names(cfg: ModelCfg, k: int) -> list[str]:
    if cfg.variant in ("sg_moe", "timestep_moe"):
        return [f"router.col.{k}", f"router.bias.{k}"]
    return []


def base_tensor_names(cfg: ModelCfg) -> list[str]:
    names = ["in.w", "in.b"]
    for b in range(cfg.n_blocks):
        names += [f"blocks.{b}.share.{t}" for t in ("gate", "up", "down")]
    names += ["out.w", "out.b"]
    if cfg.d_plan:
        names.append("planner.target")
    return names


def _init_expert(cfg: ModelCfg, k: int, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
    out = {}
    for b in range(cfg.n_blocks):
        p = GatedFfnParams.init(cfg.d_model, cfg.d_hidden, cfg.d_model, rng, dtype, out_scale=0.5)
        out[f"blocks.{b}.expert.{k}.gate"] = p.w_gate
        out[f"blocks.{b}.expert.{k}.up"] = p.w_up
        out[f"blocks.{b}.expert.{k}.down"] = p.w_down
        if cfg.variant == "token_moe":
            out[f"blocks.{b}.router.col.{k}"] = (rng.normal(0.0, 0.01, cfg.d_model)).astype(dtype)
            out[f"blocks.{b}.router.bias.{k}"] = np.zeros(1, dtype=dtype)
    if cfg.d_mode:
        out[f"mode.{k}"] = np.zeros(cfg.d_mode, dtype=dtype)
    if cfg.d_plan:
        out[f"planner.skill.{k}"] = np.zeros(cfg.d_plan, dtype=dtype)
    return out


@dataclass
class SkillMoeBundle:
    cfg: ModelCfg
    registry: SkillRegistry
    params: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)
    n_base_experts: int = 0  # experts present before the latest expansion

    @property
    def K(self) -> int:
        return len(self.registry)

    @property
    def n_experts(self) -> int:
        return 0 if self.cfg.variant == "no_moe" else self.K

    def order(self) -> list[str]:
        names = base_tensor_names(self.cfg)
        for k in range(self.n_experts):
            names += expert_tensor_names(self.cfg, k) + router_tensor_names(self.cfg, k)
        if self.cfg.variant == "no_moe":
            # heads still scale with the registry
            for k in range(self.K):
                names += [n for n in expert_tensor_names(self.cfg, k) if n.startswith(("mode.", "planner."))]
        return names

    def param_count(self) -> int:
        return int(sum(self.params[n].size for n in self.order()))

    def router_params(self, block: int | None = None) -> RouterParams:
        if block is None:
            cols = [self.params[f"router.col.{k}"] for k in range(self.K)]
            bias = [self.params[f"router.bias.{k}"][0] for k in range(self.K)]
        else:
            cols = [self.params[f"blocks.{block}.router.col.{k}"] for k in range(self.K)]
            bias = [self.params[f"blocks.{block}.router.bias.{k}"][0] for k in range(self.K)]
        return RouterParams(np.stack(cols, axis=1), np.array(bias))

    def skill_embedding(self, name: str) -> np.ndarray:
        return embed_sigma(self.registry.sigma(name), self.cfg.d_emb)

    def route_skill(self, name: str) -> RouteDecision:
        """Routing decision for a latched skill (sg_moe)."""
        z = self.skill_embedding(name)
        rp = self.router_params()
        return route(RouterParams(rp.w_route.astype(np.float64), rp.b_route.astype(np.float64)), z)

    def astype(self, dtype) -> "SkillMoeBundle":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()}, frozen=set(self.frozen))

    def copy(self) -> "SkillMoeBundle":
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, frozen=set(self.frozen))


def build_bundle(cfg: ModelCfg, skills: Sequence[str], seed: int, dtype=np.float32) -> SkillMoeBundle:
    if cfg.d_in <= 0:
        raise ValueError("ModelCfg.d_in must be set from the feature layout")
    rng = np.random.default_rng([int(seed), 271828])
    reg = make_registry(skills, cfg.k_max)
    P: dict[str, np.ndarray] = {}
    P["in.w"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_in), (cfg.d_in, cfg.d_model)).astype(dtype)
    P["in.b"] = np.zeros(cfg.d_model, dtype=dtype)
    for b in range(cfg.n_blocks):
        p = GatedFfnParams.init(cfg.d_model, cfg.d_hidden, cfg.d_model, rng, dtype, out_scale=0.5)
        P[f"blocks.{b}.share.gate"], P[f"blocks.{b}.share.up"], P[f"blocks.{b}.share.down"] = p.w_gate, p.w_up, p.w_down
    P["out.w"] = rng.normal(0.0, 0.1 / math.sqrt(cfg.d_model), (cfg.d_model, 5)).astype(dtype)
    P["out.b"] = np.zeros(5, dtype=dtype)
    if cfg.d_plan:
        P["planner.target"] = np.zeros((cfg.n_targets, cfg.d_plan), dtype=dtype)
    bundle = SkillMoeBundle(cfg, reg, P)
    for k in range(len(reg)):
        P.update(_init_expert(cfg, k, rng, dtype) if cfg.variant != "no_moe" else
                 {n: v for n, v in _init_expert(cfg, k, rng, dtype).items() if n.startswith(("mode.", "planner."))})
        if cfg.variant in ("sg_moe", "timestep_moe"):
            P[f"router.col.{k}"] = rng.normal(0.0, 0.01, cfg.d_emb).astype(dtype)
            P[f"router.bias.{k}"] = np.zeros(1, dtype=dtype)
    bundle.n_base_experts = len(reg)
    return bundle


def expand_skill_library(bundle: SkillMoeBundle, name: str, seed: int) -> SkillMoeBundle:
    """Register a new skill and grow one expert plus one router column; old tensors are copied bit-exactly."""
    reg = register(bundle.registry, name)
    k = len(bundle.registry)
    cfg = bundle.cfg
    rng = np.random.default_rng([int(seed), 314159, k])
    dtype = bundle.params["in.w"].dtype
    P = {n: v.copy() for n, v in bundle.params.items()}
    new = _init_expert(cfg, k, rng, dtype)
    if cfg.variant == "no_moe":
        new = {n: v for n, v in new.items() if n.startswith(("mode.", "planner."))}
    P.update(new)
    if cfg.variant in ("sg_moe", "timestep_moe"):
        P[f"router.col.{k}"] = rng.normal(0.0, 1e-4, cfg.d_emb).astype(dtype)
        P[f"router.bias.{k}"] = np.zeros(1, dtype=dtype)
    return SkillMoeBundle(cfg, reg, P, set(), n_base_experts=k)


def freeze_for_continual(bundle: SkillMoeBundle) -> dict[str, bool]:
    """Trainable mask: only the newest expert's tensors and its router column/bias."""
    if bundle.K <= bundle.n_base_experts or bundle.cfg.variant == "no_moe":
        raise ContractError("no newly added expert to train")
    cfg = bundle.cfg
    train = set()
    for k in range(bundle.n_base_experts, bundle.K):
        train.update(expert_tensor_names(cfg, k))
        train.update(router_tensor_names(cfg, k))
    mask = {n: (n in train) for n in bundle.order()}
    bundle.frozen = {n for n, t in mask.items() if not t}
    return mask


def count_breakdown(cfg: ModelCfg) -> tuple[int, int]:
    """(base, per_expert) parameter counts implied by the config."""
    b = build_bundle(replace(cfg), [], 0)
    one = build_bundle(replace(cfg), ["s0"], 0)
    return b.param_count(), one.param_count() - b.param_count()


# -- decoder ---------------------------------------------------------------

def _ffn(P: Mapping[str, np.ndarray], prefix: str) -> GatedFfnParams:
    return GatedFfnParams(P[prefix + ".gate"], P[prefix + ".up"], P[prefix + ".down"])


def moe_block_forward(share: GatedFfnParams, experts: Sequence[GatedFfnParams], x: np.ndarray,
                      k_rows: np.ndarray, w_rows: np.ndarray):
    """Residual blended block: x + (1 - w) F_share(x) + w F_k(x), per row."""
    ys, cs = gated_ffn_forward(share, x)
    fk = np.zeros_like(ys)
    ecache = {}
    for k in np.unique(k_rows):
        if k < 0:
            continue
        if k >= len(experts):
            raise ContractError(f"expert index {k} out of range for {len(experts)} experts")
        idx = np.flatnonzero(k_rows == k)
        yk, ck = gated_ffn_forward(experts[k], x[idx])
        fk[idx] = yk
        ecache[int(k)] = (idx, ck)
    w = w_rows[:, None].astype(x.dtype)
    y = x + (1.0 - w) * ys + w * fk
    return y, {"share": (share, cs), "experts": experts, "ecache": ecache, "ys": ys, "fk": fk, "w": w}


def moe_block_backward(cache: Mapping, dy: np.ndarray):
    """Returns (dx, grads of share, grads per expert, dw per row)."""
    share, cs = cache["share"]
    w, ys, fk = cache["w"], cache["ys"], cache["fk"]
    dw = np.sum(dy * (fk - ys), axis=1)
    dxs, gshare = gated_ffn_backward(share, cs, dy * (1.0 - w))
    dx = dy + dxs
    gexp = {}
    for k, (idx, ck) in cache["ecache"].items():
        dxk, gk = gated_ffn_backward(cache["experts"][k], ck, dy[idx] * w[idx])
        dx[idx] += dxk
        gexp[k] = gk
    return dx, gshare, gexp, dw


@dataclass
class Routing:
    """Per-sample routing inputs for one decoder call."""

    z: np.ndarray | None = None  # (B, d_emb) router input for sg_moe / timestep_moe
    teacher: np.ndarray | None = None  # (B,) forced expert index (training)
    fixed: RouteDecision | None = None  # one decision for the whole call (inference)
    force_w: float | None = None  # override the gate weight (w = 0 gives the shared-only network)
    logit_noise: np.ndarray | None = None  # (B, K) additive router-logit noise (noisy gating, training only)


def decoder_forward(bundle: SkillMoeBundle, inp: np.ndarray, routing: Routing):
    """Velocity field for tokens ``inp`` of shape (B, H, d_in). Returns (v (B, H, 5), cache, aux_loss)."""
    P, cfg = bundle.params, bundle.cfg
    B, H, D_in = inp.shape
    if D_in != cfg.d_in:
        raise DimensionError(f"token width {D_in} != decoder input {cfg.d_in}")
    x = inp.reshape(B * H, D_in)
    h = x @ P["in.w"] + P["in.b"]
    variant = cfg.variant
    sample_of_row = np.repeat(np.arange(B), H)
    cache: dict = {"x": x, "B": B, "H": H, "blocks": [], "variant": variant, "rows": sample_of_row}
    aux = 0.0
    n_exp = bundle.n_experts
    experts_by_block = [[_ffn(P, f"blocks.{b}.expert.{k}") for k in range(n_exp)] for b in range(cfg.n_blocks)]

    # one decision per sample for sg_moe / timestep_moe
    sample_k = sample_w = None
    if variant == "no_moe" or n_exp == 0:
        sample_k = np.full(B, -1)
        sample_w = np.zeros(B)
    elif routing.fixed is not None:
        if not 0 <= routing.fixed.k < n_exp:
            raise RoutingError(f"expert {routing.fixed.k} out of range")
        sample_k = np.full(B, routing.fixed.k)
        sample_w = np.full(B, routing.fixed.w)
    elif variant in ("sg_moe", "timestep_moe"):
        rp = bundle.router_params()
        logits = routing.z @ rp.w_route + rp.b_route
        if routing.logit_noise is not None:
            logits = logits + routing.logit_noise.astype(logits.dtype)
        probs = softmax(logits)
        sample_k = routing.teacher.astype(int) if routing.teacher is not None else np.argmax(probs, axis=1)
        sample_w = probs[np.arange(B), sample_k]
        cache["router"] = (routing.z, probs, sample_k)
    if routing.force_w is not None and sample_w is not None:
        sample_w = np.full(B, float(routing.force_w))
        cache.pop("router", None)
    for b in range(cfg.n_blocks):
        bc: dict = {}
        if variant == "token_moe" and n_exp and routing.fixed is None:
            rp = bundle.router_params(b)
            logits = h @ rp.w_route + rp.b_route
            probs = softmax(logits)
            k_rows = np.argmax(probs, axis=1)
            w_rows = probs[np.arange(len(k_rows)), k_rows]
            if routing.force_w is not None:
                w_rows = np.full(len(k_rows), float(routing.force_w))
            else:
                frac = np.bincount(k_rows, minlength=n_exp) / len(k_rows)
                aux += BALANCE_COEF * n_exp * float(np.sum(frac * probs.mean(0)))
                bc["token_router"] = (h, probs, k_rows, frac)
        else:
            k_rows = sample_k[sample_of_row]
            w_rows = sample_w[sample_of_row]
        share = _ffn(P, f"blocks.{b}.share")
        h_new, mc = moe_block_forward(share, experts_by_block[b], h, k_rows, w_rows)
        bc["moe"] = mc
        bc["k_rows"], bc["w_rows"] = k_rows, w_rows
        cache["blocks"].append(bc)
        h = h_new
    v = h @ P["out.w"] + P["out.b"]
    cache["h_last"] = h
    return v.reshape(B, H, 5), cache, aux


def decoder_backward(bundle: SkillMoeBundle, cache: Mapping, dv: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of (loss + aux) w.r.t. all decoder tensors given dL/dv of shape (B, H, 5)."""
    P, cfg = bundle.params, bundle.cfg
    B, H = cache["B"], cache["H"]
    dv = dv.reshape(B * H, 5)
    g: dict[str, np.ndarray] = {}
    g["out.w"] = cache["h_last"].T @ dv
    g["out.b"] = dv.sum(0)
    dh = dv @ P["out.w"].T
    n_exp = bundle.n_experts
    dw_sample = np.zeros(B)
    for b in reversed(range(cfg.n_blocks)):
        bc = cache["blocks"][b]
        dx, gshare, gexp, dw = moe_block_backward(bc["moe"], dh)
        for t in ("gate", "up", "down"):
            g[f"blocks.{b}.share.{t}"] = gshare[t]
        for k, gk in gexp.items():
            for t in ("gate", "up", "down"):
                g[f"blocks.{b}.expert.{k}.{t}"] = gk[t]
        if "token_router" in bc:
            h_in, probs, k_rows, frac = bc["token_router"]
            N = len(k_rows)
            dprobs = np.zeros_like(probs)
            dprobs[np.arange(N), k_rows] = dw
            dprobs += BALANCE_COEF * n_exp * frac[None, :] / N
            dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))
            for k in range(n_exp):
                g[f"blocks.{b}.router.col.{k}"] = h_in.T @ dlogits[:, k]
                g[f"blocks.{b}.router.bias.{k}"] = np.array([dlogits[:, k].sum()], dtype=dlogits.dtype)
            rp = bundle.router_params(b)
            dx = dx + dlogits @ rp.w_route.T.astype(dx.dtype)
        else:
            np.add.at(dw_sample, cache["rows"], dw)
        dh = dx
    g["in.w"] = cache["x"].T @ dh
    g["in.b"] = dh.sum(0)
    if "router" in cache:
        z, probs, sk = cache["router"]
        dprobs = np.zeros_like(probs)
        dprobs[np.arange(B), sk] = dw_sample
        dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))
        for k in range(n_exp):
            g[f"router.col.{k}"] = z.T @ dlogits[:, k]
            g[f"router.bias.{k}"] = np.array([dlogits[:, k].sum()], dtype=dlogits.dtype)
    dtype = P["in.w"].dtype
    return {k: np.asarray(v, dtype=dtype) for k, v in g.items()}


def router_ce(bundle: SkillMoeBundle, names: Sequence[str] | None = None):
    """Cross-entropy of routing each registered skill embedding to its bound expert. Returns (loss, grads)."""
    if bundle.cfg.variant != "sg_moe" or bundle.K == 0:
        return 0.0, {}
    names = list(names) if names is not None else bundle.registry.names
    dtype = bundle.params["in.w"].dtype
    z = np.stack([bundle.skill_embedding(n) for n in names]).astype(dtype)
    tgt = np.array([bundle.registry.index(n) for n in names])
    rp = bundle.router_params()
    probs = softmax(z @ rp.w_route + rp.b_route)
    n = len(names)
    loss = float(-np.mean(np.log(probs[np.arange(n), tgt] + 1e-12)))
    dlogits = probs.copy()
    dlogits[np.arange(n), tgt] -= 1.0
    dlogits /= n
    g = {}
    for k in range(bundle.K):
        g[f"router.col.{k}"] = (z.T @ dlogits[:, k]).astype(dtype)
        g[f"router.bias.{k}"] = np.array([dlogits[:, k].sum()], dtype=dtype)
    return loss, g
