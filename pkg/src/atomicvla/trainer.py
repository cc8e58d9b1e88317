"""Behavior cloning of decoder, mode and planner heads; continual skill addition; ablation variants."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import netcore as nc
from . import policy as pl
from . import segmenter as sg
from . import simworld as sw
from . import skillmoe as sm
from .trajcore import EpisodeSet

log = logging.getLogger(__name__)

BASE_SKILLS = ("Pick", "Place", "Open", "Close", "Turn")
NEW_SKILL = "Press"
CKPT_FORMAT = "atomicvla-checkpoint"


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainCfg:
    variant: str = "sg_moe"
    batch: int = 64
    steps: int = 5000
    warmup: int = 1000
    peak_lr: float = 1e-3
    final_lr: float = 1e-4
    seed: int = 0
    lam_flow: float = 1.0
    lam_mode: float = 0.1
    lam_plan: float = 0.1
    lam_route: float = 1.0
    gate_noise: float = 1.0  # std of router-logit noise during training
    balance: bool = True
    ema_decay: float = 0.999
    clip: float = 1.0
    weight_decay: float = 0.0
    staged: bool = False
    eval_every: int = 500
    flow_steps: int = 10
    d_model: int = 64
    d_hidden: int = 128
    n_blocks: int = 2

    def __post_init__(self):
        if self.variant not in sm.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.steps <= 0 or self.batch <= 0:
            raise ConfigError("steps and batch must be positive")
        if min(self.lam_flow, self.lam_mode, self.lam_plan, self.lam_route) < 0:
            raise ConfigError("loss weights must be >= 0")

    def schedule(self) -> nc.ScheduleCfg:
        warm = min(self.warmup, self.steps - 1)
        return nc.ScheduleCfg(warm, self.peak_lr, min(self.final_lr, self.peak_lr), self.steps)


# -- data ------------------------------------------------------------------

@dataclass
class FrameTable:
    """Flattened training frames built by replaying annotated episodes in the simulator."""

    template: str
    skills: tuple[str, ...]  # label vocabulary, registry order
    obs: np.ndarray  # (N, F)
    tfeat: np.ndarray  # (N, N_TFEAT)
    skill: np.ndarray  # (N,) index into skills
    target: np.ndarray  # (N,) index into layout targets
    chunk: np.ndarray  # (N, H, 5) normalized actions
    episode: np.ndarray  # (N,)
    mode_x: np.ndarray  # (M, d_mode)
    mode_skill: np.ndarray  # (M,)
    mode_y: np.ndarray  # (M,) 1 = Think
    seg_counts: dict[str, int]

    def __len__(self) -> int:
        return len(self.skill)


def subtask_index(ep, n_sub: int) -> np.ndarray:
    """Per-frame subtask index from Think marks (or label runs when modes are absent)."""
    n = len(ep.traj)
    if ep.modes is not None:
        starts = [i for i, m in enumerate(ep.modes) if m == pl.THINK]
    else:
        starts = [a for a, _, _ in sg.label_runs(ep.skills)]
    if not starts or starts[0] != 0:
        starts = [0] + starts
    if len(starts) != n_sub:
        raise TrainingError(f"episode {ep.meta.episode}: {len(starts)} subtask starts, task has {n_sub} subtasks")
    idx = np.zeros(n, dtype=np.int64)
    for j, s in enumerate(starts):
        idx[s:] = j
    return idx


def build_frame_table(es: EpisodeSet, skills: Sequence[str], horizon: int = sw.HORIZON) -> FrameTable:
    if len(es) == 0:
        raise TrainingError("empty episode set")
    skills = tuple(skills)
    template = None
    rows: dict[str, list] = {k: [] for k in ("obs", "tfeat", "skill", "target", "chunk", "episode")}
    mx, ms, my = [], [], []
    for e_i, ep in enumerate(es):
        spec = sw.TASKS.get(ep.meta.task)
        if spec is None:
            raise TrainingError(f"unknown task {ep.meta.task!r}")
        tmpl_layout = sw.TEMPLATES[spec.template][0]
        template = template or tmpl_layout
        if tmpl_layout != template:
            raise TrainingError("all episodes must share one scene layout")
        if ep.skills is None or ep.actions is None:
            raise TrainingError(f"episode {ep.meta.episode} lacks skill labels or actions")
        states = sw.replay_states(ep)
        dec = spec.decomposition
        sub = subtask_index(ep, len(dec))
        lay = spec.layout
        starts = {int(np.flatnonzero(sub == j)[0]) for j in range(1, len(dec))}
        for i, st in enumerate(states):
            s = dec[sub[i]]
            if s.skill not in skills:
                raise TrainingError(f"skill {s.skill!r} not in vocabulary {skills}")
            obs = pl.encode_observation(st, spec)
            tf = pl.target_features(st, s)
            rows["obs"].append(obs)
            rows["tfeat"].append(tf)
            rows["skill"].append(skills.index(s.skill))
            rows["target"].append(lay.targets.index(s.target))
            rows["chunk"].append(pl.normalize_actions(ep.actions[i].reshape(horizon, 5)))
            rows["episode"].append(e_i)
            mx.append(pl.mode_features(obs, tf))
            ms.append(skills.index(s.skill))
            my.append(0.0)
        # boundary examples: the previous latch is still held while its subtask is already done
        for b in sorted(starts):
            prev = dec[sub[b - 1]]
            for i in range(b, min(b + horizon, len(states))):
                obs = pl.encode_observation(states[i], spec)
                mx.append(pl.mode_features(obs, pl.target_features(states[i], prev)))
                ms.append(skills.index(prev.skill))
                my.append(1.0)
    seen = sorted({skills[k] for k in rows["skill"]}, key=skills.index)
    counts = sg.skill_histogram(es, seen).counts
    return FrameTable(
        template, skills, np.array(rows["obs"]), np.array(rows["tfeat"]), np.array(rows["skill"]),
        np.array(rows["target"]), np.array(rows["chunk"]), np.array(rows["episode"]),
        np.array(mx), np.array(ms), np.array(my), counts,
    )


def sampling_probs(skill: np.ndarray, labels: Sequence[str], seg_counts: Mapping[str, int], balance: bool) -> np.ndarray:
    """Per-frame probabilities. Balanced: each skill's share is proportional to count * weight, i.e. uniform."""
    n = len(skill)
    if not balance:
        return np.full(n, 1.0 / n)
    present = [labels[k] for k in np.unique(skill)]
    stats = sg.balance_weights({n: seg_counts.get(n, 0) for n in present}, present)
    p = np.zeros(n)
    for k in np.unique(skill):
        lab = labels[k]
        members = skill == k
        share = stats.weights.get(lab, 0.0) * stats.counts.get(lab, 0)
        p[members] = share / members.sum()
    return p / p.sum()


@dataclass
class Batch:
    idx: np.ndarray
    tokens: np.ndarray
    u_target: np.ndarray
    t: np.ndarray
    skill: np.ndarray
    target: np.ndarray
    plan_x: np.ndarray
    mode_x: np.ndarray
    mode_skill: np.ndarray
    mode_y: np.ndarray
    gate_noise: np.ndarray | None = None  # (B, K_MAX) unit Gaussians


def build_batches(table: FrameTable, cfg: TrainCfg, step: int, probs: np.ndarray | None = None,
                  d_temb: int = 16, dtype=np.float32) -> Batch:
    """Seeded batch for ``step``: frames, flow samples, and class-balanced mode examples."""
    if len(table) == 0:
        raise TrainingError("empty frame table")
    rng = np.random.default_rng([int(cfg.seed), int(step), 99991])
    if probs is None:
        probs = sampling_probs(table.skill, table.skills, table.seg_counts, cfg.balance)
    idx = rng.choice(len(table), size=cfg.batch, p=probs)
    H = table.chunk.shape[1]
    a = table.chunk[idx]
    z = rng.standard_normal(a.shape)
    t = rng.uniform(0.0, 1.0, cfg.batch)
    fs = pl.fm_target(a, z, t)
    ctx = np.concatenate([table.obs[idx], table.tfeat[idx]], axis=1)
    tokens = pl.build_tokens(fs.x_interp, ctx, t, H, d_temb)
    think = np.flatnonzero(table.mode_y == 1.0)
    actm = np.flatnonzero(table.mode_y == 0.0)
    half = cfg.batch // 2
    m_idx = np.concatenate([
        rng.choice(think, size=half) if len(think) else np.zeros(0, dtype=np.int64),
        rng.choice(actm, size=cfg.batch - half if len(think) else cfg.batch),
    ])
    return Batch(
        idx, tokens.astype(dtype), fs.u_target.astype(dtype), t, table.skill[idx], table.target[idx],
        np.concatenate([table.obs[idx], np.ones((cfg.batch, 1))], axis=1).astype(dtype),
        table.mode_x[m_idx].astype(dtype), table.mode_skill[m_idx], table.mode_y[m_idx].astype(dtype),
        rng.standard_normal((cfg.batch, sm.K_MAX)),
    )


# -- model construction ----------------------------------------------------

def build_variant(cfg: TrainCfg, template: str = "tabletop", skills: Sequence[str] = BASE_SKILLS,
                  dtype=np.float32) -> sm.SkillMoeBundle:
    mcfg = pl.model_cfg_for(template, cfg.variant, d_model=cfg.d_model, d_hidden=cfg.d_hidden,
                            n_blocks=cfg.n_blocks, flow_steps=cfg.flow_steps)
    return sm.build_bundle(mcfg, skills, cfg.seed, dtype)


def routing_for(bundle: sm.SkillMoeBundle, batch: Batch, teacher: bool = True, noise: np.ndarray | None = None) -> sm.Routing:
    cfg = bundle.cfg
    dtype = bundle.params["in.w"].dtype
    if cfg.variant == "sg_moe":
        names = [bundle.registry.names[k] for k in batch.skill]
        z = np.stack([bundle.skill_embedding(n) for n in names]).astype(dtype)
        return sm.Routing(z=z, teacher=np.asarray(batch.skill) if teacher else None, logit_noise=noise)
    if cfg.variant == "timestep_moe":
        tq = np.minimum(np.floor(batch.t * cfg.flow_steps), cfg.flow_steps - 1) / cfg.flow_steps
        return sm.Routing(z=sm.time_embedding(tq, cfg.d_emb).astype(dtype), logit_noise=noise)
    return sm.Routing()


# -- loss ------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def bc_loss(bundle: sm.SkillMoeBundle, batch: Batch, cfg: TrainCfg, with_grads: bool = True):
    """total = lam_f * flow MSE + lam_m * mode CE + lam_p * (skill CE + target CE) + lam_r * routing CE."""
    P = bundle.params
    dtype = P["in.w"].dtype
    comps: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}

    def acc(name, g):
        grads[name] = grads[name] + g if name in grads else g

    noise = batch.gate_noise[:, :bundle.K] if batch.gate_noise is not None and cfg.gate_noise else None
    if noise is not None:
        noise = noise * cfg.gate_noise
    v, cache, aux = sm.decoder_forward(bundle, batch.tokens, routing_for(bundle, batch, noise=noise))
    diff = v - batch.u_target
    comps["flow"] = float(np.mean(diff.astype(np.float64) ** 2))
    comps["balance"] = float(aux)
    if with_grads and cfg.lam_flow:
        dv = (2.0 * cfg.lam_flow / diff.size) * diff
        for k, g in sm.decoder_backward(bundle, cache, dv.astype(dtype)).items():
            acc(k, g)

    # mode head: one logistic row per latched skill
    K = bundle.K
    Wm = np.stack([P[f"mode.{k}"] for k in range(K)])
    logit = np.sum(batch.mode_x * Wm[batch.mode_skill], axis=1).astype(np.float64)
    y = batch.mode_y.astype(np.float64)
    comps["mode"] = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
    if with_grads and cfg.lam_mode:
        dl = (nc.sigmoid(logit) - y) * cfg.lam_mode / len(y)
        for k in range(K):
            sel = batch.mode_skill == k
            if sel.any():
                acc(f"mode.{k}", (dl[sel] @ batch.mode_x[sel]).astype(dtype))

    # planner heads
    Ws = np.stack([P[f"planner.skill.{k}"] for k in range(K)])
    ls = (batch.plan_x @ Ws.T).astype(np.float64)
    lt = (batch.plan_x @ P["planner.target"].T).astype(np.float64)
    B = len(batch.skill)
    lps, lpt = _log_softmax(ls), _log_softmax(lt)
    comps["skill"] = float(-np.mean(lps[np.arange(B), batch.skill]))
    comps["target"] = float(-np.mean(lpt[np.arange(B), batch.target]))
    if with_grads and cfg.lam_plan:
        ds = np.exp(lps)
        ds[np.arange(B), batch.skill] -= 1.0
        ds *= cfg.lam_plan / B
        gs = ds.T @ batch.plan_x
        for k in range(K):
            acc(f"planner.skill.{k}", gs[k].astype(dtype))
        dt = np.exp(lpt)
        dt[np.arange(B), batch.target] -= 1.0
        dt *= cfg.lam_plan / B
        acc("planner.target", (dt.T @ batch.plan_x).astype(dtype))

    rl, rg = sm.router_ce(bundle)
    comps["route"] = rl
    if with_grads and cfg.lam_route:
        for k, g in rg.items():
            acc(k, (g * cfg.lam_route).astype(dtype))

    total = (cfg.lam_flow * comps["flow"] + comps["balance"] + cfg.lam_mode * comps["mode"]
             + cfg.lam_plan * (comps["skill"] + comps["target"]) + cfg.lam_route * comps["route"])
    comps["total"] = total
    for name in ("flow", "mode", "skill", "target", "route", "balance"):
        if not math.isfinite(comps[name]):
            raise TrainingError(f"non-finite {name} loss")
    return total, comps, grads


# -- checkpoint ------------------------------------------------------------

@dataclass
class Checkpoint:
    bundle: sm.SkillMoeBundle
    ema: dict[str, np.ndarray]
    cfg: TrainCfg
    step: int
    metrics: list[dict] = field(default_factory=list)
    report: dict | None = None

    def weights(self, use_ema: bool = True) -> sm.SkillMoeBundle:
        if not use_ema:
            return self.bundle
        return replace(self.bundle, params={k: v.copy() for k, v in self.ema.items()}, frozen=set(self.bundle.frozen))

    def save(self, path: str) -> None:
        b = self.bundle
        meta = {
            "format": CKPT_FORMAT, "version": 1, "registry": b.registry.to_json(), "k_max": b.registry.k_max,
            "model": b.cfg.to_json(), "train": asdict(self.cfg), "step": self.step,
            "n_base_experts": b.n_base_experts, "frozen": sorted(b.frozen),
        }
        nc.save_checkpoint(path, b.order(), {"raw": b.params, "ema": self.ema}, meta)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        manifest, sections = nc.load_checkpoint(path)
        if manifest.get("format") != CKPT_FORMAT:
            raise TrainingError(f"{path}: not a checkpoint")
        mcfg = sm.ModelCfg(**manifest["model"])
        reg = sm.SkillRegistry.from_json(manifest["registry"], manifest["k_max"])
        bundle = sm.SkillMoeBundle(mcfg, reg, sections["raw"], set(manifest.get("frozen", [])),
                                   manifest.get("n_base_experts", len(reg)))
        return cls(bundle, sections["ema"], TrainCfg(**manifest["train"]), int(manifest["step"]))


# -- training loop ---------------------------------------------------------

def routing_report(bundle: sm.SkillMoeBundle) -> dict[str, dict]:
    out = {}
    if bundle.cfg.variant != "sg_moe":
        return out
    for e in bundle.registry.entries:
        d = bundle.route_skill(e.name)
        out[e.name] = {"k": d.k, "w": d.w, "bound": e.expert, "ok": d.k == e.expert}
    return out


def routing_accuracy(bundle: sm.SkillMoeBundle) -> float:
    rep = routing_report(bundle)
    return sum(r["ok"] for r in rep.values()) / len(rep) if rep else float("nan")


def _ema_decay(decay: float, step: int) -> float:
    # warm-started average so the random init does not linger in the EMA weights
    return min(decay, (1.0 + step) / (10.0 + step))


def _fit(bundle: sm.SkillMoeBundle, table: FrameTable, cfg: TrainCfg, mask: Mapping[str, bool] | None = None,
         ema: dict | None = None, log_fn=None) -> Checkpoint:
    sched = cfg.schedule()
    params = dict(bundle.params)
    opt = nc.OptState.init(params, cfg.weight_decay, cfg.clip)
    ema = {k: v.copy() for k, v in (ema or params).items()}
    probs = sampling_probs(table.skill, table.skills, table.seg_counts, cfg.balance)
    metrics = []
    d_temb = bundle.cfg.d_temb
    for step in range(cfg.steps):
        batch = build_batches(table, cfg, step, probs, d_temb, params["in.w"].dtype)
        cur = replace(bundle, params=params)
        try:
            _, comps, grads = bc_loss(cur, batch, cfg)
        except TrainingError as e:
            raise TrainingError(f"step {step}: {e}") from None
        if mask is not None:
            grads = {k: (g if mask.get(k, False) else np.zeros_like(g)) for k, g in grads.items()}
        lr = nc.lr_schedule(step, sched)
        params, opt = nc.adamw_step(opt, params, grads, lr, trainable=mask)
        live = params if mask is None else {k: v for k, v in params.items() if mask.get(k, False)}
        ema.update(nc.ema_update(ema, live, _ema_decay(cfg.ema_decay, step)))
        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            rec = {"step": step + 1, "lr": lr, **{k: round(v, 6) for k, v in comps.items()},
                   "routing_acc": routing_accuracy(replace(bundle, params=params))}
            metrics.append(rec)
            if log_fn:
                log_fn(rec)
    bundle = replace(bundle, params=params)
    return Checkpoint(bundle, ema, cfg, cfg.steps, metrics)


def train(cfg: TrainCfg, es: EpisodeSet | FrameTable, skills: Sequence[str] = BASE_SKILLS, log_fn=None) -> Checkpoint:
    table = es if isinstance(es, FrameTable) else build_frame_table(es, skills)
    bundle = build_variant(cfg, table.template, skills)
    return _fit(bundle, table, cfg, log_fn=log_fn)


def flow_loss_eval(bundle: sm.SkillMoeBundle, table: FrameTable, skills: Iterable[str] | None = None,
                   n: int = 512, seed: int = 7) -> dict[str, float]:
    """Held-out flow MSE per skill with fixed noise and flow times, inference-style routing."""
    out = {}
    names = list(skills) if skills is not None else list(table.skills)
    for name in names:
        k = table.skills.index(name)
        pool = np.flatnonzero(table.skill == k)
        if not len(pool):
            continue
        rng = np.random.default_rng([seed, k])
        idx = pool[rng.integers(len(pool), size=min(n, len(pool)))]
        a = table.chunk[idx]
        z = rng.standard_normal(a.shape)
        t = rng.uniform(0, 1, len(idx))
        fs = pl.fm_target(a, z, t)
        ctx = np.concatenate([table.obs[idx], table.tfeat[idx]], axis=1)
        dtype = bundle.params["in.w"].dtype
        tok = pl.build_tokens(fs.x_interp, ctx, t, table.chunk.shape[1], bundle.cfg.d_temb).astype(dtype)
        b = Batch(idx, tok, fs.u_target, t, np.full(len(idx), bundle.registry.index(name)) if name in bundle.registry.names else np.zeros(len(idx), int),
                  np.zeros(len(idx), int), np.zeros((len(idx), 1)), np.zeros((0, 1)), np.zeros(0, int), np.zeros(0))
        r = routing_for(bundle, b, teacher=False)
        if bundle.cfg.variant == "sg_moe":
            d = bundle.route_skill(name)
            r = sm.Routing(fixed=d)
        v, _, _ = sm.decoder_forward(bundle, tok, r)
        out[name] = float(np.mean((v.astype(np.float64) - fs.u_target) ** 2))
    return out


def continual_train(base: Checkpoint, new_es: EpisodeSet | FrameTable, cfg: TrainCfg, new_skill: str = NEW_SKILL,
                    old_table: FrameTable | None = None, use_ema: bool = True, log_fn=None) -> Checkpoint:
    """Add one skill. sg_moe: expand, freeze everything old, train on new-skill data only.

    no_moe (the forgetting baseline): registry grows for the heads, every tensor stays trainable.
    """
    start = base.weights(use_ema)
    skills = tuple(start.registry.names) + (new_skill,)
    table = new_es if isinstance(new_es, FrameTable) else build_frame_table(new_es, skills)
    grown = sm.expand_skill_library(start, new_skill, cfg.seed)
    if grown.cfg.variant == "no_moe":
        mask = None
    else:
        mask = sm.freeze_for_continual(grown)
    ck = _fit(grown, table, cfg, mask=mask, ema=grown.params)
    if mask is not None:
        ck.bundle.frozen = set(grown.frozen)
    report = {"new_skill": new_skill, "variant": grown.cfg.variant}
    after = ck.weights(use_ema)
    if mask is not None:
        frozen = sorted(n for n, t in mask.items() if not t)
        report["frozen_tensors"] = len(frozen)
        report["trainable_tensors"] = sum(mask.values())
        report["frozen_identical"] = all(np.array_equal(start.params[n], ck.bundle.params[n]) and
                                         np.array_equal(start.params[n], ck.ema[n]) for n in frozen)
        report["frozen_digest_before"] = nc.tensor_digest(start.params, frozen)
        report["frozen_digest_after"] = nc.tensor_digest(ck.bundle.params, frozen)
    old = list(start.registry.names)
    if start.cfg.variant == "sg_moe":
        before_r = routing_report(start)
        after_r = routing_report(after)
        report["routing"] = {n: {"before_k": before_r[n]["k"], "after_k": after_r[n]["k"],
                                 "before_w": before_r[n]["w"], "after_w": after_r[n]["w"]} for n in old}
        report["routing_unchanged"] = all(before_r[n]["k"] == after_r[n]["k"] for n in old)
    if old_table is not None:
        lb = flow_loss_eval(start, old_table, old)
        la = flow_loss_eval(after, old_table, old)
        report["old_flow_loss"] = {n: {"before": lb[n], "after": la[n], "drift": (la[n] - lb[n]) / lb[n]} for n in lb}
        report["max_drift"] = max(abs(v["drift"]) for v in report["old_flow_loss"].values())
    ck.report = report
    return ck


# -- evaluation helpers ----------------------------------------------------

def evaluate_success(bundle: sm.SkillMoeBundle, tasks: Sequence[str], n: int, seed: int,
                     limits: pl.Limits = pl.Limits(), flow_steps: int = 10, planner: str = "oracle",
                     mode: str = "oracle", count_recoveries: bool = False) -> dict:
    """Success rate per task over n seeded rollouts each (oracle planner and mode by default)."""
    pol = pl.Policy(bundle=bundle, planner=planner, mode=mode, actor="decoder", flow_steps=flow_steps)
    per_task = {}
    episodes = []
    for ti, name in enumerate(tasks):
        spec = sw.TASKS[name]
        ok = 0
        for r in range(n):
            s = int(seed) * 10_007 + ti * 1_000 + r
            res, _ = pl.run_episode(pol, spec, s, limits, count_recoveries=count_recoveries)
            ok += res.success
            episodes.append(res.to_json())
        per_task[name] = ok / n
    overall = sum(per_task.values()) / len(per_task)
    return {"per_task": per_task, "success": overall, "episodes": episodes}


def metrics_jsonl(metrics: Sequence[dict]) -> str:
    return "".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics)


def synthetic_batch(bundle: sm.SkillMoeBundle, batch: int, seed: int) -> Batch:
    """Random batch matching the bundle's widths; for gradient checks and smoke tests."""
    cfg = bundle.cfg
    rng = np.random.default_rng([seed, 5150])
    H = cfg.horizon
    t = rng.uniform(0, 1, batch)
    return Batch(
        np.arange(batch), rng.normal(0, 1, (batch, H, cfg.d_in)), rng.normal(0, 1, (batch, H, 5)), t,
        rng.integers(bundle.K, size=batch), rng.integers(cfg.n_targets, size=batch),
        rng.normal(0, 1, (batch, cfg.d_plan)), rng.normal(0, 1, (batch, cfg.d_mode)),
        rng.integers(bundle.K, size=batch), (rng.random(batch) < 0.5).astype(np.float64),
        rng.standard_normal((batch, sm.K_MAX)),
    )


def gradient_check(variant: str, seed: int = 0, probes: int = 60, batch: int = 4, eps: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """Max relative error of the analytic gradient of bc_loss over a small float64 model."""
    mcfg = sm.ModelCfg(variant=variant, d_in=12, d_model=8, d_hidden=16, n_blocks=2, horizon=4,
                       d_mode=6, d_plan=5, n_targets=3)
    bundle = sm.build_bundle(mcfg, ["Pick", "Place", "Open"], seed, np.float64)
    # larger router weights so gates sit away from uniform and routing gradients are not tiny
    rng = np.random.default_rng(seed)
    for k in list(bundle.params):
        if "router" in k or k.startswith(("mode.", "planner.")):
            bundle.params[k] = rng.normal(0, 0.5, bundle.params[k].shape)
    b = synthetic_batch(bundle, batch, seed)
    cfg = TrainCfg(variant=variant, gate_noise=0.5)

    def fn(params):
        total, _, grads = bc_loss(replace(bundle, params=params), b, cfg)
        return total, grads

    return nc.grad_check(fn, bundle.params, probes=probes, eps=eps, seed=seed, floor=floor)


def mode_head_metrics(bundle: sm.SkillMoeBundle, es: EpisodeSet, margin: int = sw.HORIZON) -> dict:
    """Act accuracy on mid-subtask frames (>= margin from both ends) and Think recall at boundaries."""
    table = build_frame_table(es, bundle.registry.names)
    W = np.stack([bundle.params[f"mode.{k}"] for k in range(bundle.K)]).astype(np.float64)
    pred = np.sum(table.mode_x * W[table.mode_skill], axis=1) > 0.0
    # Act rows are one per frame in episode order; Think rows are interleaved per episode
    mid = []
    for ep in es:
        sub = subtask_index(ep, len(sw.TASKS[ep.meta.task].decomposition))
        first = {j: int(np.flatnonzero(sub == j)[0]) for j in np.unique(sub)}
        last = {j: int(np.flatnonzero(sub == j)[-1]) for j in np.unique(sub)}
        mid.append(np.array([i - first[j] >= margin and last[j] - i >= margin for i, j in enumerate(sub)]))
    act_rows = np.flatnonzero(table.mode_y == 0.0)
    mid = np.concatenate(mid)
    act_ok = ~pred[act_rows][mid]
    think = pred[table.mode_y == 1.0]
    return {"act_accuracy": float(act_ok.mean()) if len(act_ok) else float("nan"),
            "think_recall": float(think.mean()) if len(think) else float("nan"),
            "act_frames": int(len(act_ok)), "think_frames": int(len(think))}
