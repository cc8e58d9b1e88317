"""Think/act inference loop: observation features, mode and planner heads, flow-matching actions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import simworld as sw
from .skillmoe import ModelCfg, RouteDecision, Routing, SkillMoeBundle, decoder_forward, route, time_embedding
from .netcore import sigmoid
from .skillmoe import RouterParams, RoutingError, softmax

THINK, ACT = "Think", "Act"
ACTION_SCALE = np.array([0.02, 0.02, 0.02, 0.1])
N_TFEAT = 7


class EncodingError(ValueError):
    pass


# -- features --------------------------------------------------------------

def obs_width(template: str) -> int:
    lay = sw.LAYOUTS[sw.TEMPLATES[template][0]]
    return 5 + 4 * lay.n_blocks + len(lay.fixtures) + len(lay.tasks)


def encode_observation(st: sw.SimState, spec: sw.TaskSpec) -> np.ndarray:
    """Field order: agent (x, y, z, yaw/pi, grip), per block (x, y, z, held), fixtures, task one-hot."""
    lay = spec.layout
    if st.layout != lay.name:
        raise EncodingError(f"state from layout {st.layout!r} cannot encode task {spec.name!r} ({lay.name})")
    if spec.name not in lay.tasks:
        raise EncodingError(f"task {spec.name!r} has no identifier in layout {lay.name!r}")
    out = [st.agent[0], st.agent[1], st.agent[2], st.agent[3] / math.pi, st.grip]
    for i in range(lay.n_blocks):
        out += [st.obj_pos[i, 0], st.obj_pos[i, 1], st.obj_pos[i, 2], 1.0 if st.held == i else 0.0]
    for f in lay.fixtures:
        if f in sw.ARTICULATED:
            out.append(st.ext[f])
        elif f == "button":
            out.append(1.0 if st.button else 0.0)
        elif f == "dial":
            out.append(st.dial / math.pi)
    onehot = [0.0] * len(lay.tasks)
    onehot[lay.tasks.index(spec.name)] = 1.0
    return np.array(out + onehot, dtype=np.float64)


def target_features(st: sw.SimState, sub: sw.Subtask) -> np.ndarray:
    """Vector to the latched target, at two scales, plus its length."""
    rel = sw.target_point(st, sub.skill, sub.target) - st.agent[:3]
    return np.concatenate([rel * 10.0, np.clip(rel / sw.SPEED, -1.0, 1.0), [np.linalg.norm(rel) * 10.0]])


def normalize_actions(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    return np.concatenate([a[:, :4] / ACTION_SCALE, 2.0 * a[:, 4:5] - 1.0], axis=1)


def denormalize_actions(n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64).reshape(-1, 5)
    a = np.concatenate([n[:, :4] * ACTION_SCALE, (n[:, 4:5] + 1.0) / 2.0], axis=1)
    return clamp_actions(a)


def clamp_actions(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a[:, :4] = np.clip(a[:, :4], -sw.STEP_BOUNDS, sw.STEP_BOUNDS)
    a[:, 4] = np.clip(a[:, 4], 0.0, 1.0)
    return a


def token_width(d_obs: int, horizon: int, d_temb: int = 16) -> int:
    return 5 + d_obs + N_TFEAT + d_temb + horizon


def build_tokens(x_t: np.ndarray, ctx: np.ndarray, t: np.ndarray, horizon: int, d_temb: int = 16) -> np.ndarray:
    """Decoder tokens (B, H, d_in) from noisy chunks x_t (B, H, 5), context (B, C) and flow times (B,)."""
    B = x_t.shape[0]
    temb = time_embedding(t, d_temb)
    pos = np.eye(horizon)
    return np.concatenate([
        x_t,
        np.broadcast_to(ctx[:, None, :], (B, horizon, ctx.shape[1])),
        np.broadcast_to(temb[:, None, :], (B, horizon, d_temb)),
        np.broadcast_to(pos[None], (B, horizon, horizon)),
    ], axis=2)


def model_cfg_for(template: str, variant: str = "sg_moe", **kw) -> ModelCfg:
    lay = sw.LAYOUTS[sw.TEMPLATES[template][0]]
    d_obs = obs_width(template)
    horizon = kw.pop("horizon", sw.HORIZON)
    d_temb = kw.pop("d_temb", 16)
    return ModelCfg(variant=variant, d_in=token_width(d_obs, horizon, d_temb), horizon=horizon, d_temb=d_temb,
                    d_mode=d_obs + N_TFEAT + 1, d_plan=d_obs + 1, n_targets=len(lay.targets), **kw)


# -- flow matching ---------------------------------------------------------

@dataclass
class FlowSample:
    t: np.ndarray
    x_interp: np.ndarray
    u_target: np.ndarray


def fm_target(a: np.ndarray, z: np.ndarray, t) -> FlowSample:
    a = np.asarray(a, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if a.shape != z.shape:
        raise ValueError(f"action shape {a.shape} != noise shape {z.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    tb = t_arr.reshape(t_arr.shape + (1,) * (a.ndim - t_arr.ndim))
    return FlowSample(t_arr, (1.0 - tb) * z + tb * a, a - z)


def euler_integrate(field_fn: Callable[[np.ndarray, float, int], np.ndarray], z: np.ndarray, n: int) -> np.ndarray:
    """x <- x + v(x, i/n) / n for i = 0..n-1, starting from noise z at t = 0."""
    if n < 1:
        raise ValueError("need at least one integration step")
    x = np.array(z, dtype=np.float64)
    for i in range(n):
        x = x + field_fn(x, i / n, i) / n
    return x


def act(bundle: SkillMoeBundle, ctx: np.ndarray, decision: RouteDecision | None, n: int,
        rng: np.random.Generator) -> np.ndarray:
    """Sample an action chunk (H, 5) in simulator units, clamped to bounds."""
    cfg = bundle.cfg
    H = cfg.horizon
    dtype = bundle.params["in.w"].dtype
    z = rng.standard_normal((1, H, 5))
    c = np.asarray(ctx, dtype=np.float64)[None]

    def field_fn(x, t, i):
        tok = build_tokens(x, c, np.array([t]), H, cfg.d_temb).astype(dtype)
        if cfg.variant == "sg_moe":
            r = Routing(fixed=decision)
        elif cfg.variant == "timestep_moe":
            r = Routing(z=time_embedding(np.array([t]), cfg.d_emb).astype(dtype))
        else:
            r = Routing()
        v, _, _ = decoder_forward(bundle, tok, r)
        return v.astype(np.float64)

    x = euler_integrate(field_fn, z, n)
    return denormalize_actions(x[0])


# -- heads -----------------------------------------------------------------

def mode_features(obs: np.ndarray, tfeat: np.ndarray) -> np.ndarray:
    return np.concatenate([obs, tfeat, [1.0]])


def plan_features(obs: np.ndarray) -> np.ndarray:
    return np.concatenate([obs, [1.0]])


def mode_logit(bundle: SkillMoeBundle, latched: str, f: np.ndarray) -> float:
    k = bundle.registry.index(latched)
    return float(f @ bundle.params[f"mode.{k}"])


def planner_logits(bundle: SkillMoeBundle, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    W = np.stack([bundle.params[f"planner.skill.{k}"] for k in range(bundle.K)])
    return W @ f, bundle.params["planner.target"] @ f


@dataclass
class ThinkOutput:
    chain: list[tuple[str, str]]
    progress: int
    sigma: str
    subtask: sw.Subtask


class OraclePlanner:
    """Reads ground truth: the task template plus the simulator's progress tracker."""

    def __init__(self, spec: sw.TaskSpec, tracker: sw.ProgressTracker):
        self.spec = spec
        self.tracker = tracker

    def think(self, st: sw.SimState) -> ThinkOutput:
        dec = self.spec.decomposition
        j = min(self.tracker.pointer, len(dec) - 1)
        return ThinkOutput([(s.skill, s.target) for s in dec], j, dec[j].skill, dec[j])


class LearnedPlanner:
    """Closed softmax heads over the registry (skill) and the layout's targets."""

    def __init__(self, bundle: SkillMoeBundle, spec: sw.TaskSpec):
        self.bundle = bundle
        self.spec = spec

    def think(self, st: sw.SimState) -> ThinkOutput:
        obs = encode_observation(st, self.spec)
        ls, lt = planner_logits(self.bundle, plan_features(obs))
        skill = self.bundle.registry.names[int(np.argmax(ls))]
        # the target head is read only over targets the chosen skill can act on
        targets = self.spec.layout.targets
        ok = np.array([sw.compatible(st, skill, t) for t in targets])
        if not ok.any():
            raise sw.FeasibilityError(f"no target in {self.spec.layout.name!r} is compatible with {skill}")
        target = targets[int(np.argmax(np.where(ok, lt, -np.inf)))]
        dec = self.spec.decomposition
        j = next((i for i, s in enumerate(dec) if s.skill == skill and s.target == target), None)
        if j is None:
            j = next((i for i, s in enumerate(dec) if s.skill == skill), 0)
        if dec[j].skill == skill and dec[j].target == target:
            sub = dec[j]
        else:
            # off-plan latch; a Place with empty hands carries nothing and simply fails to progress
            sub = sw.Subtask(skill, target, sw.held_name(st) if skill == "Place" else None)
        return ThinkOutput([(s.skill, s.target) for s in dec], j, skill, sub)


# -- episode loop ----------------------------------------------------------

@dataclass
class Limits:
    max_steps: int = 400
    max_thinks: int = 64
    watchdog: int = 40


@dataclass
class Policy:
    bundle: SkillMoeBundle | None = None
    planner: str = "oracle"  # oracle | learned
    mode: str = "oracle"  # oracle | learned | watchdog
    actor: str = "decoder"  # decoder | scripted
    flow_steps: int = 10
    actor_noise: float = 0.0


@dataclass
class EpisodeResult:
    task: str
    seed: int
    success: bool
    subtasks: list[dict]
    steps: int
    mode_trace: list[list]
    route_trace: list[list]
    act_trace: list[list] = field(default_factory=list)
    think_steps: list[int] = field(default_factory=list)
    latched: list[str] = field(default_factory=list)
    regressions: int = 0
    reason: str = ""

    def to_json(self) -> dict:
        return {
            "task": self.task, "seed": self.seed, "success": self.success, "subtasks": self.subtasks,
            "steps": self.steps, "mode_trace": self.mode_trace, "route_trace": self.route_trace,
            "act_trace": self.act_trace, "think_steps": self.think_steps, "latched": self.latched,
            "regressions": self.regressions, "reason": self.reason,
        }

    def get(self, k, default=None):
        return self.to_json().get(k, default)

    def modes(self) -> list[str]:
        return [m for m, c in self.mode_trace for _ in range(c)]


def rle(seq: Sequence[str]) -> list[list]:
    out: list[list] = []
    for s in seq:
        if out and out[-1][0] == s:
            out[-1][1] += 1
        else:
            out.append([s, 1])
    return out


def scripted_chunk(st: sw.SimState, sub: sw.Subtask, horizon: int, rng: np.random.Generator | None,
                   noise: float) -> np.ndarray:
    """Expert actions rolled forward on a copy of the state; holds once the subtask is done."""
    out = np.zeros((horizon, 5))
    sim = st
    last = st.grip
    for i in range(horizon):
        if sw.subtask_done(sim, sub):
            out[i:, 4] = last
            break
        a = sw.expert_action(sim, sub)
        a = sw.noisy(a, rng, noise) if (rng is not None and noise > 0) else sw.noisy(a, np.random.default_rng(0), 0.0)
        out[i] = a
        last = a[4]
        sim = sw.step(sim, a)
    return out


def _oracle_wants_think(latched: sw.Subtask | None, tracker: sw.ProgressTracker) -> bool:
    if latched is None:
        return True
    dec = tracker.spec.decomposition
    j = min(tracker.pointer, len(dec) - 1)
    return dec[j] != latched


def run_episode(policy: Policy, spec: sw.TaskSpec, seed: int, limits: Limits = Limits(),
                state: sw.SimState | None = None,
                perturb: Callable[[sw.SimState, int, sw.Subtask], sw.SimState] | None = None,
                count_recoveries: bool = False) -> tuple[EpisodeResult, sw.SimState]:
    """Think/act loop. Think refreshes the latched skill; Act executes one chunk atomically.

    Think is forced at the start and by the progress watchdog; a Think tick is
    always followed by an Act tick.
    """
    st = state.copy() if state is not None else sw.reset(spec, seed)
    tracker = sw.ProgressTracker(spec)
    tracker.update(st)
    planner = OraclePlanner(spec, tracker) if policy.planner == "oracle" else LearnedPlanner(policy.bundle, spec)
    bundle = policy.bundle
    H = bundle.cfg.horizon if bundle is not None else sw.HORIZON
    rng = np.random.default_rng([int(seed), 4242])
    ticks: list[str] = []
    route_trace: list[list] = []
    act_trace: list[list] = []
    think_steps: list[int] = []
    latched_names: list[str] = []
    latched: sw.Subtask | None = None
    decision: RouteDecision | None = None
    steps = 0
    last_progress = 0
    best_pointer = tracker.pointer
    just_thought = False
    reason = ""
    while not tracker.done:
        if steps >= limits.max_steps:
            reason = "timeout"
            break
        watchdog = latched is not None and steps - last_progress + H > limits.watchdog
        if latched is None or (watchdog and not just_thought):
            think_now = True
        elif just_thought:
            think_now = False
        elif policy.mode == "oracle":
            think_now = _oracle_wants_think(latched, tracker)
        elif policy.mode == "learned":
            obs = encode_observation(st, spec)
            f = mode_features(obs, target_features(st, latched))
            think_now = mode_logit(bundle, latched.skill, f) > 0.0
        else:
            think_now = False
        if think_now:
            if len(think_steps) >= limits.max_thinks:
                reason = "think_limit"
                break
            out = planner.think(st)
            latched = out.subtask
            latched_names.append(out.sigma)
            if bundle is not None and bundle.cfg.variant == "sg_moe":
                decision = bundle.route_skill(out.sigma)
                route_trace.append([len(think_steps), decision.k, decision.w])
            else:
                decision = None
                route_trace.append([len(think_steps), -1, 0.0])
            think_steps.append(steps)
            ticks.append(THINK)
            last_progress = steps
            just_thought = True
            continue
        just_thought = False
        ticks.append(ACT)
        if policy.actor == "scripted":
            chunk = scripted_chunk(st, latched, H, rng, policy.actor_noise)
        else:
            obs = encode_observation(st, spec)
            ctx = np.concatenate([obs, target_features(st, latched)])
            chunk = act(bundle, ctx, decision, policy.flow_steps, rng)
        start = steps
        for a in chunk:
            st = sw.step(st, a)
            steps += 1
            if perturb is not None:
                st = perturb(st, steps, latched)
            tracker.update(st)
            if tracker.pointer > best_pointer:
                best_pointer = tracker.pointer
                last_progress = steps
            elif tracker.pointer < best_pointer:
                best_pointer = tracker.pointer
            if tracker.done:
                break
        # [think index, expert, gate, env steps executed]
        act_trace.append([len(think_steps) - 1] + ([decision.k, decision.w] if decision else [-1, 0.0]) + [steps - start])
    success = tracker.done and (count_recoveries or tracker.regressions == 0)
    if tracker.done and not success:
        reason = "recovered"
    subs = [{"skill": s.skill, "target": s.target, "done": i < tracker.pointer} for i, s in enumerate(spec.decomposition)]
    res = EpisodeResult(spec.name, int(seed), bool(success), subs, steps, rle(ticks), route_trace, act_trace,
                        think_steps, latched_names, tracker.regressions, reason)
    return res, st


def make_runner(policy: Policy, limits: Limits = Limits(), count_recoveries: bool = False):
    """Adapter for simworld.evaluate_chain."""

    def runner(st, spec, seed):
        res, st2 = run_episode(policy, spec, seed, limits, state=st, count_recoveries=count_recoveries)
        return res.to_json(), st2

    return runner


# -- perturbation harness --------------------------------------------------

def drop_block_perturbation(after_steps_in_place: int = 6):
    """Teleport the carried block back to the table once a latched Place has run for a few steps."""
    state = {"armed": True, "since": None, "fired_at": None}

    def perturb(st: sw.SimState, steps: int, latched: sw.Subtask | None = None) -> sw.SimState:
        if not state["armed"] or st.held < 0 or latched is None or latched.skill != "Place":
            return st
        if state["since"] is None:
            state["since"] = steps
            return st
        if steps - state["since"] < after_steps_in_place:
            return st
        st = st.copy()
        i = st.held
        st.held = -1
        st.hold_offset = np.zeros(3)
        st.obj_pos[i] = np.array([st.obj_pos[i, 0], st.obj_pos[i, 1], sw.TABLE_Z])
        state["armed"] = False
        state["fired_at"] = steps
        return st

    perturb.info = state
    return perturb


def perturbation_trial(policy: Policy, seed: int, limits: Limits = Limits(), task: str = "objects_in_plate") -> dict:
    """One seeded Fig.-5-style trial: returns timing of the re-think and the skill latched by it."""
    spec = sw.TASKS[task]
    p = drop_block_perturbation()
    res, _ = run_episode(policy, spec, seed, limits, perturb=p, count_recoveries=True)
    fired = p.info["fired_at"]
    rethink = next(((s, n) for s, n in zip(res.think_steps, res.latched) if fired is not None and s >= fired), None)
    return {
        "seed": seed, "fired_at": fired, "rethink_at": rethink[0] if rethink else None,
        "relatched": rethink[1] if rethink else None,
        "delay": (rethink[0] - fired) if rethink else None,
        "success": res.success, "result": res,
    }
