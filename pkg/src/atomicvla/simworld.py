"""Deterministic planar-tabletop kinematic simulator with scripted skill experts.

Geometry: the table spans x, y in [0, 0.6] m. Articulated fixtures (drawer,
microwave door) slide along -y when opened, so +y points into a fixture.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .trajcore import Episode, EpisodeSet, Frame, Pose, TrajMeta, Trajectory, round9, wrap_angle

log = logging.getLogger(__name__)

# action bounds per step: dx, dy, dz (m), dyaw (rad); gripper command in [0, 1]
STEP_BOUNDS = np.array([0.02, 0.02, 0.02, 0.1])
SPEED = 0.015
YAW_SPEED = 0.08
GRIP_RATE = 0.25
GRASP_RADIUS = 0.03
HOVER_Z = 0.18
LIFT_Z = 0.17
TABLE_Z = 0.02  # block centre resting on the table
PLATE_Z = 0.03
FIXTURE_TRAVEL = 0.15
BUTTON_PRESS_Z = 0.035
DIAL_GOAL = 1.2
ARRIVE_TOL = 0.005
WORKSPACE = np.array([[0.0, 0.6], [0.0, 0.6], [0.0, 0.3]])
DEFAULT_NOISE = 0.05  # fraction of the motion bounds
HORIZON = 8


class SimError(RuntimeError):
    pass


class PlacementError(SimError):
    pass


class FeasibilityError(SimError):
    pass


class GenerationError(SimError):
    pass


# -- scene layouts ---------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    name: str
    n_blocks: int
    block_region: tuple[float, float, float, float]  # x0, x1, y0, y1
    plate_region: tuple[float, float, float, float]
    plate_radius: float
    fixtures: tuple[str, ...]
    fixture_pos: Mapping[str, tuple[float, float, float]]
    fixture_jitter: float
    home: tuple[float, float, float]
    tasks: tuple[str, ...]
    targets: tuple[str, ...]


LAYOUTS = {
    "tabletop": Layout(
        name="tabletop",
        n_blocks=3,
        block_region=(0.06, 0.24, 0.34, 0.52),
        plate_region=(0.38, 0.50, 0.45, 0.52),
        plate_radius=0.06,
        fixtures=("drawer", "button", "dial"),
        fixture_pos={"drawer": (0.50, 0.30, 0.06), "button": (0.10, 0.14, 0.03), "dial": (0.22, 0.18, 0.05)},
        fixture_jitter=0.02,
        home=(0.34, 0.08, HOVER_Z),
        tasks=(
            "grasp_block", "place_block", "open_drawer", "close_drawer",
            "turn_dial", "press_button", "objects_in_plate", "object_into_drawer",
        ),
        targets=("block0", "block1", "block2", "plate", "drawer", "dial", "button"),
    ),
    "kitchen": Layout(
        name="kitchen",
        n_blocks=1,
        block_region=(0.06, 0.22, 0.36, 0.52),
        plate_region=(0.26, 0.34, 0.46, 0.52),
        plate_radius=0.06,
        fixtures=("drawer", "microwave"),
        fixture_pos={"drawer": (0.14, 0.24, 0.06), "microwave": (0.48, 0.36, 0.06)},
        fixture_jitter=0.02,
        home=(0.30, 0.08, HOVER_Z),
        tasks=("close_microwave", "open_microwave", "object_into_microwave"),
        targets=("block0", "plate", "drawer", "microwave"),
    ),
}

# template name -> (layout, initial-condition overrides)
TEMPLATES: dict[str, tuple[str, dict]] = {
    "tabletop": ("tabletop", {}),
    "tabletop_held": ("tabletop", {"held": "block0"}),
    "tabletop_drawer_open": ("tabletop", {"drawer": 1.0}),
    "kitchen": ("kitchen", {}),
    "kitchen_door_open": ("kitchen", {"microwave": 1.0}),
}

ARTICULATED = ("drawer", "microwave")


# -- state -----------------------------------------------------------------

@dataclass
class SimState:
    template: str
    layout: str
    agent: np.ndarray  # x, y, z, yaw
    grip: float
    obj_ids: tuple[str, ...]
    obj_pos: np.ndarray  # (n, 3)
    held: int = -1
    hold_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    plate: np.ndarray = field(default_factory=lambda: np.zeros(2))
    fixture_base: dict[str, np.ndarray] = field(default_factory=dict)
    ext: dict[str, float] = field(default_factory=dict)  # articulated fixtures, 0 closed .. 1 open
    button: bool = False
    dial: float = 0.0
    attached: str | None = None
    attach_ref: tuple[float, float] = (0.0, 0.0)  # (agent yaw, dial) at grasp for the dial
    seed: int = 0
    tick: int = 0
    clamped: int = 0
    contained: dict[int, str] = field(default_factory=dict)  # object index -> fixture it rests inside

    def copy(self) -> "SimState":
        return copy.deepcopy(self)

    def tobytes(self) -> bytes:
        parts = [
            self.template.encode(), self.agent.tobytes(), np.float64(self.grip).tobytes(),
            self.obj_pos.tobytes(), np.int64(self.held).tobytes(), self.hold_offset.tobytes(),
            self.plate.tobytes(), np.float64(self.dial).tobytes(), bytes([self.button]),
            str(self.attached).encode(), np.array(self.attach_ref).tobytes(),
            np.array([self.seed, self.tick, self.clamped], dtype=np.int64).tobytes(),
        ]
        for k in sorted(self.fixture_base):
            parts.append(k.encode() + self.fixture_base[k].tobytes())
        for k in sorted(self.ext):
            parts.append(k.encode() + np.float64(self.ext[k]).tobytes())
        for i in sorted(self.contained):
            parts.append(f"in{i}:{self.contained[i]}".encode())
        return b"|".join(parts)

    @property
    def pose(self) -> Pose:
        return Pose(*self.agent)

    def obj_index(self, oid: str) -> int:
        try:
            return self.obj_ids.index(oid)
        except ValueError:
            raise SimError(f"no object {oid!r} in template {self.template!r}") from None

    def handle(self, fixture: str) -> np.ndarray:
        base = self.fixture_base[fixture]
        if fixture in ARTICULATED:
            return base + np.array([0.0, -FIXTURE_TRAVEL * self.ext[fixture], 0.0])
        return base.copy()


def held_name(st: "SimState") -> str | None:
    return st.obj_ids[st.held] if st.held >= 0 else None


def _layout_of(template: str) -> tuple[Layout, dict]:
    if template not in TEMPLATES:
        raise SimError(f"unknown scene template {template!r}")
    lname, init = TEMPLATES[template]
    return LAYOUTS[lname], init


def reset(spec: "TaskSpec | str", seed: int) -> SimState:
    """Instantiate a scene with seeded object placements inside the template regions."""
    template = spec if isinstance(spec, str) else spec.template
    lay, init = _layout_of(template)
    rng = np.random.default_rng([int(seed), 7919])
    x0, x1, y0, y1 = lay.block_region
    min_sep = 0.07
    pts: list[np.ndarray] = []
    for _ in range(lay.n_blocks):
        for _attempt in range(200):
            p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            if all(np.linalg.norm(p - q) >= min_sep for q in pts):
                pts.append(p)
                break
        else:
            raise PlacementError(f"template {template!r}: block region too small for {lay.n_blocks} blocks")
    obj_pos = np.array([[p[0], p[1], TABLE_Z] for p in pts]).reshape(-1, 3)
    px0, px1, py0, py1 = lay.plate_region
    plate = np.array([rng.uniform(px0, px1), rng.uniform(py0, py1)])
    jit = lay.fixture_jitter
    fixture_base = {}
    for name in lay.fixtures:
        fx, fy, fz = lay.fixture_pos[name]
        fixture_base[name] = np.array([fx + rng.uniform(-jit, jit), fy + rng.uniform(-jit, jit), fz])
    hx, hy, hz = lay.home
    agent = np.array([hx + rng.uniform(-0.02, 0.02), hy + rng.uniform(-0.02, 0.02), hz, 0.0])
    st = SimState(
        template=template, layout=lay.name, agent=agent, grip=1.0,
        obj_ids=tuple(f"block{i}" for i in range(lay.n_blocks)), obj_pos=obj_pos,
        plate=plate, fixture_base=fixture_base,
        ext={f: 0.0 for f in lay.fixtures if f in ARTICULATED}, seed=int(seed),
    )
    for f in ARTICULATED:
        if f in init:
            st.ext[f] = float(init[f])
    if "held" in init:
        i = st.obj_index(init["held"])
        st.grip = 0.0
        st.held = i
        st.hold_offset = np.zeros(3)
        st.obj_pos[i] = st.agent[:3]
    return st


def _surface_z(st: SimState, xy: np.ndarray) -> float:
    if np.linalg.norm(xy - st.plate) <= LAYOUTS[st.layout].plate_radius:
        return PLATE_Z
    return TABLE_Z


def step(state: SimState, action: Sequence[float]) -> SimState:
    """One kinematic tick. Out-of-bounds actions are clamped and counted in ``clamped``."""
    st = state.copy()
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (5,) or not np.all(np.isfinite(a)):
        raise SimError(f"action must be 5 finite values, got {action!r}")
    d = np.clip(a[:4], -STEP_BOUNDS, STEP_BOUNDS)
    cmd = float(np.clip(a[4], 0.0, 1.0))
    if np.any(d != a[:4]) or cmd != a[4]:
        st.clamped += 1

    if st.attached in ARTICULATED:
        base = st.fixture_base[st.attached]
        y = st.agent[1] + d[1]
        e = float(np.clip((base[1] - y) / FIXTURE_TRAVEL, 0.0, 1.0))
        if st.attached == "drawer":
            # contents ride with the drawer
            for i, f in st.contained.items():
                if f == "drawer":
                    st.obj_pos[i, 1] -= FIXTURE_TRAVEL * (e - st.ext["drawer"])
        st.ext[st.attached] = e
        st.agent[1] = base[1] - FIXTURE_TRAVEL * e
    elif st.attached == "dial":
        st.agent[3] = wrap_angle(st.agent[3] + d[3])
        yaw0, dial0 = st.attach_ref
        st.dial = wrap_angle(dial0 + wrap_angle(st.agent[3] - yaw0))
    else:
        st.agent[:3] = np.clip(st.agent[:3] + d[:3], WORKSPACE[:, 0], WORKSPACE[:, 1])
        st.agent[3] = wrap_angle(st.agent[3] + d[3])

    prev = st.grip
    st.grip = float(np.clip(prev + np.clip(cmd - prev, -GRIP_RATE, GRIP_RATE), 0.0, 1.0))
    if prev >= 0.5 > st.grip:
        _try_grasp(st)
    elif prev < 0.5 <= st.grip:
        _release(st)

    if st.held >= 0:
        st.obj_pos[st.held] = st.agent[:3] + st.hold_offset
    if "button" in st.fixture_base and not st.button:
        b = st.fixture_base["button"]
        if np.hypot(*(st.agent[:2] - b[:2])) <= GRASP_RADIUS and st.agent[2] <= BUTTON_PRESS_Z:
            st.button = True
    st.tick += 1
    return st


def _try_grasp(st: SimState) -> None:
    p = st.agent[:3]
    best, best_d = None, GRASP_RADIUS
    for i in range(len(st.obj_ids)):
        dist = float(np.linalg.norm(st.obj_pos[i] - p))
        if dist <= best_d:
            best, best_d = ("obj", i), dist
    for f in st.fixture_base:
        if f == "button":
            continue
        dist = float(np.linalg.norm(st.handle(f) - p))
        if dist <= best_d:
            best, best_d = ("fix", f), dist
    if best is None:
        return
    if best[0] == "obj":
        st.held = best[1]
        st.contained.pop(best[1], None)
        st.hold_offset = st.obj_pos[best[1]] - p
    else:
        st.attached = best[1]
        if best[1] == "dial":
            st.attach_ref = (float(st.agent[3]), float(st.dial))


def _release(st: SimState) -> None:
    if st.held >= 0:
        i = st.held
        st.held = -1
        st.hold_offset = np.zeros(3)
        st.obj_pos[i, 2] = _surface_z(st, st.obj_pos[i, :2])
        for f in st.ext:
            if st.ext[f] >= 0.9 and _inside(st, i, f):
                st.contained[i] = f
    st.attached = None


# -- targets and predicates ------------------------------------------------

def interior(st: SimState, fixture: str) -> np.ndarray:
    """Floor point inside an articulated fixture; the drawer box moves with its handle, the oven does not."""
    if fixture == "drawer":
        h = st.handle(fixture)
        return np.array([h[0], h[1] + 0.08, TABLE_Z])
    b = st.fixture_base[fixture]
    return np.array([b[0], b[1] - FIXTURE_TRAVEL + 0.08, TABLE_Z])


def _inside(st: SimState, i: int, fixture: str) -> bool:
    c = interior(st, fixture)
    p = st.obj_pos[i]
    return bool(abs(p[0] - c[0]) <= 0.05 and abs(p[1] - c[1]) <= 0.04)


def place_point(st: SimState, target: str) -> np.ndarray:
    if target == "plate":
        return np.array([st.plate[0], st.plate[1], PLATE_Z])
    if target in ARTICULATED:
        return interior(st, target)
    raise SimError(f"{target!r} is not a placement target")


def in_region(st: SimState, i: int, target: str) -> bool:
    if target == "plate":
        return bool(np.linalg.norm(st.obj_pos[i, :2] - st.plate) <= LAYOUTS[st.layout].plate_radius)
    if target in ARTICULATED:
        return st.contained.get(i) == target
    raise SimError(f"{target!r} is not a placement target")


def target_point(st: SimState, skill: str, target: str) -> np.ndarray:
    """The point the agent works at for (skill, target)."""
    if skill == "Place":
        return place_point(st, target)
    if target.startswith("block"):
        return st.obj_pos[st.obj_index(target)].copy()
    if target in st.fixture_base:
        return st.handle(target)
    raise SimError(f"unknown target {target!r} for {skill}")


def compatible(st: SimState, skill: str, target: str) -> bool:
    """Whether (skill, target) names something the scene can act on; ignores what is held."""
    if skill == "Pick":
        return target.startswith("block") and target in st.obj_ids
    if skill == "Place":
        return target == "plate" or (target in ARTICULATED and target in st.fixture_base)
    if skill in ("Open", "Close"):
        return target in ARTICULATED and target in st.ext
    if skill == "Turn":
        return target == "dial" and target in st.fixture_base
    if skill == "Press":
        return target == "button" and target in st.fixture_base
    return False


@dataclass(frozen=True)
class Subtask:
    skill: str
    target: str
    obj: str | None = None  # object carried by a Place


def subtask_effect(st: SimState, sub: Subtask) -> bool:
    """Persistent world effect of a subtask, ignoring where the agent is."""
    s, t = sub.skill, sub.target
    if s == "Pick":
        return st.held == st.obj_index(t)
    if s == "Place":
        i = st.obj_index(sub.obj) if sub.obj else -1
        return i >= 0 and st.held != i and in_region(st, i, t)
    if s == "Open":
        return st.ext[t] >= 0.9
    if s == "Close":
        return st.ext[t] <= 0.1
    if s == "Press":
        return bool(st.button)
    if s == "Turn":
        return abs(wrap_angle(st.dial - DIAL_GOAL)) <= 0.1
    raise SimError(f"unknown skill {s!r}")


def subtask_done(st: SimState, sub: Subtask) -> bool:
    """Effect achieved and the agent has let go and retreated to lift height."""
    if not subtask_effect(st, sub):
        return False
    high = st.agent[2] >= LIFT_Z
    if sub.skill == "Pick":
        return bool(high)
    if sub.skill == "Place":
        return bool(high and st.grip >= 0.5)
    return bool(high and st.attached is None)


# -- tasks -----------------------------------------------------------------

@dataclass
class TaskSpec:
    name: str
    template: str
    decomposition: list[Subtask]

    def __post_init__(self):
        _layout_of(self.template)
        init = TEMPLATES[self.template][1]
        self.decomposition = resolve_objects(self.decomposition, init.get("held"))

    @property
    def layout(self) -> Layout:
        return LAYOUTS[TEMPLATES[self.template][0]]

    def to_json(self) -> dict:
        return {"name": self.name, "template": self.template, "decomposition": [[s.skill, s.target] for s in self.decomposition]}

    @classmethod
    def from_json(cls, d: Mapping) -> "TaskSpec":
        try:
            return cls(str(d["name"]), str(d["template"]), [Subtask(str(s), str(t)) for s, t in d["decomposition"]])
        except (KeyError, TypeError, ValueError) as e:
            raise SimError(f"bad task spec: {e}") from None


def resolve_objects(decomp: Sequence[Subtask], held: str | None = None) -> list[Subtask]:
    """Bind every Place to the object carried into it."""
    carried = held
    out = []
    for sub in decomp:
        if sub.skill == "Pick":
            carried = sub.target
        if sub.skill == "Place":
            obj = sub.obj or carried
            if obj is None:
                raise SimError(f"Place into {sub.target!r} has nothing to carry")
            sub = Subtask("Place", sub.target, obj)
            carried = None
        out.append(sub)
    return out


def _t(name, template, *pairs):
    return TaskSpec(name, template, [Subtask(s, t) for s, t in pairs])


TASKS: dict[str, TaskSpec] = {
    t.name: t
    for t in [
        _t("grasp_block", "tabletop", ("Pick", "block0")),
        _t("place_block", "tabletop_held", ("Place", "plate")),
        _t("open_drawer", "tabletop", ("Open", "drawer")),
        _t("close_drawer", "tabletop_drawer_open", ("Close", "drawer")),
        _t("turn_dial", "tabletop", ("Turn", "dial")),
        _t("press_button", "tabletop", ("Press", "button")),
        _t("objects_in_plate", "tabletop", ("Pick", "block0"), ("Place", "plate"), ("Pick", "block1"), ("Place", "plate")),
        _t("object_into_drawer", "tabletop", ("Open", "drawer"), ("Pick", "block0"), ("Place", "drawer")),
        _t("close_microwave", "kitchen_door_open", ("Close", "microwave")),
        _t("open_microwave", "kitchen", ("Open", "microwave")),
        _t("object_into_microwave", "kitchen", ("Open", "microwave"), ("Pick", "block0"), ("Place", "microwave"), ("Close", "microwave")),
    ]
}

SHORT_TASK_BY_SKILL = {
    "Pick": "grasp_block", "Place": "place_block", "Open": "open_drawer",
    "Close": "close_drawer", "Turn": "turn_dial", "Press": "press_button",
}

TASK_SUITES: dict[str, tuple[str, ...]] = {
    "five_skill": ("grasp_block", "place_block", "open_drawer", "close_drawer", "turn_dial", "objects_in_plate", "object_into_drawer"),
    "press": ("press_button",),
    "six_skill": ("grasp_block", "place_block", "open_drawer", "close_drawer", "turn_dial", "press_button", "objects_in_plate", "object_into_drawer"),
    "kitchen": ("close_microwave", "open_microwave", "object_into_microwave"),
}
TASK_SUITES["all"] = TASK_SUITES["six_skill"] + TASK_SUITES["kitchen"]


def load_task_file(path) -> TaskSpec:
    with open(path) as fh:
        return TaskSpec.from_json(json.load(fh))


def suite_specs(suite: str | Sequence[str]) -> list[TaskSpec]:
    names = TASK_SUITES[suite] if isinstance(suite, str) else suite
    out = []
    for n in names:
        if n not in TASKS:
            raise SimError(f"unknown task {n!r}")
        out.append(TASKS[n])
    return out


# -- scripted experts ------------------------------------------------------

def _toward(st: SimState, goal: np.ndarray, cmd: float) -> np.ndarray:
    d = np.clip(goal - st.agent[:3], -SPEED, SPEED)
    return np.array([d[0], d[1], d[2], 0.0, cmd])


def _approach(st: SimState, p: np.ndarray, z: float, cmd: float) -> np.ndarray | None:
    """Align above p at hover height, then descend to z. None once there."""
    if np.hypot(*(st.agent[:2] - p[:2])) > 0.01:
        return _toward(st, np.array([p[0], p[1], HOVER_Z]), cmd)
    if st.agent[2] > z + ARRIVE_TOL or np.abs(st.agent[:2] - p[:2]).max() > ARRIVE_TOL:
        return _toward(st, np.array([p[0], p[1], z]), cmd)
    return None


def _at_bottom(st: SimState, p: np.ndarray) -> bool:
    # hysteresis: once the gripper has started to act at the goal, keep acting
    return st.agent[2] <= p[2] + 2 * ARRIVE_TOL and np.hypot(*(st.agent[:2] - p[:2])) <= 0.01


def _retreat(st: SimState, cmd: float) -> np.ndarray:
    """Let the gripper settle, then rise straight to hover height."""
    if abs(st.grip - cmd) > 1e-9:
        return np.array([0.0, 0.0, 0.0, 0.0, cmd])
    return _toward(st, np.array([st.agent[0], st.agent[1], HOVER_Z]), cmd)


def expert_action(st: SimState, sub: Subtask) -> np.ndarray:
    """Noise-free action of the scripted expert for (skill, target); a function of state only."""
    s, t = sub.skill, sub.target
    if s == "Pick":
        if not t.startswith("block"):
            raise FeasibilityError(f"cannot pick {t!r}")
        i = st.obj_index(t)
        if st.held == i:
            return _retreat(st, 0.0)
        if st.held >= 0:
            raise FeasibilityError(f"Pick {t}: already holding {st.obj_ids[st.held]}")
        p = st.obj_pos[i]
        if st.grip < 1.0 and _at_bottom(st, p):
            return np.array([0.0, 0.0, 0.0, 0.0, 0.0])
        a = _approach(st, p, p[2], 1.0)
        return a if a is not None else np.array([0.0, 0.0, 0.0, 0.0, 0.0])
    if s == "Place":
        i = st.obj_index(sub.obj) if sub.obj else st.held
        if st.held == i and i >= 0:
            p = place_point(st, t)
            if st.grip > 0.0 and _at_bottom(st, p):
                return np.array([0.0, 0.0, 0.0, 0.0, 1.0])
            a = _approach(st, p, p[2], 0.0)
            return a if a is not None else np.array([0.0, 0.0, 0.0, 0.0, 1.0])
        return _retreat(st, 1.0)
    if s in ("Open", "Close"):
        if t not in ARTICULATED or t not in st.ext:
            raise FeasibilityError(f"{s} needs an articulated fixture, got {t!r}")
        goal = 1.0 if s == "Open" else 0.0
        if st.attached == t:
            base = st.fixture_base[t]
            if abs(st.ext[t] - goal) > 1e-3:
                dy = np.clip(base[1] - FIXTURE_TRAVEL * goal - st.agent[1], -SPEED, SPEED)
                return np.array([0.0, dy, 0.0, 0.0, 0.0])
            return np.array([0.0, 0.0, 0.0, 0.0, 1.0])
        if (s == "Open" and st.ext[t] >= 0.9) or (s == "Close" and st.ext[t] <= 0.1):
            return _retreat(st, 1.0)
        if st.held >= 0:
            raise FeasibilityError(f"{s} {t}: hands are full")
        h = st.handle(t)
        if st.grip < 1.0 and _at_bottom(st, h):
            return np.array([0.0, 0.0, 0.0, 0.0, 0.0])
        a = _approach(st, h, h[2], 1.0)
        return a if a is not None else np.array([0.0, 0.0, 0.0, 0.0, 0.0])
    if s == "Turn":
        if t != "dial" or "dial" not in st.fixture_base:
            raise FeasibilityError(f"Turn needs the dial, got {t!r}")
        err = wrap_angle(DIAL_GOAL - st.dial)
        if st.attached == "dial":
            if abs(err) > 0.01:
                return np.array([0.0, 0.0, 0.0, float(np.clip(err, -YAW_SPEED, YAW_SPEED)), 0.0])
            return np.array([0.0, 0.0, 0.0, 0.0, 1.0])
        if abs(err) <= 0.05:
            return _retreat(st, 1.0)
        if st.held >= 0:
            raise FeasibilityError("Turn: hands are full")
        h = st.handle("dial")
        if st.grip < 1.0 and _at_bottom(st, h):
            return np.array([0.0, 0.0, 0.0, 0.0, 0.0])
        a = _approach(st, h, h[2], 1.0)
        return a if a is not None else np.array([0.0, 0.0, 0.0, 0.0, 0.0])
    if s == "Press":
        if t != "button" or "button" not in st.fixture_base:
            raise FeasibilityError(f"Press needs the button, got {t!r}")
        if st.button:
            return _retreat(st, 0.0)
        if st.held >= 0:
            raise FeasibilityError("Press: hands are full")
        b = st.fixture_base["button"]
        if np.hypot(*(st.agent[:2] - b[:2])) > 0.01:
            return _toward(st, np.array([b[0], b[1], HOVER_Z]), 0.0)
        return _toward(st, np.array([b[0], b[1], BUTTON_PRESS_Z - 0.005]), 0.0)
    raise FeasibilityError(f"unknown skill {s!r}")


def noisy(action: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    """Gaussian noise on the motion components only; values rounded to the serialized precision."""
    a = np.array(action, dtype=np.float64)
    if noise > 0:
        a[:4] += rng.normal(0.0, 1.0, 4) * noise * STEP_BOUNDS
    a[:4] = np.clip(a[:4], -STEP_BOUNDS, STEP_BOUNDS)
    return np.array([round9(v) for v in a])


def scripted_expert(st: SimState, skill: str, target: str, rng: np.random.Generator | None = None,
                    noise: float = DEFAULT_NOISE, obj: str | None = None) -> np.ndarray:
    sub = Subtask(skill, target, obj)
    a = expert_action(st, sub)
    return noisy(a, rng, noise) if rng is not None else noisy(a, np.random.default_rng(0), 0.0)


SKILL_BUDGET = {"Pick": 90, "Place": 90, "Open": 110, "Close": 110, "Turn": 110, "Press": 90}


def run_expert(st: SimState, sub: Subtask, rng: np.random.Generator, noise: float = DEFAULT_NOISE,
               budget: int | None = None) -> tuple[SimState, list[np.ndarray], list[SimState]]:
    """Roll the expert until its predicate holds. Returns (final state, actions, states before each action)."""
    budget = budget or SKILL_BUDGET[sub.skill]
    actions, states = [], []
    for _ in range(budget):
        if subtask_done(st, sub):
            return st, actions, states
        a = noisy(expert_action(st, sub), rng, noise)
        states.append(st)
        actions.append(a)
        st = step(st, a)
    if subtask_done(st, sub):
        return st, actions, states
    raise FeasibilityError(f"expert {sub.skill}({sub.target}) exceeded its {budget}-step budget")


# -- progress tracking -----------------------------------------------------

class ProgressTracker:
    """Chain pointer over a task decomposition.

    Completion is recorded when the current subtask's predicate holds; a
    completed subtask whose effect is lost (and no later effect, the current
    subtask's included, explains it) sends the pointer back, which is how re-execution arises.
    """

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.pointer = 0
        self.regressions = 0

    @property
    def n(self) -> int:
        return len(self.spec.decomposition)

    @property
    def done(self) -> bool:
        return self.pointer >= self.n

    def update(self, st: SimState) -> int:
        dec = self.spec.decomposition
        if not self.done:
            for j in range(self.pointer):
                if not subtask_effect(st, dec[j]) and not any(subtask_effect(st, dec[k]) for k in range(j + 1, self.pointer + 1)):
                    self.pointer = j
                    self.regressions += 1
                    break
        while self.pointer < self.n and subtask_done(st, dec[self.pointer]):
            self.pointer += 1
        return self.pointer


# -- dataset generation ----------------------------------------------------

def pad_chunk(actions: Sequence[np.ndarray], horizon: int, last_cmd: float) -> np.ndarray:
    out = np.zeros((horizon, 5))
    out[:, 4] = last_cmd
    for i, a in enumerate(actions[:horizon]):
        out[i] = a
    return out


def rollout_task(spec: TaskSpec, seed: int, noise: float = DEFAULT_NOISE, horizon: int = HORIZON):
    """Scripted rollout. Returns (states, actions, subtask index per frame)."""
    st = reset(spec, seed)
    rng = np.random.default_rng([int(seed), 104729])
    states: list[SimState] = []
    actions: list[np.ndarray] = []
    sub_idx: list[int] = []
    for j, sub in enumerate(spec.decomposition):
        st, acts, sts = run_expert(st, sub, rng, noise)
        states.extend(sts)
        actions.extend(acts)
        sub_idx.extend([j] * len(acts))
    states.append(st)
    sub_idx.append(len(spec.decomposition) - 1)
    return states, actions, sub_idx


def episode_from_rollout(spec: TaskSpec, seed: int, states, actions, sub_idx, horizon: int = HORIZON,
                         episode_id: int = 0) -> Episode:
    n = len(states)
    frames = [Frame(i, Pose(*(round9(v) for v in s.agent)), round9(s.grip)) for i, s in enumerate(states)]
    skills = [spec.decomposition[j].skill for j in sub_idx]
    modes = ["Think" if i == 0 or sub_idx[i] != sub_idx[i - 1] else "Act" for i in range(n)]
    chunks = np.zeros((n, horizon * 5))
    for i in range(n):
        j = sub_idx[i]
        end = i
        while end < len(actions) and sub_idx[end] == j:
            end += 1
        acts = actions[i:min(end, i + horizon)]
        last_cmd = acts[-1][4] if acts else (actions[i - 1][4] if i > 0 and actions else states[i].grip)
        chunks[i] = pad_chunk(acts, horizon, last_cmd).reshape(-1)
    meta = TrajMeta(task=spec.name, seed=int(seed), source="scripted", episode=episode_id)
    return Episode(Trajectory(frames, meta), skills, modes, chunks)


def generate_dataset(specs: Sequence[TaskSpec], n_per_spec: int, seed: int, noise: float = DEFAULT_NOISE,
                     horizon: int = HORIZON) -> EpisodeSet:
    eps: list[Episode] = []
    discarded = 0
    total = 0
    ep_id = 0
    for si, spec in enumerate(specs):
        for k in range(n_per_spec):
            ep_seed = int(seed) * 100_003 + si * 1_009 + k
            total += 1
            try:
                states, actions, sub_idx = rollout_task(spec, ep_seed, noise, horizon)
            except FeasibilityError as e:
                discarded += 1
                log.warning("discarding %s seed %d: %s", spec.name, ep_seed, e)
                continue
            eps.append(episode_from_rollout(spec, ep_seed, states, actions, sub_idx, horizon, ep_id))
            ep_id += 1
    if total and discarded / total > 0.05:
        raise GenerationError(f"{discarded}/{total} episodes discarded (> 5%)")
    return EpisodeSet(eps)


def replay_states(ep: Episode) -> list[SimState]:
    """Rebuild simulator states of a generated episode from its executed actions."""
    spec = TASKS.get(ep.meta.task)
    if spec is None:
        raise SimError(f"unknown task {ep.meta.task!r}")
    if ep.actions is None:
        raise SimError("episode has no action chunks to replay")
    st = reset(spec, ep.meta.seed)
    out = [st]
    for i in range(len(ep.traj) - 1):
        st = step(st, ep.actions[i, :5])
        out.append(st)
    return out


# -- chained evaluation ----------------------------------------------------

@dataclass
class ChainMetrics:
    length: int
    n: int
    completed: list[int]  # rollouts that completed at least i+1 tasks
    avg_len: float
    rollouts: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"length": self.length, "n": self.n, "completed": list(self.completed), "avg_len": self.avg_len}

    def csv(self) -> str:
        rows = ["rollout,seed,chain,completed,success"]
        for r in self.rollouts:
            rows.append(f"{r['rollout']},{r['seed']},{'|'.join(r['chain'])},{r['completed']},{int(r['completed'] == self.length)}")
        return "\n".join(rows) + "\n"


def chain_metrics(completed_per_rollout: Sequence[int], length: int) -> tuple[list[int], float]:
    n = len(completed_per_rollout)
    stage = [sum(1 for c in completed_per_rollout if c >= i + 1) for i in range(length)]
    avg = sum(stage) / n if n else 0.0
    return stage, avg


CHAIN_TASKS = {
    # name -> (preconditions, effects) over a symbolic state
    "grasp_block": (lambda s: s["held"] is None and s["free_blocks"], None),
    "place_in_plate": (lambda s: s["held"] is not None, None),
    "open_drawer": (lambda s: s["drawer"] == "closed" and s["held"] is None, None),
    "close_drawer": (lambda s: s["drawer"] == "open" and s["held"] is None, None),
    "turn_dial": (lambda s: not s["dial"] and s["held"] is None, None),
    "press_button": (lambda s: not s["button"] and s["held"] is None, None),
}


def sample_chain(length: int, rng: np.random.Generator, skills: Iterable[str] = ("Pick", "Place", "Open", "Close", "Turn")) -> list[TaskSpec]:
    """Seeded feasible sequence of single-skill tasks in one persistent tabletop scene."""
    skills = set(skills)
    allowed = {
        "grasp_block": "Pick", "place_in_plate": "Place", "open_drawer": "Open",
        "close_drawer": "Close", "turn_dial": "Turn", "press_button": "Press",
    }
    names = [n for n, s in allowed.items() if s in skills]
    for _attempt in range(1000):
        sym = {"held": None, "free_blocks": ["block0", "block1", "block2"], "drawer": "closed", "dial": False, "button": False}
        chain: list[TaskSpec] = []
        for _ in range(length):
            options = [n for n in names if CHAIN_TASKS[n][0](sym)]
            if not options:
                break
            n = options[int(rng.integers(len(options)))]
            if n == "grasp_block":
                b = sym["free_blocks"].pop(0)
                sym["held"] = b
                chain.append(TaskSpec("grasp_block", "tabletop", [Subtask("Pick", b)]))
            elif n == "place_in_plate":
                chain.append(TaskSpec("place_block", "tabletop", [Subtask("Place", "plate", sym["held"])]))
                sym["held"] = None
            elif n == "open_drawer":
                sym["drawer"] = "open"
                chain.append(TaskSpec("open_drawer", "tabletop", [Subtask("Open", "drawer")]))
            elif n == "close_drawer":
                sym["drawer"] = "closed"
                chain.append(TaskSpec("close_drawer", "tabletop", [Subtask("Close", "drawer")]))
            elif n == "turn_dial":
                sym["dial"] = True
                chain.append(TaskSpec("turn_dial", "tabletop", [Subtask("Turn", "dial")]))
            elif n == "press_button":
                sym["button"] = True
                chain.append(TaskSpec("press_button", "tabletop", [Subtask("Press", "button")]))
        if len(chain) == length:
            return chain
    raise SimError(f"no feasible chain of length {length} over skills {sorted(skills)}")


TaskRunner = Callable[[SimState, TaskSpec, int], tuple[dict, SimState]]


def evaluate_chain(runner: TaskRunner, length: int = 5, n: int = 100, seed: int = 0,
                   skills: Iterable[str] = ("Pick", "Place", "Open", "Close", "Turn")) -> ChainMetrics:
    """Run n chained rollouts; each stops at its first failed task.

    ``runner(state, spec, seed)`` executes one task from ``state`` and returns
    (episode result dict with a boolean ``success``, final state).
    """
    completed = []
    rollouts = []
    skills = tuple(skills)
    for r in range(n):
        rseed = int(seed) * 1_000_003 + r
        rng = np.random.default_rng([rseed, 31337])
        chain = sample_chain(length, rng, skills)
        st = reset("tabletop", rseed)
        done = 0
        results = []
        for i, spec in enumerate(chain):
            res, st = runner(st, spec, rseed * 16 + i)
            results.append(res)
            if not res.get("success"):
                break
            done += 1
        completed.append(done)
        rollouts.append({"rollout": r, "seed": rseed, "chain": [c.name for c in chain], "completed": done, "episodes": results})
    stage, avg = chain_metrics(completed, length)
    return ChainMetrics(length, n, stage, avg, rollouts)
