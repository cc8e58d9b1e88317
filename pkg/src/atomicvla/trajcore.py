"""Trajectory data model, pose arithmetic and the JSON-lines episode format."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

ACTION_DIM = 5
FORMAT_TAG = "atomicvla-episodes"
FORMAT_VERSION = 1


class EpisodeFormatError(ValueError):
    """Malformed JSON-lines input; carries the 1-based line number."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ValidationError(ValueError):
    """A frame or pose violates a data-model invariant."""

    def __init__(self, field_name: str, frame: int | None, msg: str):
        where = f" (frame {frame})" if frame is not None else ""
        super().__init__(f"{field_name}{where}: {msg}")
        self.field = field_name
        self.frame = frame


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.pi - math.fmod(math.pi - a, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    elif r > math.pi:
        r -= 2.0 * math.pi
    return r


def wrap_angles(a: np.ndarray) -> np.ndarray:
    r = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    return np.where(r <= -np.pi, r + 2.0 * np.pi, r)


def _finite(name: str, v: float, frame: int | None = None) -> float:
    v = float(v)
    if not math.isfinite(v):
        raise ValidationError(name, frame, "must be finite")
    return v


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "yaw"):
            object.__setattr__(self, name, _finite(name, getattr(self, name)))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class Delta:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dyaw: float = 0.0
    dgrip: float = 0.0

    @property
    def translation(self) -> float:
        return math.sqrt(self.dx * self.dx + self.dy * self.dy + self.dz * self.dz)


@dataclass(frozen=True)
class Frame:
    t: int
    pose: Pose
    gripper: float

    def __post_init__(self):
        if not isinstance(self.t, (int, np.integer)) or self.t < 0:
            raise ValidationError("t", None, f"frame index must be a non-negative integer, got {self.t!r}")
        g = _finite("grip", self.gripper, int(self.t))
        if not 0.0 <= g <= 1.0:
            raise ValidationError("grip", int(self.t), f"gripper aperture {g} outside [0, 1]")
        object.__setattr__(self, "gripper", g)


@dataclass
class TrajMeta:
    task: str = ""
    seed: int = 0
    source: str = "file"
    episode: int = 0


class Trajectory:
    """Ordered frames with consecutive indices plus task metadata."""

    def __init__(self, frames: Sequence[Frame], meta: TrajMeta | None = None):
        if len(frames) < 1:
            raise ValidationError("frames", None, "trajectory needs at least one frame")
        t0 = frames[0].t
        for i, f in enumerate(frames):
            if f.t != t0 + i:
                raise ValidationError("t", f.t, f"frame indices must increase by 1 (expected {t0 + i})")
        self.frames = list(frames)
        self.meta = meta or TrajMeta()
        self._arr: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        return self.frames[i]

    def array(self) -> np.ndarray:
        """(N, 5) float64 array of x, y, z, yaw, gripper."""
        if self._arr is None:
            self._arr = np.array(
                [(f.pose.x, f.pose.y, f.pose.z, f.pose.yaw, f.gripper) for f in self.frames], dtype=np.float64
            )
        return self._arr

    @classmethod
    def from_array(cls, arr, meta: TrajMeta | None = None) -> "Trajectory":
        arr = np.asarray(arr, dtype=np.float64)
        frames = [Frame(i, Pose(*row[:4]), float(row[4])) for i, row in enumerate(arr)]
        return cls(frames, meta)


def pose_delta(a: Pose, b: Pose) -> Delta:
    return Delta(b.x - a.x, b.y - a.y, b.z - a.z, wrap_angle(b.yaw - a.yaw), 0.0)


def window_delta(traj: Trajectory, i: int, w: int) -> Delta:
    """Net (endpoint) delta between frame i and frame i + w - 1."""
    if w < 2:
        raise ValueError(f"window must be >= 2, got {w}")
    j = i + w - 1
    if i < 0:
        raise IndexError(f"window start index {i} is negative")
    if j >= len(traj):
        raise IndexError(f"window end index {j} (start {i}, w={w}) out of range for length {len(traj)}")
    a, b = traj[i], traj[j]
    d = pose_delta(a.pose, b.pose)
    return Delta(d.dx, d.dy, d.dz, d.dyaw, b.gripper - a.gripper)


@dataclass
class Episode:
    traj: Trajectory
    skills: list[str] | None = None
    modes: list[str] | None = None
    actions: np.ndarray | None = None  # (N, H*5)

    def __post_init__(self):
        n = len(self.traj)
        for name in ("skills", "modes"):
            seq = getattr(self, name)
            if seq is not None and len(seq) != n:
                raise ValidationError(name, None, f"annotation length {len(seq)} != frame count {n}")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.float64)
            if self.actions.ndim != 2 or self.actions.shape[0] != n or self.actions.shape[1] % ACTION_DIM:
                raise ValidationError("action", None, f"action array shape {self.actions.shape} invalid for {n} frames")

    @property
    def meta(self) -> TrajMeta:
        return self.traj.meta


@dataclass
class EpisodeSet:
    episodes: list[Episode] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def __getitem__(self, i):
        return self.episodes[i]


# -- serialization ---------------------------------------------------------

def fmt_float(v: float) -> str:
    s = "%.9g" % float(v)
    if s == "-0":
        s = "0"
    return s


def round9(v: float) -> float:
    """Round to the value that survives a save/load cycle unchanged."""
    return float(fmt_float(v))


def _frame_line(i: int, ep: Episode) -> str:
    f = ep.traj[i]
    parts = [
        f'"t":{f.t}',
        f'"x":{fmt_float(f.pose.x)}',
        f'"y":{fmt_float(f.pose.y)}',
        f'"z":{fmt_float(f.pose.z)}',
        f'"yaw":{fmt_float(f.pose.yaw)}',
        f'"grip":{fmt_float(f.gripper)}',
    ]
    if ep.skills is not None:
        parts.append('"skill":' + json.dumps(ep.skills[i]))
    if ep.modes is not None:
        parts.append('"mode":' + json.dumps(ep.modes[i]))
    if ep.actions is not None:
        parts.append('"action":[' + ",".join(fmt_float(v) for v in ep.actions[i]) + "]")
    return "{" + ",".join(parts) + "}"


def dumps_episodes(es: EpisodeSet) -> str:
    lines = ['{"format":"%s","version":%d}' % (FORMAT_TAG, FORMAT_VERSION)]
    for ep in es:
        m = ep.meta
        lines.append('{"episode":%d,"task":%s,"seed":%d}' % (m.episode, json.dumps(m.task), m.seed))
        lines.extend(_frame_line(i, ep) for i in range(len(ep.traj)))
    return "\n".join(lines) + "\n"


def save_episodes(es: EpisodeSet, sink: IO) -> None:
    text = dumps_episodes(es)
    if isinstance(sink, io.TextIOBase):
        sink.write(text)
    else:
        sink.write(text.encode("utf-8"))


def _finish(cur: dict | None, out: list[Episode], lineno: int) -> None:
    if cur is None:
        return
    recs = cur["frames"]
    if not recs:
        raise EpisodeFormatError(lineno, f"episode {cur['meta'].episode} has no frames")
    frames = []
    for r in recs:
        t = r["t"]
        try:
            pose = Pose(r["x"], r["y"], r["z"], r["yaw"])
        except ValidationError as e:
            raise ValidationError(e.field, t, str(e)) from None
        frames.append(Frame(t, pose, r["grip"]))
    traj = Trajectory(frames, cur["meta"])
    has = lambda k: all(k in r for r in recs)  # noqa: E731
    partial = [k for k in ("skill", "mode", "action") if any(k in r for r in recs) and not has(k)]
    if partial:
        raise ValidationError(partial[0], None, "annotation present on some frames only")
    skills = [r["skill"] for r in recs] if has("skill") else None
    modes = [r["mode"] for r in recs] if has("mode") else None
    actions = None
    if has("action"):
        lens = {len(r["action"]) for r in recs}
        if len(lens) != 1:
            raise ValidationError("action", None, "action chunks have inconsistent lengths")
        actions = np.array([r["action"] for r in recs], dtype=np.float64)
    out.append(Episode(traj, skills, modes, actions))


_FRAME_KEYS = ("t", "x", "y", "z", "yaw", "grip")


def load_episodes(source: IO | str | bytes | Iterable[str]) -> EpisodeSet:
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        lines: Iterable = source.splitlines()
    else:
        lines = source
    out: list[Episode] = []
    cur: dict | None = None
    lineno = 0
    for lineno, raw in enumerate(lines, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise EpisodeFormatError(lineno, f"invalid JSON: {e.msg}") from None
        if not isinstance(rec, dict):
            raise EpisodeFormatError(lineno, "record must be a JSON object")
        if "format" in rec:
            if rec["format"] != FORMAT_TAG:
                raise EpisodeFormatError(lineno, f"unknown format {rec['format']!r}")
            continue
        if "episode" in rec:
            _finish(cur, out, lineno)
            try:
                meta = TrajMeta(task=str(rec["task"]), seed=int(rec["seed"]), episode=int(rec["episode"]))
            except (KeyError, TypeError, ValueError) as e:
                raise EpisodeFormatError(lineno, f"bad header record: {e}") from None
            cur = {"meta": meta, "frames": []}
            continue
        if cur is None:
            raise EpisodeFormatError(lineno, "frame record before any episode header")
        missing = [k for k in _FRAME_KEYS if k not in rec]
        if missing:
            raise EpisodeFormatError(lineno, f"frame record missing keys {missing}")
        t = rec["t"]
        if not isinstance(t, int):
            raise EpisodeFormatError(lineno, "frame index 't' must be an integer")
        for k in _FRAME_KEYS[1:]:
            v = rec[k]
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValidationError(k, t, f"must be a finite number, got {v!r}")
        if not 0.0 <= rec["grip"] <= 1.0:
            raise ValidationError("grip", t, f"gripper aperture {rec['grip']} outside [0, 1]")
        cur["frames"].append(rec)
    _finish(cur, out, lineno)
    return EpisodeSet(out)


def canonical(text: str | bytes) -> str:
    """Canonical re-encoding of a JSON-lines episode stream."""
    return dumps_episodes(load_episodes(text))
