"""Principal-axis trajectory decomposition into labeled atomic-skill segments.

Pipeline: window classification -> raw axis segments -> manipulation cycles
(a cycle closes when an ascent ends) -> rule labels -> refiner.
"""
from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .trajcore import Delta, EpisodeSet, Trajectory, wrap_angle

log = logging.getLogger(__name__)

SKILL_LABELS = ("Pick", "Place", "Open", "Close", "Turn", "Press")
IDLE = "Idle"
ALL_LABELS = SKILL_LABELS + (IDLE,)
GRIP_CLOSED = 0.5  # binary gripper state: aperture below this is "closed"


class AxisClass(enum.IntEnum):
    Idle = 0
    TransXPos = 1
    TransXNeg = 2
    TransYPos = 3
    TransYNeg = 4
    TransZPos = 5
    TransZNeg = 6
    RotYawPos = 7
    RotYawNeg = 8
    GripClose = 9
    GripOpen = 10


class SegmentationError(ValueError):
    pass


class RefinerContractError(SegmentationError):
    pass


@dataclass(frozen=True)
class Thresholds:
    trans_thresh: float = 0.03
    rot_thresh: float = 0.05
    grip_thresh: float = 0.1
    window: int = 5

    def __post_init__(self):
        if min(self.trans_thresh, self.rot_thresh, self.grip_thresh) <= 0:
            raise ValueError("thresholds must be strictly positive")
        if int(self.window) != self.window or self.window < 2:
            raise ValueError(f"window must be an integer >= 2, got {self.window}")


@dataclass
class Segment:
    start: int
    end: int
    label: str = IDLE
    grip_events: list[tuple[int, str]] = field(default_factory=list)
    axis: AxisClass | None = None

    def __post_init__(self):
        if not self.start < self.end:
            raise SegmentationError(f"segment [{self.start}, {self.end}) is empty")

    def __len__(self) -> int:
        return self.end - self.start

    def to_json(self) -> dict:
        return {
            "start": self.start,
            "end": self.end,
            "label": self.label,
            "grip_events": [[f, kind] for f, kind in self.grip_events],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Segment":
        return cls(int(d["start"]), int(d["end"]), str(d["label"]), [(int(f), str(k)) for f, k in d.get("grip_events", [])])


@dataclass
class SegmentAnnotation:
    traj_id: int
    length: int
    segments: list[Segment]

    def __post_init__(self):
        check_coverage(self.segments, self.length)

    def projection(self) -> list[str]:
        out: list[str] = []
        for s in self.segments:
            out.extend([s.label] * len(s))
        return out

    def boundaries(self) -> list[int]:
        return [s.start for s in self.segments[1:]]


def check_coverage(segments: Sequence[Segment], length: int) -> None:
    if not segments:
        raise RefinerContractError("annotation has no segments")
    if segments[0].start != 0:
        raise RefinerContractError(f"first segment starts at {segments[0].start}, not 0")
    for a, b in zip(segments, segments[1:]):
        if a.end != b.start:
            raise RefinerContractError(f"segments [{a.start},{a.end}) and [{b.start},{b.end}) are not contiguous")
    if segments[-1].end != length:
        raise RefinerContractError(f"last segment ends at {segments[-1].end}, trajectory length is {length}")


# -- window classification -------------------------------------------------

def classify_window(d: Delta, th: Thresholds = Thresholds()) -> AxisClass:
    if d.dgrip <= -th.grip_thresh:
        return AxisClass.GripClose
    if d.dgrip >= th.grip_thresh:
        return AxisClass.GripOpen
    comps = (d.dx, d.dy, d.dz)
    axis = max(range(3), key=lambda i: (abs(comps[i]), -i))
    if abs(comps[axis]) >= th.trans_thresh:
        return AxisClass(1 + 2 * axis + (0 if comps[axis] > 0 else 1))
    if abs(d.dyaw) >= th.rot_thresh:
        return AxisClass.RotYawPos if d.dyaw > 0 else AxisClass.RotYawNeg
    return AxisClass.Idle


def frame_classes(traj: Trajectory, th: Thresholds = Thresholds()) -> np.ndarray:
    """Per-frame class: the class of the window centred on the frame (clamped at the ends)."""
    arr = traj.array()
    win = kernels.classify_windows(np.ascontiguousarray(arr), int(th.window), th.trans_thresh, th.rot_thresh, th.grip_thresh)
    n = len(arr)
    idx = np.clip(np.arange(n) - (th.window - 1) // 2, 0, len(win) - 1)
    return win[idx]


def grip_events(traj: Trajectory, start: int = 0, end: int | None = None) -> list[tuple[int, str]]:
    """Binary gripper transitions (aperture crossing 0.5) at frames in [start, end)."""
    g = traj.array()[:, 4]
    end = len(g) if end is None else end
    closed = g < GRIP_CLOSED
    out = []
    for f in range(max(start, 1), end):
        if closed[f] and not closed[f - 1]:
            out.append((f, "GripClose"))
        elif closed[f - 1] and not closed[f]:
            out.append((f, "GripOpen"))
    return out


def segment_trajectory(traj: Trajectory, th: Thresholds = Thresholds(), traj_id: int | None = None) -> SegmentAnnotation:
    """Raw axis segments: maximal class runs with sub-window runs folded into the longer neighbour."""
    if len(traj) < th.window:
        raise SegmentationError(f"trajectory of length {len(traj)} is shorter than the window ({th.window})")
    codes = np.ascontiguousarray(frame_classes(traj, th), dtype=np.int8)
    s, e, c = kernels.runs(codes)
    s, e, c = kernels.merge_short_runs(s, e, c, int(th.window))
    segs = []
    for a, b, code in zip(s.tolist(), e.tolist(), c.tolist()):
        seg = Segment(a, b, IDLE, grip_events(traj, a, b), AxisClass(code))
        seg.label = label_segment(traj, seg, th)
        segs.append(seg)
    tid = traj.meta.episode if traj_id is None else traj_id
    return SegmentAnnotation(tid, len(traj), segs)


# -- labeling --------------------------------------------------------------

def label_segment(traj: Trajectory, seg: Segment, th: Thresholds = Thresholds()) -> str:
    """Rule table over the span [start, end).

    Fixture skills are recognised from a grasp-release pair inside the span,
    Open/Close by motion along the fixture axis (+y points into a fixture).
    """
    if not (0 <= seg.start < seg.end <= len(traj)):
        raise SegmentationError(f"segment [{seg.start},{seg.end}) outside trajectory of length {len(traj)}")
    arr = traj.array()
    s, e = seg.start, seg.end
    x, y, z, yaw, g = (arr[s:e, i] for i in range(5))
    closed = g < GRIP_CLOSED
    events = grip_events(traj, s, e)
    closes = [f for f, k in events if k == "GripClose"]
    opens = [f for f, k in events if k == "GripOpen"]

    def net(a: int, b: int) -> tuple[float, float, float, float]:
        return (arr[b, 0] - arr[a, 0], arr[b, 1] - arr[a, 1], arr[b, 2] - arr[a, 2], wrap_angle(arr[b, 3] - arr[a, 3]))

    def rotation_dominant(a: int, b: int) -> bool:
        dx, dy, dz, dyaw = net(a, b)
        span = max(b - a + 1, 1)
        return float(np.sqrt(dx * dx + dy * dy + dz * dz)) < th.trans_thresh * span / th.window and abs(dyaw) >= th.rot_thresh

    # grasp ... release inside the span: a fixture was manipulated
    for c in closes:
        later = [o for o in opens if o > c]
        if later:
            o = later[0]
            if rotation_dominant(c, o - 1):
                return "Turn"
            dx, dy, dz, _ = net(c, o - 1)
            horiz = max(abs(dx), abs(dy))
            if horiz >= th.trans_thresh and horiz >= abs(dz):
                return "Open" if dy < 0 else "Close"
            break

    if closed.all() and rotation_dominant(s, e - 1):
        return "Turn"

    if closes:
        c = closes[-1]
        if arr[c, 2] <= arr[s:c + 1, 2].max() - th.trans_thresh and not [o for o in opens if o > c]:
            return "Pick"

    if opens and closed[0] and (not closes or opens[0] < closes[0]):
        return "Place"

    # press: descent made with the gripper already shut, nothing released afterwards
    first_closed = s if closed[0] else (closes[0] if closes else None)
    if first_closed is not None and not [o for o in opens if o > first_closed]:
        tail = z[first_closed - s:]
        if tail.min() <= arr[first_closed, 2] - th.trans_thresh:
            lowest = int(np.argmin(tail)) + first_closed - s
            dxy = np.hypot(x[lowest:] - x[lowest], y[lowest:] - y[lowest])
            if dxy.max(initial=0.0) < th.trans_thresh:
                return "Press"
    return IDLE


def _majority_class(codes: np.ndarray, a: int, b: int) -> int:
    vals, counts = np.unique(codes[a:b], return_counts=True)
    return int(vals[np.argmax(counts)])


def manipulation_cycles(traj: Trajectory, raw: SegmentAnnotation, th: Thresholds = Thresholds()) -> SegmentAnnotation:
    """Group raw axis segments into cycles; a cycle closes where an ascent run ends."""
    codes = frame_classes(traj, th)
    segs: list[Segment] = []
    start = 0
    for i, seg in enumerate(raw.segments):
        axis = seg.axis if seg.axis is not None else AxisClass(_majority_class(codes, seg.start, seg.end))
        last = i == len(raw.segments) - 1
        if axis == AxisClass.TransZPos or last:
            end = seg.end
            if not last:
                # frames folded into the ascent run from a flickering transit belong to the next cycle
                own = np.flatnonzero(codes[seg.start:seg.end] == AxisClass.TransZPos)
                if len(own):
                    end = seg.start + int(own[-1]) + 1
            cyc = Segment(start, end, IDLE, grip_events(traj, start, end))
            cyc.label = label_segment(traj, cyc, th)
            segs.append(cyc)
            start = end
    return SegmentAnnotation(raw.traj_id, raw.length, segs)


# -- refinement ------------------------------------------------------------

Refiner = Callable[[SegmentAnnotation, Trajectory], SegmentAnnotation]


def identity_refiner(ann: SegmentAnnotation, traj: Trajectory) -> SegmentAnnotation:
    return ann


class RuleRefiner:
    """Merge equal neighbours, absorb short Idle gaps into the next segment, relabel merged spans."""

    def __init__(self, th: Thresholds = Thresholds()):
        self.th = th

    def __call__(self, ann: SegmentAnnotation, traj: Trajectory) -> SegmentAnnotation:
        segs = [replace(s, grip_events=list(s.grip_events)) for s in ann.segments]
        merged_flags = [False] * len(segs)
        segs, merged_flags = self._merge_equal(segs, merged_flags)
        out: list[Segment] = []
        flags: list[bool] = []
        pending: Segment | None = None
        for seg, fl in zip(segs, merged_flags):
            if pending is not None:
                seg = Segment(pending.start, seg.end, seg.label, pending.grip_events + seg.grip_events)
                fl = True
                pending = None
            if seg.label == IDLE and len(seg) < 2 * self.th.window:
                pending = seg
                continue
            out.append(seg)
            flags.append(fl)
        if pending is not None:
            if out:
                last = out[-1]
                out[-1] = Segment(last.start, pending.end, last.label, last.grip_events + pending.grip_events)
                flags[-1] = True
            else:
                out.append(pending)
                flags.append(False)
        out, flags = self._merge_equal(out, flags)
        for seg, fl in zip(out, flags):
            if fl:
                seg.grip_events = grip_events(traj, seg.start, seg.end)
                new = label_segment(traj, seg, self.th)
                # a merge must not erase a skill: keep the member label when the wider span reads as Idle
                if new != IDLE:
                    seg.label = new
        return SegmentAnnotation(ann.traj_id, ann.length, out)

    @staticmethod
    def _merge_equal(segs: list[Segment], flags: list[bool]):
        out: list[Segment] = []
        oflags: list[bool] = []
        for seg, fl in zip(segs, flags):
            if out and out[-1].label == seg.label:
                prev = out[-1]
                out[-1] = Segment(prev.start, seg.end, prev.label, prev.grip_events + seg.grip_events)
                oflags[-1] = True
            else:
                out.append(seg)
                oflags.append(fl)
        return out, oflags


def refine_annotation(ann: SegmentAnnotation, traj: Trajectory, refiner: Refiner | None = None) -> SegmentAnnotation:
    refiner = refiner or RuleRefiner()
    out = refiner(ann, traj)
    if not isinstance(out, SegmentAnnotation):
        raise RefinerContractError(f"refiner returned {type(out).__name__}, expected SegmentAnnotation")
    if out.length != len(traj):
        raise RefinerContractError(f"refiner changed annotation length {out.length} != {len(traj)}")
    check_coverage(out.segments, out.length)
    return out


def annotate_trajectory(traj: Trajectory, th: Thresholds = Thresholds(), refiner: Refiner | None = None) -> SegmentAnnotation:
    raw = segment_trajectory(traj, th)
    cycles = manipulation_cycles(traj, raw, th)
    return refine_annotation(cycles, traj, refiner or RuleRefiner(th))


# -- dataset statistics ----------------------------------------------------

@dataclass
class SkillStats:
    counts: dict[str, int]
    weights: dict[str, float]
    warnings: list[dict]


def label_runs(labels: Sequence[str]) -> list[tuple[int, int, str]]:
    out = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            out.append((start, i, labels[start]))
            start = i
    return out


def balance_weights(counts: Mapping[str, int], labels: Iterable[str] = SKILL_LABELS) -> SkillStats:
    counts = {k: int(v) for k, v in counts.items() if k != IDLE}
    warnings = []
    present = {k: v for k, v in counts.items() if v > 0}
    for lab in labels:
        if counts.get(lab, 0) == 0:
            warnings.append({"label": lab, "reason": "zero count; excluded from resampling weights"})
    top = max(present.values()) if present else 0
    weights = {k: top / v for k, v in present.items()}
    for w in warnings:
        log.warning("skill %s has no segments; excluded from balancing", w["label"])
    return SkillStats(dict(counts), weights, warnings)


def skill_histogram(es: EpisodeSet, labels: Iterable[str] = SKILL_LABELS) -> SkillStats:
    counts: Counter = Counter()
    for ep in es:
        if ep.skills is None:
            raise SegmentationError(f"episode {ep.meta.episode} is not annotated")
        for _, _, lab in label_runs(ep.skills):
            if lab != IDLE:
                counts[lab] += 1
    return balance_weights(counts, labels)


@dataclass
class SegmentationScore:
    boundaries: int
    recovered: int
    frames: int
    agree: int

    @property
    def boundary_recall(self) -> float:
        return self.recovered / self.boundaries if self.boundaries else 1.0

    @property
    def framewise(self) -> float:
        return self.agree / self.frames if self.frames else 1.0

    def to_json(self) -> dict:
        return {"boundaries": self.boundaries, "recovered": self.recovered, "frames": self.frames,
                "agree": self.agree, "boundary_recall": self.boundary_recall, "framewise": self.framewise}


def reference_boundaries(labels: Sequence[str], modes: Sequence[str] | None = None) -> list[int]:
    """Label changes plus subtask starts marked by Think ticks (two back-to-back same-skill subtasks)."""
    out = []
    for i in range(1, len(labels)):
        if labels[i] != labels[i - 1] or (modes is not None and modes[i] == "Think"):
            out.append(i)
    return out


def score_annotations(es: EpisodeSet, th: Thresholds = Thresholds(), refiner: Refiner | None = None,
                      tol: int = 2) -> SegmentationScore:
    """Compare annotate_trajectory output against the script labels stored in each episode."""
    total = hit = frames = agree = 0
    for ep in es:
        if ep.skills is None:
            raise SegmentationError(f"episode {ep.meta.episode} has no reference labels")
        ann = annotate_trajectory(ep.traj, th, refiner)
        pred = ann.projection()
        pb = np.array(ann.boundaries(), dtype=np.int64)
        for b in reference_boundaries(ep.skills, ep.modes):
            total += 1
            if len(pb) and np.min(np.abs(pb - b)) <= tol:
                hit += 1
        agree += sum(p == g for p, g in zip(pred, ep.skills))
        frames += len(pred)
    return SegmentationScore(total, hit, frames, agree)
