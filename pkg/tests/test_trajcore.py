import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atomicvla.trajcore import (
    Delta, Episode, EpisodeFormatError, EpisodeSet, Frame, Pose, TrajMeta, Trajectory, ValidationError,
    canonical, dumps_episodes, load_episodes, pose_delta, round9, save_episodes, window_delta, wrap_angle,
)

angles = st.floats(-10.0, 10.0, allow_nan=False)
coords = st.floats(-2.0, 2.0, allow_nan=False)
poses = st.builds(Pose, coords, coords, coords, angles)


def test_pose_delta_identity():
    p = Pose(0.1, -0.2, 0.3, 1.0)
    assert pose_delta(p, p) == Delta()


def test_pose_delta_wraps_through_pi():
    d = pose_delta(Pose(yaw=3.1), Pose(yaw=-3.1))
    # 2*pi - 6.2, computed by hand
    assert d.dyaw == pytest.approx(0.08318530717958623, abs=1e-12)
    assert d.dyaw > 0


def test_pose_delta_translation():
    d = pose_delta(Pose(), Pose(0.03, 0.0, -0.04, 0.0))
    assert (d.dx, d.dy, d.dz) == pytest.approx((0.03, 0.0, -0.04))


def test_yaw_stored_wrapped():
    assert Pose(yaw=math.pi).yaw == pytest.approx(math.pi)
    assert Pose(yaw=-math.pi).yaw == pytest.approx(math.pi)
    assert Pose(yaw=3 * math.pi / 2).yaw == pytest.approx(-math.pi / 2)


def test_pose_rejects_nonfinite():
    with pytest.raises(ValidationError):
        Pose(x=float("nan"))


@given(poses, poses)
def test_pose_delta_antisymmetry(a, b):
    d1, d2 = pose_delta(a, b), pose_delta(b, a)
    assert d1.dx == -d2.dx and d1.dy == -d2.dy and d1.dz == -d2.dz
    assert math.isclose(d1.dyaw, wrap_angle(-d2.dyaw), abs_tol=1e-9) or math.isclose(abs(d1.dyaw), math.pi, abs_tol=1e-9)
    assert -math.pi < d1.dyaw <= math.pi


@given(poses)
def test_pose_delta_self_is_zero(a):
    d = pose_delta(a, a)
    assert d.translation == 0.0 and d.dyaw == 0.0


def _traj(z, grip=None):
    n = len(z)
    arr = np.zeros((n, 5))
    arr[:, 2] = z
    arr[:, 4] = 1.0 if grip is None else grip
    return Trajectory.from_array(arr)


def test_window_delta_endpoint():
    d = window_delta(_traj([0.20, 0.19, 0.18, 0.17, 0.16]), 0, 5)
    assert d.dz == pytest.approx(-0.04)


def test_window_delta_constant_is_zero():
    tr = _traj([0.1] * 8)
    assert window_delta(tr, 2, 5) == Delta()


def test_window_delta_range_error_names_index():
    tr = _traj(np.linspace(0, 1, 10))
    with pytest.raises(IndexError, match="11"):
        window_delta(tr, len(tr) - 3, 5)


@given(st.lists(st.tuples(coords, coords, coords, angles, st.floats(0, 1)), min_size=2, max_size=12), st.data())
def test_window_two_matches_pose_delta(rows, data):
    tr = Trajectory.from_array(np.array(rows))
    i = data.draw(st.integers(0, len(tr) - 2))
    w = window_delta(tr, i, 2)
    p = pose_delta(tr[i].pose, tr[i + 1].pose)
    assert (w.dx, w.dy, w.dz, w.dyaw) == (p.dx, p.dy, p.dz, p.dyaw)
    assert w.dgrip == tr[i + 1].gripper - tr[i].gripper


def test_frame_gripper_bounds():
    with pytest.raises(ValidationError):
        Frame(0, Pose(), 1.5)
    with pytest.raises(ValidationError):
        Trajectory([Frame(0, Pose(), 0.5), Frame(2, Pose(), 0.5)])


# -- serialization ---------------------------------------------------------

def _episodes(seed, n_eps=2, n=6, annotate=True):
    rng = np.random.default_rng(seed)
    eps = []
    for e in range(n_eps):
        arr = rng.normal(0, 0.3, (n, 5))
        arr[:, 4] = rng.random(n)
        tr = Trajectory.from_array(arr, TrajMeta(task=f"task_{e}", seed=seed, episode=e))
        if annotate:
            eps.append(Episode(tr, ["Pick"] * n, ["Act"] * n, rng.normal(0, 1, (n, 10))))
        else:
            eps.append(Episode(tr))
    return EpisodeSet(eps)


def test_empty_stream():
    assert len(load_episodes(b"")) == 0
    text = dumps_episodes(EpisodeSet())
    assert text.count("\n") == 1 and "\"episode\"" not in text


def test_save_is_deterministic():
    es = _episodes(3)
    a, b = io.BytesIO(), io.BytesIO()
    save_episodes(es, a)
    save_episodes(es, b)
    assert a.getvalue() == b.getvalue()


def test_key_order():
    line = dumps_episodes(_episodes(0, 1, 1)).splitlines()[2]
    keys = [k.split('"')[1] for k in line.strip("{}").split(",") if k.startswith('"')]
    assert keys == ["t", "x", "y", "z", "yaw", "grip", "skill", "mode", "action"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_roundtrip(seed, annotate):
    es = _episodes(seed, annotate=annotate)
    text = dumps_episodes(es)
    back = load_episodes(text)
    assert dumps_episodes(back) == text == canonical(text)
    for e0, e1 in zip(es, back):
        for f0, f1 in zip(e0.traj, e1.traj):
            assert f1.pose.x == round9(f0.pose.x) and f1.gripper == round9(f0.gripper)
            assert f1.pose.yaw == pytest.approx(f0.pose.yaw, rel=1e-8)


def test_grip_out_of_range_cites_field_and_frame():
    bad = '{"episode":0,"task":"t","seed":0}\n{"t":0,"x":0,"y":0,"z":0,"yaw":0,"grip":0.5}\n' \
          '{"t":1,"x":0,"y":0,"z":0,"yaw":0,"grip":1.5}\n'
    with pytest.raises(ValidationError) as ei:
        load_episodes(bad)
    assert ei.value.field == "grip" and ei.value.frame == 1
    assert "gripper" in str(ei.value)


def test_malformed_line_number():
    bad = '{"episode":0,"task":"t","seed":0}\n{"t":0,"x":0,\n'
    with pytest.raises(EpisodeFormatError) as ei:
        load_episodes(bad)
    assert ei.value.lineno == 2


def test_partial_annotation_rejected():
    bad = '{"episode":0,"task":"t","seed":0}\n{"t":0,"x":0,"y":0,"z":0,"yaw":0,"grip":0.5,"skill":"Pick"}\n' \
          '{"t":1,"x":0,"y":0,"z":0,"yaw":0,"grip":0.5}\n'
    with pytest.raises(ValidationError):
        load_episodes(bad)


def test_canonical_normalizes_floats():
    src = '{"episode":0,"task":"t","seed":1}\n{"t":0,"x":0.1000000000001,"y":-0.0,"z":0,"yaw":0,"grip":1}\n'
    out = canonical(src)
    assert '"x":0.1,' in out and '"y":0,' in out
    assert canonical(out) == out
