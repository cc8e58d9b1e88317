import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atomicvla import simworld as sw
from atomicvla import policy as pl
from atomicvla.trajcore import save_episodes


def hold(s):
    return np.array([0.0, 0.0, 0.0, 0.0, s.grip])


def test_reset_deterministic():
    a, b = sw.reset(sw.TASKS["objects_in_plate"], 4), sw.reset(sw.TASKS["objects_in_plate"], 4)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != sw.reset(sw.TASKS["objects_in_plate"], 5).tobytes()


def test_reset_regions():
    lay = sw.LAYOUTS["tabletop"]
    x0, x1, y0, y1 = lay.block_region
    for seed in range(100):
        s = sw.reset("tabletop", seed)
        assert np.all((s.obj_pos[:, 0] >= x0) & (s.obj_pos[:, 0] <= x1))
        assert np.all((s.obj_pos[:, 1] >= y0) & (s.obj_pos[:, 1] <= y1))
        px0, px1, py0, py1 = lay.plate_region
        assert px0 <= s.plate[0] <= px1 and py0 <= s.plate[1] <= py1
        d = np.linalg.norm(s.obj_pos[:, None, :2] - s.obj_pos[None, :, :2], axis=-1)
        assert d[np.triu_indices(3, 1)].min() >= 0.07


def test_reset_unknown_template():
    with pytest.raises(sw.SimError):
        sw.reset("garage", 0)


def test_hold_action_only_ticks():
    s = sw.reset("tabletop", 0)
    s2 = sw.step(s, hold(s))
    s.tick += 1
    assert s2.tobytes() == s.tobytes()


def test_clamp_recorded():
    s = sw.step(sw.reset("tabletop", 0), [1.0, 0, 0, 0, 1.0])
    assert s.clamped == 1 and s.agent[0] == pytest.approx(sw.reset("tabletop", 0).agent[0] + 0.02)


def _drive_to(s, p):
    for _ in range(200):
        d = np.clip(p - s.agent[:3], -0.02, 0.02)
        if not d.any():
            break
        s = sw.step(s, [*d, 0.0, s.grip])
    return s


def test_grasp_and_carry():
    s = sw.reset("tabletop", 1)
    s = _drive_to(s, s.obj_pos[0].copy())
    for _ in range(4):
        s = sw.step(s, [0, 0, 0, 0, 0.0])
    assert s.held == 0
    off = s.obj_pos[0] - s.agent[:3]
    s = sw.step(s, [0.01, 0.0, 0.02, 0.0, 0.0])
    np.testing.assert_allclose(s.obj_pos[0] - s.agent[:3], off, atol=1e-12)


def test_close_far_from_objects():
    s = sw.reset("tabletop", 1)
    for _ in range(4):
        s = sw.step(s, [0, 0, 0, 0, 0.0])
    assert s.held == -1 and s.attached is None and s.grip == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.lists(st.tuples(*[st.floats(-0.03, 0.03)] * 3, st.floats(-0.2, 0.2), st.sampled_from([0.0, 1.0])), max_size=60))
def test_possession_conserved(seed, acts):
    s = sw.reset(sw.TASKS["grasp_block"], seed)
    s = _drive_to(s, s.obj_pos[0].copy())
    off = None
    for a in acts:
        s = sw.step(s, a)
        assert -1 <= s.held < 3
        if s.held >= 0:
            o = s.obj_pos[s.held] - s.agent[:3]
            if off is not None:
                np.testing.assert_allclose(o, off, atol=1e-12)
            off = o
        else:
            off = None
        for f, e in s.ext.items():
            assert 0.0 <= e <= 1.0


def test_pick_expert_contract():
    spec = sw.TASKS["grasp_block"]
    s, acts, _ = sw.run_expert(sw.reset(spec, 3), spec.decomposition[0], np.random.default_rng(3))
    assert s.held == 0 and s.grip < 0.5 and s.agent[2] >= sw.LIFT_Z
    assert sw.subtask_done(s, spec.decomposition[0])
    s2, acts2, _ = sw.run_expert(sw.reset(spec, 3), spec.decomposition[0], np.random.default_rng(3))
    assert np.array_equal(np.array(acts), np.array(acts2))


@pytest.mark.parametrize("skill", sorted(sw.SHORT_TASK_BY_SKILL))
def test_experts_within_budget(skill):
    spec = sw.TASKS[sw.SHORT_TASK_BY_SKILL[skill]]
    for seed in range(100):
        s, acts, _ = sw.run_expert(sw.reset(spec, seed), spec.decomposition[0], np.random.default_rng(seed))
        assert len(acts) <= sw.SKILL_BUDGET[skill]


def test_infeasible_pair():
    s = sw.reset("tabletop", 0)
    with pytest.raises(sw.FeasibilityError):
        sw.scripted_expert(s, "Pick", "drawer")
    with pytest.raises(sw.FeasibilityError):
        sw.scripted_expert(s, "Open", "dial")


def test_predicates_fresh_and_hysteresis():
    spec = sw.TASKS["object_into_drawer"]
    s = sw.reset(spec, 0)
    assert not any(sw.subtask_done(s, sub) for sub in spec.decomposition)
    s.ext["drawer"] = 0.5
    s.agent[2] = sw.HOVER_Z
    assert not sw.subtask_effect(s, sw.Subtask("Open", "drawer"))
    assert not sw.subtask_effect(s, sw.Subtask("Close", "drawer"))


def test_generate_dataset():
    specs = sw.suite_specs(["grasp_block", "open_drawer"])
    es = sw.generate_dataset(specs, 3, seed=2)
    assert len(es) == 6
    for ep in es:
        assert ep.modes[0] == "Think" and len(ep.skills) == len(ep.traj)
        states = sw.replay_states(ep)
        spec = sw.TASKS[ep.meta.task]
        assert sw.subtask_done(states[-1], spec.decomposition[-1])
    a, b = io.BytesIO(), io.BytesIO()
    save_episodes(es, a)
    save_episodes(sw.generate_dataset(specs, 3, seed=2), b)
    assert a.getvalue() == b.getvalue()


def test_think_marks_at_transitions():
    ep = sw.generate_dataset(sw.suite_specs(["object_into_drawer"]), 1, seed=0)[0]
    thinks = [i for i, m in enumerate(ep.modes) if m == "Think"]
    assert len(thinks) == 3
    assert [ep.skills[i] for i in thinks] == ["Open", "Pick", "Place"]


def test_task_file_roundtrip(tmp_path):
    spec = sw.TASKS["object_into_drawer"]
    p = tmp_path / "t.json"
    import json
    p.write_text(json.dumps(spec.to_json()))
    assert sw.load_task_file(p) == spec
    with pytest.raises(sw.SimError):
        sw.TaskSpec.from_json({"name": "x"})


def test_chain_metric_formula():
    stage, avg = sw.chain_metrics([5, 0, 2, 3, 5], 5)
    assert stage == [4, 4, 3, 2, 2] and avg == 15 / 5


@settings(max_examples=50)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40))
def test_chain_stage_monotone(done):
    stage, avg = sw.chain_metrics(done, 5)
    assert all(a >= b for a, b in zip(stage, stage[1:]))
    assert avg == sum(stage) / len(done) == pytest.approx(np.mean(done))


def test_chain_oracle_is_perfect():
    runner = pl.make_runner(pl.Policy(actor="scripted"))
    m = sw.evaluate_chain(runner, length=5, n=10, seed=3)
    assert m.avg_len == 5.0 and m.completed == [10] * 5
    assert m.csv().count("\n") == 11


def test_chain_random_floor():
    def runner(s, spec, seed):
        rng = np.random.default_rng(seed)
        tracker = sw.ProgressTracker(spec)
        for _ in range(100):
            a = rng.uniform(-1, 1, 5) * np.r_[sw.STEP_BOUNDS, 1.0]
            a[4] = rng.random()
            s = sw.step(s, a)
            tracker.update(s)
            if tracker.done:
                break
        return {"success": tracker.done}, s

    m = sw.evaluate_chain(runner, length=5, n=100, seed=0)
    assert m.avg_len <= 0.1
