import copy
from dataclasses import replace

import numpy as np
import pytest

from atomicvla import policy as pl
from atomicvla import simworld as sw
from atomicvla import skillmoe as sm
from atomicvla import trainer as tr


def test_obs_width_tabletop():
    # agent 5 + three blocks x 4 + drawer/button/dial + eight task ids
    assert pl.obs_width("tabletop") == 5 + 3 * 4 + 3 + 8 == 28
    spec = sw.TASKS["grasp_block"]
    assert pl.encode_observation(sw.reset(spec, 0), spec).shape == (28,)


def test_encode_deterministic_and_local():
    spec = sw.TASKS["objects_in_plate"]
    s = sw.reset(spec, 2)
    a = pl.encode_observation(s, spec)
    assert np.array_equal(a, pl.encode_observation(s.copy(), spec))
    s2 = s.copy()
    s2.obj_pos[1, 0] += 0.05
    diff = np.flatnonzero(pl.encode_observation(s2, spec) != a)
    assert diff.tolist() == [5 + 4 * 1]


def test_encode_layout_mismatch():
    with pytest.raises(pl.EncodingError):
        pl.encode_observation(sw.reset("kitchen", 0), sw.TASKS["grasp_block"])


def test_fm_target_identities():
    a = np.array([[0.5, -1.0]])
    z = np.array([[2.0, 3.0]])
    np.testing.assert_array_equal(pl.fm_target(a, z, 1.0).x_interp, a)
    np.testing.assert_array_equal(pl.fm_target(a, z, 0.0).x_interp, z)
    f = pl.fm_target(np.array(1.0), np.array(0.0), 0.5)
    assert f.x_interp == 0.5 and f.u_target == 1.0
    with pytest.raises(ValueError):
        pl.fm_target(a, z[:, :1], 0.5)


def test_constant_field_integration():
    rng = np.random.default_rng(0)
    a = rng.integers(-8, 8, (8, 5)) / 4.0
    z = rng.integers(-8, 8, (8, 5)) / 4.0
    const = lambda x, t, i: a - z  # noqa: E731
    np.testing.assert_array_equal(pl.euler_integrate(const, z, 1), a)
    np.testing.assert_array_equal(pl.euler_integrate(const, z, 8), a)
    np.testing.assert_allclose(pl.euler_integrate(const, z, 10), a, atol=1e-14)


def test_action_bounds_clamped():
    out = pl.denormalize_actions(np.full((8, 5), 50.0))
    assert np.all(np.abs(out[:, :4]) <= sw.STEP_BOUNDS) and np.all(out[:, 4] == 1.0)
    np.testing.assert_allclose(pl.denormalize_actions(pl.normalize_actions(np.array([[0.01, -0.02, 0, 0.05, 0.25]]))),
                               [[0.01, -0.02, 0, 0.05, 0.25]])


def test_oracle_planner_trace():
    spec = sw.TASKS["object_into_drawer"]
    s = sw.reset(spec, 0)
    tracker = sw.ProgressTracker(spec)
    planner = pl.OraclePlanner(spec, tracker)
    out = planner.think(s)
    assert out.chain == [("Open", "drawer"), ("Pick", "block0"), ("Place", "drawer")]
    assert (out.progress, out.sigma) == (0, "Open")
    s.ext["drawer"] = 1.0
    tracker.update(s)
    out = planner.think(s)
    assert (out.progress, out.sigma) == (1, "Pick")
    s, _, _ = sw.run_expert(s, spec.decomposition[1], np.random.default_rng(0))
    tracker.update(s)
    assert planner.think(s).sigma == "Place"
    # block slips out of the gripper: progress regresses to the Pick step
    s.held = -1
    s.obj_pos[0, 2] = sw.TABLE_Z
    tracker.update(s)
    out = planner.think(s)
    assert (out.progress, out.sigma) == (1, "Pick") and tracker.regressions == 1


@pytest.mark.parametrize("task", sorted(sw.TASKS))
def test_scripted_closure(task):
    res, _ = pl.run_episode(pl.Policy(actor="scripted"), sw.TASKS[task], 7)
    assert res.success and res.mode_trace[0][0] == "Think"
    assert all(s["done"] for s in res.subtasks)


@pytest.fixture(scope="module")
def random_bundle():
    return tr.build_variant(tr.TrainCfg(d_model=16, d_hidden=32))


@pytest.mark.parametrize("mode", ["oracle", "learned", "watchdog"])
def test_first_event_is_think(random_bundle, mode):
    pol = pl.Policy(random_bundle, planner="learned", mode=mode, flow_steps=2)
    res, _ = pl.run_episode(pol, sw.TASKS["objects_in_plate"], 0, pl.Limits(max_steps=60))
    assert res.modes()[0] == "Think" and res.think_steps[0] == 0


def test_latch_persistence(random_bundle):
    pol = pl.Policy(random_bundle, planner="learned", mode="watchdog", flow_steps=2)
    res, _ = pl.run_episode(pol, sw.TASKS["object_into_drawer"], 1, pl.Limits(max_steps=150, watchdog=24))
    assert res.reason == "timeout" and len(res.route_trace) > 1
    by_think = {r[0]: (r[1], r[2]) for r in res.route_trace}
    for ti, k, w, _ in res.act_trace:
        assert (k, w) == by_think[ti]


def test_learned_planner_only_compatible_targets(random_bundle):
    b = copy.deepcopy(random_bundle)
    rng = np.random.default_rng(3)
    for name in ("objects_in_plate", "object_into_drawer"):
        spec = sw.TASKS[name]
        st = sw.reset(spec, 0)
        for _ in range(30):
            # random heads push the argmax onto arbitrary (skill, target) pairs
            b.params["planner.target"] = rng.normal(0, 5, b.params["planner.target"].shape)
            for k in range(b.K):
                b.params[f"planner.skill.{k}"] = rng.normal(0, 5, b.params[f"planner.skill.{k}"].shape)
            out = pl.LearnedPlanner(b, spec).think(st)
            assert sw.compatible(st, out.sigma, out.subtask.target)


def test_unregistered_latch(random_bundle):
    with pytest.raises(sm.RoutingError):
        random_bundle.route_skill("Press")


def test_perturbation_rethink():
    pol = pl.Policy(actor="scripted")
    lim = pl.Limits()
    for seed in range(5):
        out = pl.perturbation_trial(pol, seed, lim)
        assert out["fired_at"] is not None
        assert out["delay"] <= lim.watchdog and out["relatched"] == "Pick"
        assert out["result"].success


def test_overfit_single_chunk():
    es = sw.generate_dataset(sw.suite_specs(["grasp_block"]), 1, seed=0)
    tab = tr.build_frame_table(es, tr.BASE_SKILLS)
    i = slice(10, 11)
    one = replace(tab, obs=tab.obs[i], tfeat=tab.tfeat[i], skill=tab.skill[i], target=tab.target[i],
                  chunk=tab.chunk[i], episode=tab.episode[i])
    cfg = tr.TrainCfg(steps=2000, warmup=100, batch=16, lam_mode=0.0, lam_plan=0.0, eval_every=10**9)
    b = tr.train(cfg, one).weights(use_ema=False)
    ctx = np.concatenate([one.obs[0], one.tfeat[0]])
    for s in range(3):
        a = pl.act(b, ctx, b.route_skill("Pick"), 10, np.random.default_rng(s))
        assert np.mean((pl.normalize_actions(a) - one.chunk[0]) ** 2) <= 1e-3


def test_episode_json_shape():
    res, _ = pl.run_episode(pl.Policy(actor="scripted"), sw.TASKS["grasp_block"], 0)
    d = res.to_json()
    assert {"task", "seed", "success", "subtasks", "steps", "mode_trace", "route_trace"} <= set(d)
    assert sum(c for _, c in d["mode_trace"]) == len(res.modes())
    assert pl.rle(["A", "A", "B"]) == [["A", 2], ["B", 1]]
