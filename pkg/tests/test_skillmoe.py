import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from atomicvla import netcore as nc
from atomicvla import skillmoe as sm
from atomicvla.netcore import GatedFfnParams
from atomicvla.skillmoe import ModelCfg, RouterParams, Routing

SKILLS = ["Pick", "Place", "Open", "Close", "Turn"]
# sin/cos table for sigma = 10 from an mpmath script (30 digits), frozen here
SIGMA10 = [0.479425538604203, 0.8775825618903728, 0.7765299800281857, 0.6300803044988992, 0.9999465167896046,
           -0.010342318905209131, 0.3239352036100923, -0.9460792693332245, -0.9589242746631385, 0.28366218546322625,
           0.5084475199353299, -0.8610929795739902, -0.10324074641368039, -0.9946563970939644, 0.15662013791589313,
           -0.9876589150102411]


def small_cfg(variant="sg_moe", **kw):
    base = dict(variant=variant, d_in=12, d_model=8, d_hidden=16, n_blocks=2, horizon=4, d_mode=6, d_plan=5, n_targets=3)
    base.update(kw)
    return ModelCfg(**base)


def test_sigma_grid():
    reg = sm.make_registry([])
    assert sm.assign_sigma(reg, "Pick") == pytest.approx(1.3111339374215643, rel=1e-12)
    reg = sm.make_registry([f"s{i}" for i in range(15)])
    assert sm.assign_sigma(reg, "last") == pytest.approx(76.26985859023443, rel=1e-12)
    full = sm.register(reg, "last")
    with pytest.raises(sm.CapacityError):
        sm.assign_sigma(full, "one_more")
    with pytest.raises(sm.ConflictError):
        sm.assign_sigma(full, "s3")


def test_registry_invariants():
    reg = sm.make_registry(SKILLS)
    assert [e.expert for e in reg.entries] == list(range(5))
    assert all(a.sigma < b.sigma for a, b in zip(reg.entries, reg.entries[1:]))
    assert sm.SkillRegistry.from_json(reg.to_json()) == reg
    with pytest.raises(sm.RoutingError):
        reg.index("Press")


def test_embed_endpoints():
    z = sm.embed_sigma(1.0)
    np.testing.assert_array_equal(z[0::2], 0.0)
    np.testing.assert_array_equal(z[1::2], 1.0)
    assert sm.embed_sigma(100.0)[0] == pytest.approx(math.sin(1.0))
    np.testing.assert_allclose(sm.embed_sigma(10.0, 16), SIGMA10, rtol=0, atol=1e-13)


def test_embed_domain():
    for bad in (0.0, 0.5, 100.5, float("nan")):
        with pytest.raises(sm.DomainError):
            sm.embed_sigma(bad)
    with pytest.raises(nc.DimensionError):
        sm.embed_sigma(5.0, 15)


@given(st.floats(1.0, 100.0))
def test_embed_bounded(sigma):
    z = sm.embed_sigma(sigma)
    assert np.all(np.abs(z) <= 1.0) and z.shape == (16,)


def test_grid_embeddings_distinct():
    Z = np.stack([sm.embed_sigma(sm.sigma_grid(k)) for k in range(sm.K_MAX)])
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    cos = Z @ Z.T
    np.fill_diagonal(cos, 0.0)
    assert cos.max() < 1 - 1e-6


def _rp(logits):
    return RouterParams(np.zeros((4, len(logits))), np.array(logits, dtype=float))


def test_route_examples():
    d = sm.route(_rp([math.log(3), 0.0]), np.ones(4))
    assert d.k == 0 and d.w == pytest.approx(0.75) and d.probs == pytest.approx((0.75, 0.25))
    d = sm.route(_rp([0.0] * 5), np.ones(4))
    assert d.k == 0 and d.probs == pytest.approx((0.2,) * 5)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-500, 500)))
def test_softmax_simplex(logits):
    d = sm.route(_rp(logits), np.zeros(4))
    p = np.array(d.probs)
    assert abs(p.sum() - 1) <= 1e-6 and np.all(p >= 0)
    assert d.k == int(np.flatnonzero(p == p.max())[0]) and d.w == p[d.k]


def test_route_deterministic():
    rng = np.random.default_rng(0)
    rp = RouterParams(rng.normal(size=(16, 5)), rng.normal(size=5))
    z = sm.embed_sigma(7.0)
    assert sm.route(rp, z) == sm.route(rp, z)


def test_blend_toy():
    eye = np.eye(2)
    share = GatedFfnParams(eye, eye, eye)
    expert = GatedFfnParams(eye, eye, 2 * eye)
    x = np.array([[1.0, -1.0]])
    y, _ = sm.moe_block_forward(share, [expert], x, np.array([0]), np.array([0.75]))
    # F_share(x) = silu(x) x, F_1(x) = 2 silu(x) x, blend 0.25 / 0.75
    s1 = 1.0 / (1.0 + math.exp(-1.0))
    fx = np.array([s1, 1.0 - s1])
    np.testing.assert_allclose(y[0], x[0] + 1.75 * fx, rtol=1e-14)
    assert y[0] == pytest.approx([2.279352512602509, -0.529352512602509], rel=1e-12)


@pytest.mark.parametrize("w,which", [(0.0, "share"), (1.0, "expert")])
def test_blend_endpoints(w, which):
    rng = np.random.default_rng(1)
    share = GatedFfnParams.init(3, 5, 3, rng, np.float64)
    expert = GatedFfnParams.init(3, 5, 3, rng, np.float64)
    x = rng.normal(size=(4, 3))
    y, _ = sm.moe_block_forward(share, [expert], x, np.zeros(4, int), np.full(4, w))
    ref, _ = nc.gated_ffn_forward(share if which == "share" else expert, x)
    np.testing.assert_allclose(y, x + ref, rtol=0, atol=1e-15)


def test_blend_bad_expert():
    rng = np.random.default_rng(1)
    p = GatedFfnParams.init(3, 5, 3, rng, np.float64)
    with pytest.raises(nc.ContractError):
        sm.moe_block_forward(p, [p], np.zeros((2, 3)), np.array([0, 1]), np.ones(2))


def test_decoder_shared_only_when_w_zero():
    b = sm.build_bundle(small_cfg(), SKILLS, 0, np.float64)
    nm = sm.build_bundle(small_cfg("no_moe"), SKILLS, 0, np.float64)
    for k in nm.params:
        nm.params[k] = b.params[k]
    x = np.random.default_rng(2).normal(size=(3, 4, 12))
    v0, _, _ = sm.decoder_forward(b, x, Routing(fixed=sm.RouteDecision(2, 0.0, ())))
    v1, _, _ = sm.decoder_forward(nm, x, Routing())
    np.testing.assert_array_equal(v0, v1)


@pytest.mark.parametrize("variant", sm.VARIANTS)
def test_param_count_affine(variant):
    counts = {K: sm.build_bundle(small_cfg(variant), [f"s{i}" for i in range(K)], 0).param_count()
              for K in (0, 1, 5, 8, 12)}
    base, per = sm.count_breakdown(small_cfg(variant))
    assert counts[0] == base
    for K, n in counts.items():
        assert n == base + K * per


def test_expansion_preserves_old_tensors():
    b = sm.build_bundle(small_cfg(), SKILLS, 3)
    e = sm.expand_skill_library(b, "Press", 9)
    assert e.K == 6 and e.registry.index("Press") == 5
    for k, v in b.params.items():
        assert e.params[k].tobytes() == v.tobytes()
    assert not e.params["router.bias.5"].any()
    assert np.abs(e.params["router.col.5"]).max() < 1e-3
    e2 = sm.expand_skill_library(e, "Wipe", 9)
    assert e2.K == 7 and e2.registry.names[-2:] == ["Press", "Wipe"]


def test_expansion_renormalizes():
    b = sm.build_bundle(small_cfg(), ["A", "B"], 0, np.float64)
    for k in range(2):
        b.params[f"router.col.{k}"] = np.zeros(16)
    b.params["router.bias.0"] = np.array([math.log(3)])
    b.params["router.bias.1"] = np.array([0.0])
    e = sm.expand_skill_library(b, "C", 4)
    for name in ("A", "B"):
        before, after = b.route_skill(name), e.route_skill(name)
        assert after.probs == pytest.approx((0.6, 0.2, 0.2), abs=1e-3)
        assert after.k == before.k == 0
        # gate drift bound from the stored logits: e^{z_new} / S
        z = b.skill_embedding(name)
        new_logit = float(z @ e.params["router.col.2"])
        S = 3.0 + 1.0
        assert abs(after.w - before.w) <= math.exp(new_logit) / S * before.w + 1e-12


def test_freeze_mask():
    b = sm.build_bundle(small_cfg(), SKILLS, 0)
    with pytest.raises(nc.ContractError):
        sm.freeze_for_continual(b)
    e = sm.expand_skill_library(b, "Press", 1)
    mask = sm.freeze_for_continual(e)
    trainable = sorted(k for k, t in mask.items() if t)
    assert len(trainable) == len(sm.expert_tensor_names(e.cfg, 5)) + 2
    assert "router.col.5" in trainable and "blocks.0.share.gate" not in trainable
    grads = {k: np.ones_like(v) for k, v in e.params.items()}
    new, _ = nc.adamw_step(nc.OptState.init(e.params), e.params, grads, 1e-2, trainable=mask)
    for k, t in mask.items():
        assert (new[k].tobytes() == e.params[k].tobytes()) != t


def test_router_ce_targets_bound_expert():
    b = sm.build_bundle(small_cfg(), SKILLS, 0, np.float64)
    loss0, g = sm.router_ce(b)
    assert loss0 == pytest.approx(math.log(5), rel=0.05)
    for _ in range(300):
        _, g = sm.router_ce(b)
        for k, v in g.items():
            b.params[k] = b.params[k] - 2.0 * v
    for n in SKILLS:
        d = b.route_skill(n)
        assert d.k == b.registry.index(n)
