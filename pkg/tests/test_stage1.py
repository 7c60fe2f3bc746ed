import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transnet import autodiff as ad
from transnet.autodiff import DimensionError, Tensor
from transnet.geometry import CameraIntrinsics, backproject
from transnet.metrics import angular_errors_degrees
from transnet.stage1 import (PatchBatch, Stage1Config, Stage1Model, batch_from_bundles, complete_depth,
                             estimate_normals, loss_consistency, loss_depth, loss_normal, normal_from_depth_oracle,
                             run_stage1, stage1_losses)
from transnet.synth import DEFAULT_K, PatchBox, generate_scene, instance_seed, ray_map

from helpers import check_params

K64 = CameraIntrinsics(200.0, 200.0, 32.0, 32.0, 64, 64)
SMALL = Stage1Config(hidden=8, layers=3, crop=32, batch=4, pretrain_steps=80, joint_steps=40, warmup=10, seed=0)


def scenes(n, offset=0, split_offset=0):
    cats = ["bowl", "water_cup", "wine_cup", "mug"]
    return [generate_scene(cats[i % 4], instance_seed(0, cats[i % 4], split_offset + i % 5), offset + i)
            for i in range(n)]


@pytest.fixture(scope="module")
def trained():
    model, curves = run_stage1_quick()
    return model, curves


def run_stage1_quick():
    state = run_stage1(scenes(24), SMALL)
    return state.model, state.curves


def plane_batch(z=0.6, res=16):
    box = PatchBox(DEFAULT_K.cx - res / 2 + 0.5, DEFAULT_K.cy - res / 2 + 0.5, float(res), res)
    rays = ray_map(DEFAULT_K, box)
    depth = np.full((res, res), z)
    return depth, rays, box.size / res / DEFAULT_K.fx


# ---------------------------------------------------------------- depth completion

def test_empty_mask_passes_raw_through():
    model = Stage1Model.create(SMALL)
    rng = np.random.default_rng(0)
    raw = rng.uniform(0.3, 0.9, (16, 16))
    out = complete_depth(model, rng.random((16, 16, 3)), raw, np.zeros((16, 16), bool))
    assert out.tobytes() == raw.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_completed_depth_positive_and_raw_outside_mask(seed):
    rng = np.random.default_rng(seed)
    model = Stage1Model.create(Stage1Config(hidden=4, layers=2, seed=seed % 1000))
    raw = np.where(rng.random((12, 12)) < 0.5, 0.0, rng.uniform(0.3, 0.9, (12, 12)))
    mask = rng.random((12, 12)) < 0.6
    out = complete_depth(model, rng.random((12, 12, 3)), raw, mask)
    assert np.all(out[mask] > 0)
    assert out[~mask].tobytes() == raw[~mask].tobytes()


def test_shape_mismatch():
    model = Stage1Model.create(SMALL)
    with pytest.raises(DimensionError):
        complete_depth(model, np.zeros((8, 8, 3)), np.ones((8, 8)), np.ones((8, 9), bool))


# ---------------------------------------------------------------- normals

def test_estimated_normals_unit_and_shaped():
    model = Stage1Model.create(SMALL)
    b = scenes(1)[0]
    n = estimate_normals(model, b.depth_gt, b.rays, b.box.size / b.res / b.K.fx)
    assert n.shape == b.depth_gt.shape + (3,)
    assert np.max(np.abs(np.linalg.norm(n, axis=-1) - 1)) < 1e-9
    assert np.all(np.einsum("hwk,hwk->hw", n, b.rays) <= 0)


def test_oracle_plane():
    n = normal_from_depth_oracle(np.full((16, 16), 2.0), K64)
    np.testing.assert_allclose(n, np.broadcast_to([0, 0, -1.0], n.shape), atol=1e-12)


def test_oracle_plane_scale_invariant():
    # tilted plane z = 1 + 0.3 x: scaling depth by 2 keeps the normal
    v, u = np.mgrid[0:16, 0:16].astype(float)
    x = (u - K64.cx) / K64.fx
    d = 1.0 / (1.0 - 0.3 * x)
    n1, n2 = normal_from_depth_oracle(d, K64), normal_from_depth_oracle(2 * d, K64)
    np.testing.assert_allclose(n1, n2, atol=1e-12)
    expected = np.array([0.3, 0.0, -1.0]) / np.hypot(0.3, 1.0)
    np.testing.assert_allclose(n1[1:-1, 1:-1], np.broadcast_to(expected, (14, 14, 3)), atol=1e-9)


def test_oracle_sphere_within_three_degrees():
    z0, r = 1.0, 0.3
    v, u = np.mgrid[0:64, 0:64].astype(float)
    x, y = (u - K64.cx) / K64.fx, (v - K64.cy) / K64.fy
    # nearest ray-sphere intersection, expressed as z-depth
    a = x * x + y * y + 1
    b = -2 * z0
    c = z0 * z0 - r * r
    disc = b * b - 4 * a * c
    inside = disc > 0
    t = (-b - np.sqrt(np.where(inside, disc, 0))) / (2 * a)
    P = np.stack([x * t, y * t, t], -1)
    analytic = (P - [0, 0, z0]) / r
    n = normal_from_depth_oracle(np.where(inside, t, 0), K64)
    # interior: all 8 neighbours on the sphere, away from the silhouette
    core = inside.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            core &= np.roll(np.roll(inside, di, 0), dj, 1)
    core &= np.einsum("hwk,hwk->hw", analytic, -np.stack([x, y, np.ones_like(x)], -1)) / np.sqrt(a) > 0.3
    assert core.sum() > 500
    assert np.max(angular_errors_degrees(n[core], analytic[core])) < 3.0


def test_oracle_edges_replicate():
    n = normal_from_depth_oracle(np.full((3, 3), 1.0), K64)
    assert np.all(np.isfinite(n))


# ---------------------------------------------------------------- losses

def _gt_batch(n=2):
    return batch_from_bundles(scenes(n), crop=16, rng=np.random.default_rng(0))


def test_losses_zero_at_ground_truth():
    b = _gt_batch()
    assert loss_depth(Tensor(b.depth_gt), b.depth_gt, b.mask).item() == 0.0
    assert loss_normal(Tensor(b.normal_gt), b.normal_gt, b.mask).item() == 0.0


def test_consistency_zero_when_completion_is_exact():
    model = Stage1Model.create(SMALL)
    b = _gt_batch()
    s1 = model.normal_net(Tensor(b.depth_gt), b.rays, b.spacing)
    s2 = model.normal_net(Tensor(b.depth_gt), b.rays, b.spacing)
    assert loss_consistency(s1, s2, b.mask).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masked_losses_ignore_outside(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((2, 6, 6)) < 0.5
    mask[0, 0, 0] = True
    gt, pred = rng.normal(size=(2, 6, 6, 3)), rng.normal(size=(2, 6, 6, 3))
    other = np.where(mask[..., None], pred, rng.normal(size=pred.shape) * 100)
    a = loss_normal(Tensor(pred), gt, mask).item()
    assert a >= 0
    assert a == loss_normal(Tensor(other), gt, mask).item()
    d, dg = rng.uniform(0.3, 1, (2, 6, 6)), rng.uniform(0.3, 1, (2, 6, 6))
    d2 = np.where(mask, d, 5.0)
    assert loss_depth(Tensor(d), dg, mask).item() == loss_depth(Tensor(d2), dg, mask).item()


def test_mask_normalisation_hand_computed():
    mask = np.array([[[True, False], [True, False]]])
    pred = np.array([[[1.0, 9.0], [3.0, 9.0]]])
    gt = np.zeros((1, 2, 2))
    assert loss_depth(Tensor(pred), gt, mask).item() == pytest.approx((1 + 9) / 2)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_through_both_networks(seed):
    model = Stage1Model.create(Stage1Config(hidden=4, layers=2, seed=seed))
    rng = np.random.default_rng(seed)
    b = batch_from_bundles(scenes(1, offset=seed), crop=8, rng=rng)
    params = model.depth_net.parameters() + model.normal_net.parameters()

    def loss():
        d_hat = model.depth_net(b.rgb, b.raw, b.mask)
        s_hat = model.normal_net(d_hat, b.rays, b.spacing)
        s_ref = model.normal_net(Tensor(b.depth_gt), b.rays, b.spacing)
        return (loss_depth(d_hat, b.depth_gt, b.mask) + loss_normal(s_hat, b.normal_gt, b.mask)
                + loss_consistency(s_hat, s_ref, b.mask))

    assert check_params(loss, params, h=1e-6) < 1e-4


def test_joint_consistency_reaches_depth_net_only():
    model = Stage1Model.create(SMALL)
    b = _gt_batch()
    params = model.depth_net.parameters() + model.normal_net.parameters()
    for p in params:
        p.grad = np.zeros_like(p.data)
    with ad.Graph():
        terms = stage1_losses(model, b, "joint", True)
        ad.backward(terms["L_con"])
    assert any(np.any(p.grad != 0) for p in model.depth_net.parameters())
    assert all(np.all(p.grad == 0) for p in model.normal_net.parameters())


def test_consistency_off_has_no_term():
    model = Stage1Model.create(SMALL)
    terms = stage1_losses(model, _gt_batch(), "joint", False)
    assert set(terms) == {"L_d", "L_s"}


# ---------------------------------------------------------------- training

def test_training_curves_and_phases(trained):
    model, curves = trained
    assert len(curves) == SMALL.pretrain_steps + SMALL.joint_steps
    assert {c["phase"] for c in curves} == {"pretrain", "joint"}
    assert all("L_con" in c for c in curves if c["phase"] == "joint")
    first = np.mean([c["L_d"] for c in curves[:10]])
    last = np.mean([c["L_d"] for c in curves[SMALL.pretrain_steps - 10:SMALL.pretrain_steps]])
    assert last < first


def test_trained_net_on_flat_plane(trained):
    model, _ = trained
    depth, rays, spacing = plane_batch()
    n = estimate_normals(model, depth, rays, spacing)
    err = angular_errors_degrees(n.reshape(-1, 3), np.tile([0, 0, -1.0], (n.size // 3, 1)))
    assert err.mean() < 15.0


def test_trained_completion_beats_raw_depth(trained):
    model, _ = trained
    held = scenes(8, offset=5000, split_offset=40)
    ours, raw = [], []
    for b, (d, _) in zip(held, model.predict(held)):
        m = b.mask
        ours.append(np.abs(d[m] - b.depth_gt[m]).mean())
        raw.append(np.abs(b.depth_raw[m] - b.depth_gt[m]).mean())
    assert np.mean(ours) < np.mean(raw)


def test_resume_reproduces_uninterrupted_run():
    cfg = Stage1Config(hidden=4, layers=2, crop=16, batch=2, pretrain_steps=4, joint_steps=4, warmup=2, seed=3)
    data = scenes(6)
    full = run_stage1(data, cfg)
    part = run_stage1(data, cfg, stop_at=5)
    assert len(part.curves) == 5 and not part.done
    resumed = run_stage1(data, cfg, state=part)
    assert resumed.curves == full.curves
    for k, v in full.model.state().items():
        assert resumed.model.state()[k].tobytes() == v.tobytes()


def test_empty_masks_are_skipped():
    data = scenes(3)
    empty = scenes(1)[0]
    empty.mask = np.zeros_like(empty.mask)
    cfg = Stage1Config(hidden=4, layers=2, crop=16, batch=2, pretrain_steps=1, joint_steps=1, warmup=1)
    state = run_stage1(data + [empty], cfg)
    assert state.skipped == 1
    with pytest.raises(ValueError):
        run_stage1([empty], cfg)
