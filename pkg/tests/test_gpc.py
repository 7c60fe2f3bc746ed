import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transnet.geometry import CameraIntrinsics, backproject
from transnet.gpc import (ALL_GROUPS, GeneralizedPointCloud, build_gpc, channel_slices, feature_width, point_source,
                          sample_gpc, sample_rows, translation_prior)
from transnet.synth import EmptyMaskError, generate_scene

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture(scope="module")
def bundle():
    return generate_scene("wine_cup", 42, 7)


def fake_stage1(b, seed=0):
    rng = np.random.default_rng(seed)
    d = np.where(b.mask, rng.uniform(0.4, 0.9, b.mask.shape), b.depth_raw)
    n = rng.normal(size=b.mask.shape + (3,))
    return d, n / np.linalg.norm(n, axis=-1, keepdims=True)


def test_width_and_channel_order(bundle):
    d, n = fake_stage1(bundle)
    g = build_gpc(bundle, d, n, 64, 3)
    assert g.features.shape == (64, 10)
    rows = g.rows
    np.testing.assert_array_equal(g.features[:, 0:3], bundle.rgb.reshape(-1, 3)[rows])
    np.testing.assert_array_equal(g.features[:, 3:6], bundle.rays.reshape(-1, 3)[rows])
    np.testing.assert_array_equal(g.features[:, 6], d.reshape(-1)[rows])
    np.testing.assert_array_equal(g.features[:, 7:10], n.reshape(-1, 3)[rows])
    assert np.all(bundle.mask.reshape(-1)[rows])
    assert g.onehot.tolist() == [0, 0, 1, 0]


def test_cloud_invariants(bundle):
    d, n = fake_stage1(bundle)
    g = build_gpc(bundle, d, n, 200, 1)
    s = channel_slices()
    assert np.allclose(np.linalg.norm(g.features[:, s["ray"]], axis=1), 1, atol=1e-12)
    assert np.allclose(np.linalg.norm(g.features[:, s["normal"]], axis=1), 1, atol=1e-12)
    assert np.all(g.features[:, s["depth"]] > 0)


def test_channel_groups():
    assert feature_width() == 10
    assert feature_width(("rgb", "depth", "normal")) == 7
    assert feature_width(("rgb", "ray", "depth")) == 7
    assert channel_slices(("rgb", "depth", "normal"))["normal"] == slice(4, 7)


def test_dropping_groups_keeps_order(bundle):
    d, n = fake_stage1(bundle)
    src = point_source(bundle, d, n)
    full, no_ray = sample_gpc(src, 32, 5), sample_gpc(src, 32, 5, ("rgb", "depth", "normal"))
    np.testing.assert_array_equal(no_ray.features, np.delete(full.features, [3, 4, 5], axis=1))
    np.testing.assert_array_equal(no_ray.depth, full.depth)


def test_exhaustive_sample_of_tiny_mask(bundle):
    b = generate_scene("wine_cup", 42, 7)
    idx = np.flatnonzero(b.mask)[:5]
    b.mask = np.zeros_like(b.mask)
    b.mask.reshape(-1)[idx] = True
    d, n = fake_stage1(b)
    g = build_gpc(b, d, n, 5, 11)
    assert sorted(g.rows.tolist()) == sorted(idx.tolist())


def test_with_replacement_when_mask_is_small(bundle):
    b = generate_scene("wine_cup", 42, 7)
    idx = np.flatnonzero(b.mask)[:3]
    b.mask = np.zeros_like(b.mask)
    b.mask.reshape(-1)[idx] = True
    d, n = fake_stage1(b)
    g = build_gpc(b, d, n, 16, 0)
    assert g.n == 16 and set(g.rows.tolist()) <= set(idx.tolist())


def test_determinism(bundle):
    d, n = fake_stage1(bundle)
    a, b = build_gpc(bundle, d, n, 50, 9), build_gpc(bundle, d, n, 50, 9)
    assert a.rows.tolist() == b.rows.tolist() and a.features.tobytes() == b.features.tobytes()
    assert build_gpc(bundle, d, n, 50, 10).rows.tolist() != a.rows.tolist()


def test_empty_mask_raises(bundle):
    b = generate_scene("wine_cup", 42, 7)
    b.mask = np.zeros_like(b.mask)
    d, n = fake_stage1(b)
    with pytest.raises(EmptyMaskError):
        build_gpc(b, d, n, 8, 0)


def test_sampling_is_uniform():
    counts = np.zeros(100)
    for seed in range(10_000):
        counts[sample_rows(100, 10, seed)] += 1
    freq = counts / 10_000
    sigma = np.sqrt(0.1 * 0.9 / 10_000)
    assert np.all(np.abs(freq - 0.1) <= 3 * sigma)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_row_count_is_always_n(population, n, seed):
    rows = sample_rows(population, n, seed)
    assert len(rows) == n and rows.min() >= 0 and rows.max() < population
    if population >= n:
        assert len(set(rows.tolist())) == n


# ---------------------------------------------------------------- translation prior

def cloud(pixels, depth):
    pixels, depth = np.asarray(pixels, float), np.asarray(depth, float)
    return GeneralizedPointCloud(np.zeros((len(depth), 10)), pixels, depth, np.eye(4)[0], "bowl", 0)


def test_prior_examples():
    np.testing.assert_allclose(translation_prior(cloud([[320, 240]], [2.0]), K), [0, 0, 2])
    np.testing.assert_allclose(translation_prior(cloud([[300, 240], [340, 240]], [1.5, 1.5]), K), [0, 0, 1.5],
                               atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
def test_prior_matches_loop_and_scales(seed, alpha):
    rng = np.random.default_rng(seed)
    px = rng.uniform(0, 640, (20, 2))
    d = rng.uniform(0.3, 2.0, 20)
    brute = np.mean([backproject(K, u, v, z) for (u, v), z in zip(px, d)], axis=0)
    t = translation_prior(cloud(px, d), K)
    assert np.max(np.abs(t - brute)) < 1e-12
    np.testing.assert_allclose(translation_prior(cloud(px, alpha * d), K), alpha * t, rtol=1e-12)
