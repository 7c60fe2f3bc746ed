"""Generalized point cloud: per-pixel multi-modal samples from the object mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, backproject
from .synth.categories import CATEGORY_NAMES, category_index
from .synth.render import EmptyMaskError

# channel groups in their fixed order, with widths
CHANNEL_GROUPS = (("rgb", 3), ("ray", 3), ("depth", 1), ("normal", 3))
ALL_GROUPS = tuple(name for name, _ in CHANNEL_GROUPS)


def channel_slices(groups=ALL_GROUPS) -> dict[str, slice]:
    """Column range of each group inside a feature matrix built from ``groups``."""
    out, start = {}, 0
    for name, width in CHANNEL_GROUPS:
        if name in groups:
            out[name] = slice(start, start + width)
            start += width
    return out


def feature_width(groups=ALL_GROUPS) -> int:
    return sum(w for name, w in CHANNEL_GROUPS if name in groups)


@dataclass
class GeneralizedPointCloud:
    features: np.ndarray      # (N, C), groups in CHANNEL_GROUPS order
    pixels: np.ndarray        # (N, 2) continuous image coordinates (u, v)
    depth: np.ndarray         # (N,) completed depth, kept even when the depth channel is dropped
    onehot: np.ndarray        # (len(CATEGORY_NAMES),)
    category: str
    seed: int
    groups: tuple[str, ...] = ALL_GROUPS
    rows: np.ndarray | None = None  # flat patch indices of the sampled pixels

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class PointSource:
    """Every masked pixel of one scene with its full 10-channel feature row.

    Point clouds are drawn from this cache so the stage-1 outputs need only
    be computed once per scene.
    """

    features: np.ndarray      # (M, 10) in CHANNEL_GROUPS order
    pixels: np.ndarray        # (M, 2)
    flat_index: np.ndarray    # (M,) patch index of each row
    category: str

    @property
    def m(self) -> int:
        return self.features.shape[0]


def point_source(bundle, depth: np.ndarray, normal: np.ndarray) -> PointSource:
    flat = np.flatnonzero(bundle.mask.reshape(-1))
    if flat.size == 0:
        raise EmptyMaskError("cannot sample a point cloud from an empty mask")
    uu, vv = bundle.box.pixel_coords()
    feats = np.concatenate([
        bundle.rgb.reshape(-1, 3)[flat],
        bundle.rays.reshape(-1, 3)[flat],
        depth.reshape(-1)[flat][:, None],
        normal.reshape(-1, 3)[flat],
    ], axis=-1)
    pixels = np.stack([uu.reshape(-1)[flat], vv.reshape(-1)[flat]], axis=-1)
    category_index(bundle.category)
    return PointSource(feats, pixels, flat, bundle.category)


def sample_rows(population: int, n: int, seed: int) -> np.ndarray:
    """Row indices into a population; without replacement when it holds at least ``n`` rows."""
    if population == 0:
        raise EmptyMaskError("cannot sample a point cloud from an empty mask")
    if n < 1:
        raise ValueError(f"N must be positive, got {n}")
    rng = np.random.default_rng(seed)
    return rng.choice(population, size=n, replace=population < n)


def sample_gpc(source: PointSource, n: int, seed: int, groups=ALL_GROUPS) -> GeneralizedPointCloud:
    groups = tuple(g for g in ALL_GROUPS if g in groups)
    rows = sample_rows(source.m, n, seed)
    full = source.features[rows]
    cols = channel_slices(ALL_GROUPS)
    feats = np.concatenate([full[:, cols[g]] for g in groups], axis=-1)
    onehot = np.zeros(len(CATEGORY_NAMES))
    onehot[category_index(source.category)] = 1.0
    return GeneralizedPointCloud(feats, source.pixels[rows], full[:, 6].copy(), onehot, source.category,
                                 int(seed), groups, source.flat_index[rows])


def build_gpc(bundle, depth: np.ndarray, normal: np.ndarray, n: int, seed: int,
              groups=ALL_GROUPS) -> GeneralizedPointCloud:
    """Sample ``n`` masked pixels and stack their RGB, ray, completed depth and normal."""
    return sample_gpc(point_source(bundle, depth, normal), n, seed, groups)


def translation_prior(gpc: GeneralizedPointCloud, K: CameraIntrinsics) -> np.ndarray:
    """Mean back-projected 3D point over the sampled pixels."""
    pts = backproject(K, gpc.pixels[:, 0], gpc.pixels[:, 1], gpc.depth)
    return pts.mean(axis=0)
