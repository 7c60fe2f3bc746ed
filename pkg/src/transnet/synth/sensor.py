"""Transparent-sensor depth corruption and background-dominated RGB."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CorruptionParams:
    dropout: float = 0.6
    sigma: float = 0.005
    bias: float = 0.015
    period: float = 48.0

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f"dropout must lie in [0, 1], got {self.dropout}")
        if self.sigma < 0 or self.bias < 0:
            raise ValueError("noise and bias amplitudes must be non-negative")
        if self.period <= 0:
            raise ValueError("bias period must be positive")


def corrupt_depth(depth_gt: np.ndarray, mask: np.ndarray, params: CorruptionParams, seed) -> np.ndarray:
    """Raw sensor depth: masked pixels are dropped, jittered and smoothly biased.

    Pixels outside ``mask`` are returned untouched.
    """
    rng = np.random.default_rng(seed)
    H, W = depth_gt.shape
    mask = np.asarray(mask, dtype=bool)
    drop = rng.random((H, W)) < params.dropout
    noise = rng.standard_normal((H, W)) * params.sigma
    gamma = rng.uniform(0.0, 2.0 * np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ii, jj = np.mgrid[0:H, 0:W]
    wave = np.sin(2.0 * np.pi * (jj * np.cos(gamma) + ii * np.sin(gamma)) / params.period + phase)
    raw = depth_gt.astype(np.float64).copy()
    inside = mask & ~drop
    raw[inside] = raw[inside] + noise[inside] + params.bias * wave[inside]
    raw[mask & drop] = 0.0
    # a surviving reading never flips sign
    raw[inside] = np.maximum(raw[inside], 1e-3)
    return raw


def fresnel(cos_incidence: np.ndarray, f0: float = 0.04) -> np.ndarray:
    """Schlick reflectance; grows as the view becomes grazing."""
    c = np.clip(np.abs(cos_incidence), 0.0, 1.0)
    return f0 + (1.0 - f0) * (1.0 - c) ** 5


def synth_rgb(normal: np.ndarray, mask: np.ndarray, rays: np.ndarray, seed) -> np.ndarray:
    """Background gradient plus a rim-brightness term on the object."""
    rng = np.random.default_rng(seed)
    H, W = mask.shape
    c0 = rng.uniform(0.15, 0.6, size=3)
    c1 = rng.uniform(0.15, 0.6, size=3)
    gamma = rng.uniform(0.0, 2.0 * np.pi)
    ii, jj = np.mgrid[0:H, 0:W]
    s = (jj * np.cos(gamma) + ii * np.sin(gamma)) / max(H, W)
    s = (s - s.min()) / max(s.max() - s.min(), 1e-12)
    bg = c0 + (c1 - c0) * s[..., None]
    rgb = bg.copy()
    cos_inc = np.einsum("ijk,ijk->ij", normal, rays)
    F = fresnel(cos_inc)[..., None]
    tinted = (1.0 - F) * bg + F
    rgb[mask] = tinted[mask]
    return np.clip(rgb, 0.0, 1.0)
