"""Parametric glassware categories.

Profiles are (radius, height) polylines in normalised units: the widest
radius is 0.5 and the height spans [0, 1], so a per-axis scale of
(d, d, h) gives a body of diameter d and height h metres. Every profile
starts and ends on the axis, which closes the revolved surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CategorySpec:
    name: str
    profile: tuple[tuple[float, float], ...]
    scale_min: tuple[float, float, float]
    scale_max: tuple[float, float, float]
    symmetric: bool
    handle: bool = False

    def __post_init__(self):
        prof = np.asarray(self.profile)
        if np.any(prof[:, 0] < 0):
            raise ValueError(f"{self.name}: negative profile radius")
        if np.any(np.asarray(self.scale_min) <= 0) or np.any(np.asarray(self.scale_max) < self.scale_min):
            raise ValueError(f"{self.name}: invalid scale range")


CATEGORIES: dict[str, CategorySpec] = {
    "bowl": CategorySpec(
        "bowl",
        ((0.0, 0.0), (0.22, 0.0), (0.23, 0.06), (0.34, 0.25), (0.44, 0.55), (0.49, 0.85), (0.5, 1.0), (0.0, 1.0)),
        (0.12, 0.12, 0.05), (0.18, 0.18, 0.08), symmetric=True),
    "water_cup": CategorySpec(
        "water_cup",
        ((0.0, 0.0), (0.38, 0.0), (0.4, 0.03), (0.5, 1.0), (0.0, 1.0)),
        (0.06, 0.06, 0.09), (0.09, 0.09, 0.14), symmetric=True),
    "wine_cup": CategorySpec(
        "wine_cup",
        ((0.0, 0.0), (0.36, 0.0), (0.36, 0.02), (0.08, 0.05), (0.05, 0.1), (0.05, 0.42),
         (0.26, 0.5), (0.42, 0.62), (0.5, 0.8), (0.47, 1.0), (0.0, 1.0)),
        (0.065, 0.065, 0.15), (0.09, 0.09, 0.21), symmetric=True),
    "mug": CategorySpec(
        "mug",
        ((0.0, 0.0), (0.46, 0.0), (0.5, 0.04), (0.5, 1.0), (0.0, 1.0)),
        (0.07, 0.07, 0.08), (0.095, 0.095, 0.11), symmetric=False, handle=True),
}

CATEGORY_NAMES: tuple[str, ...] = ("bowl", "water_cup", "wine_cup", "mug")


class CategoryError(KeyError):
    pass


def category_index(name: str) -> int:
    try:
        return CATEGORY_NAMES.index(name)
    except ValueError:
        raise CategoryError(f"unknown category {name!r}") from None


def sample_scale(spec: CategorySpec, rng: np.random.Generator) -> np.ndarray:
    """Draw per-axis scale; symmetric bodies keep equal x/y scale (circular cross-section)."""
    lo, hi = np.asarray(spec.scale_min), np.asarray(spec.scale_max)
    s = rng.uniform(lo, hi)
    s[1] = s[0]
    return s
