"""Second-stage training losses.

All losses accept a single sample (vectors of shape (3,)) or a batch
(shape (B, 3)); a batch reduces by the mean over samples. Vector L1 terms
are the mean, not the sum, of absolute components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSS_NAMES = ("rx", "rz", "ra", "t", "s", "conx", "conz")


@dataclass(frozen=True)
class LossWeights:
    rx: float = 8e-4
    rz: float = 8e-4
    ra: float = 4e-4
    t: float = 8e-4
    s: float = 8e-4
    conx: float = 1e-4
    conz: float = 1e-4
    alpha: float = -5.0

    def __post_init__(self):
        for name in LOSS_NAMES:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if not self.alpha < 0:
            raise ValueError("alpha must be negative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{n: getattr(self, n) * factor for n in LOSS_NAMES}, alpha=self.alpha)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _dot(a: Tensor, b: Tensor) -> Tensor:
    return ad.sum(a * b, axis=-1)


def loss_translation(t_hat, t_gt) -> Tensor:
    return ad.mean(ad.absolute(_t(t_hat) - _t(t_gt)))


def loss_scale(s_hat, s_gt) -> Tensor:
    return ad.mean(ad.absolute(_t(s_hat) - _t(s_gt)))


def loss_axis(a_hat, a_gt) -> Tensor:
    """Mean absolute error plus cosine distance."""
    a_hat, a_gt = _t(a_hat), _t(a_gt)
    return ad.mean(ad.absolute(a_hat - a_gt)) + (1.0 - ad.mean(_dot(a_hat, a_gt)))


def loss_angular(a_x, a_z) -> Tensor:
    """|<a_x, a_z>|: zero iff the axes are perpendicular."""
    return ad.mean(ad.absolute(_dot(_t(a_x), _t(a_z))))


def loss_confidence(c, a_hat, a_gt, alpha: float) -> Tensor:
    """|c - exp(alpha * ||a_hat - a_gt||)|."""
    c = _t(c)
    target = ad.exp(ad.scale(ad.norm(_t(a_hat) - _t(a_gt)), alpha))
    if c.shape != target.shape:
        c = ad.reshape(c, target.shape)
    return ad.mean(ad.absolute(c - target))


def loss_total(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum, accumulated in the fixed order of ``LOSS_NAMES``.

    Components that are missing are skipped.
    """
    total = None
    for name in LOSS_NAMES:
        if name not in components:
            continue
        term = ad.scale(_t(components[name]), getattr(weights, name))
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def component_losses(pred: dict[str, Tensor], gt: dict[str, np.ndarray], weights: LossWeights) -> dict[str, Tensor]:
    """All seven components from decoder outputs and ground truth.

    ``pred`` holds ``t``, ``s``, ``a_x``, ``a_z`` (raw unit axes), ``c_x``, ``c_z``;
    ``gt`` holds ``t``, ``s``, ``a_x``, ``a_z``.
    """
    return {
        "rx": loss_axis(pred["a_x"], gt["a_x"]),
        "rz": loss_axis(pred["a_z"], gt["a_z"]),
        "ra": loss_angular(pred["a_x"], pred["a_z"]),
        "t": loss_translation(pred["t"], gt["t"]),
        "s": loss_scale(pred["s"], gt["s"]),
        "conx": loss_confidence(pred["c_x"], pred["a_x"], gt["a_x"], weights.alpha),
        "conz": loss_confidence(pred["c_z"], pred["a_z"], gt["a_z"], weights.alpha),
    }
