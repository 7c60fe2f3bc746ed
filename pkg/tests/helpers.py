"""Shared test utilities: central finite differences and small scene fixtures."""

from __future__ import annotations

import numpy as np

from transnet import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    num = np.linalg.norm(np.asarray(a) - np.asarray(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(num / den)


def check_params(loss_fn, params, h: float = 1e-5, floor: float = 1e-12) -> float:
    """Worst relative error between autodiff and finite-difference grads over ``params``.

    ``loss_fn`` builds the scalar loss from the current parameter values.
    ``floor`` bounds the denominator from below, for tensors whose true
    gradient is exactly zero and whose difference quotient is pure rounding.
    """
    for p in params:
        p.grad = np.zeros_like(p.data)
    with ad.Graph():
        loss = loss_fn()
        ad.backward(loss)
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: loss_fn().item(), p.data, h)
        worst = max(worst, rel_error(p.grad, num, floor))
    return worst


def directional_check(loss_fn, params, rng: np.random.Generator, h: float = 1e-5, floor: float = 1e-12) -> float:
    """Worst relative error of <grad, v> against a central difference along a random unit ``v``.

    One direction per parameter tensor, so every tensor is checked with two
    extra forward passes.
    """
    for p in params:
        p.grad = np.zeros_like(p.data)
    with ad.Graph():
        ad.backward(loss_fn())
    worst = 0.0
    for p in params:
        v = rng.normal(size=p.data.shape)
        v /= np.linalg.norm(v)
        orig = p.data.copy()
        p.data[...] = orig + h * v
        fp = loss_fn().item()
        p.data[...] = orig - h * v
        fm = loss_fn().item()
        p.data[...] = orig
        num = (fp - fm) / (2 * h)
        ana = float(np.sum(p.grad * v))
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
    return worst


# Smallest end-to-end run configuration (seconds per pipeline stage).
TINY = """\
train_scenes_per_category = 3
test_scenes_per_category = 2
train_instances_per_category = 2
test_instances_per_category = 1
patch_res = 32
mesh_segments = 12
s1_hidden = 4
s1_layers = 2
s1_crop = 16
s1_batch = 2
s1_pretrain_steps = 3
s1_joint_steps = 3
s1_warmup = 1
s1_train_scenes = 6
n_points = 16
d_emb = 8
d_global = 8
blocks = 1
heads = 2
d_hidden = 8
epochs = 2
batch = 2
warmup_steps = 1
checkpoint_every = 2
"""


def variant(**overrides):
    lines = [ln for ln in TINY.splitlines() if ln.split(" = ")[0] not in overrides]
    return "\n".join(lines + [f"{k} = {v}" for k, v in overrides.items()]) + "\n"
