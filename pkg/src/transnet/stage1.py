"""Depth completion and surface-normal estimation with cross-task consistency.

Both networks are stacks of 3x3 local filters. ``DepthNet`` fills the
masked region of a raw depth patch; ``NormalNet`` maps a depth patch to
camera-facing unit normals. Training optimises the masked L2 losses of
each task plus a consistency term that compares normals predicted from
completed depth against normals predicted from ground-truth depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import CameraIntrinsics
from .nn import Linear, Module
from .optim import OptimConfig, Optimizer

log = logging.getLogger(__name__)

_SOFTPLUS_ONE = float(np.log(np.e - 1.0))  # softplus(_SOFTPLUS_ONE) == 1


class LocalNet(Module):
    """3x3 local filters with ReLU between layers; spatial size is preserved."""

    def __init__(self, n_in: int, hidden: int, n_out: int, layers: int, rng: np.random.Generator):
        sizes = [n_in] + [hidden] * (layers - 1) + [n_out]
        self.n_in, self.n_out = n_in, n_out
        self.filters = [Linear(9 * a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        last = self.filters[-1]
        last.weight.data *= 0.1

    def __call__(self, x: Tensor) -> Tensor:
        for i, f in enumerate(self.filters):
            x = f(ad.unfold3x3(x))
            if i < len(self.filters) - 1:
                x = ad.relu(x)
        return x


@dataclass
class PatchBatch:
    """Stage-1 inputs for B patches of size H x W (numpy, float64)."""

    rgb: np.ndarray        # (B, H, W, 3)
    raw: np.ndarray        # (B, H, W)
    mask: np.ndarray       # (B, H, W) bool
    rays: np.ndarray       # (B, H, W, 3)
    spacing: np.ndarray    # (B,) angular size of one patch pixel (radians)
    depth_gt: np.ndarray | None = None
    normal_gt: np.ndarray | None = None

    def __len__(self) -> int:
        return self.raw.shape[0]


def batch_from_bundles(bundles, crop: int | None = None, rng: np.random.Generator | None = None) -> PatchBatch:
    """Stack bundles; optionally cut a ``crop`` x ``crop`` window around a random masked pixel."""
    parts = {k: [] for k in ("rgb", "raw", "mask", "rays", "depth_gt", "normal_gt")}
    spacing = []
    for b in bundles:
        sl = (slice(None), slice(None))
        if crop is not None and crop < b.res:
            ii, jj = np.nonzero(b.mask)
            k = rng.integers(len(ii)) if len(ii) else 0
            ci, cj = (ii[k], jj[k]) if len(ii) else (b.res // 2, b.res // 2)
            i0 = int(np.clip(ci - crop // 2, 0, b.res - crop))
            j0 = int(np.clip(cj - crop // 2, 0, b.res - crop))
            sl = (slice(i0, i0 + crop), slice(j0, j0 + crop))
        parts["rgb"].append(b.rgb[sl])
        parts["raw"].append(b.depth_raw[sl])
        parts["mask"].append(b.mask[sl])
        parts["rays"].append(b.rays[sl])
        parts["depth_gt"].append(b.depth_gt[sl])
        parts["normal_gt"].append(b.normal_gt[sl])
        spacing.append(b.box.size / b.res / b.K.fx)
    return PatchBatch(**{k: np.stack(v) for k, v in parts.items()}, spacing=np.array(spacing))


class DepthNet(Module):
    """Completes depth inside the mask; outside the mask the raw input passes through."""

    def __init__(self, hidden: int, layers: int, rng: np.random.Generator):
        self.net = LocalNet(6, hidden, 1, layers, rng)

    @staticmethod
    def reference_depth(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
        valid = mask & (raw > 0)
        cnt = valid.sum(axis=(1, 2))
        tot = np.where(valid, raw, 0.0).sum(axis=(1, 2))
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.6)

    def __call__(self, rgb: np.ndarray, raw: np.ndarray, mask: np.ndarray) -> Tensor:
        if raw.shape != mask.shape or rgb.shape[:3] != raw.shape:
            raise ad.DimensionError(f"patch shapes disagree: rgb {rgb.shape}, raw {raw.shape}, mask {mask.shape}")
        m = mask.astype(np.float64)
        valid = (mask & (raw > 0)).astype(np.float64)
        ref = self.reference_depth(raw, mask)[:, None, None]
        rel = valid * (raw / ref - 1.0) * 10.0
        x = np.concatenate([rgb, m[..., None], valid[..., None], rel[..., None]], axis=-1)
        y = self.net(Tensor(x))
        y = ad.reshape(y, raw.shape)
        inside = ad.softplus(y + _SOFTPLUS_ONE) * Tensor(np.broadcast_to(ref, raw.shape))
        return inside * Tensor(m) + Tensor(raw * (1.0 - m))


_DIFF = np.zeros((9, 2))
_DIFF[5, 0], _DIFF[3, 0] = 1.0, -1.0  # right - left
_DIFF[7, 1], _DIFF[1, 1] = 1.0, -1.0  # down - up


class NormalNet(Module):
    """Maps a depth patch to camera-facing unit normals.

    The network sees log-depth central differences scaled by the pixel's
    angular size, plus the normalised image-plane coordinates of each
    pixel. Its output is a residual on top of the first-order normal
    implied by those differences.
    """

    def __init__(self, hidden: int, layers: int, rng: np.random.Generator):
        self.net = LocalNet(7, hidden, 3, layers, rng)

    def __call__(self, depth: Tensor, rays: np.ndarray, spacing: np.ndarray) -> Tensor:
        B, H, W = depth.shape
        valid = depth.data > 0
        vf = valid.astype(np.float64)
        safe = depth * Tensor(vf) + Tensor(1.0 - vf)
        logd = ad.reshape(ad.log(safe), (B, H, W, 1))
        nb_valid = _neighbour_valid(valid)
        scale = nb_valid / (2.0 * spacing[:, None, None, None])
        g = ad.matmul(ad.unfold3x3(logd), Tensor(_DIFF)) * Tensor(scale)
        g = ad.scale(ad.tanh(ad.scale(g, 0.25)), 4.0)
        xt = rays[..., 0] / rays[..., 2]
        yt = rays[..., 1] / rays[..., 2]
        geo = np.stack([xt, yt, vf], axis=-1)
        feats = ad.concat([g, Tensor(nb_valid), Tensor(geo)], axis=-1)
        # first-order normal: (g_x, g_y, -(1 + g_x x + g_y y))
        gx = g[..., 0:1]
        gy = g[..., 1:2]
        third = ad.neg(gx * Tensor(xt[..., None]) + gy * Tensor(yt[..., None]) + 1.0)
        base = ad.concat([gx, gy, third], axis=-1)
        n = ad.l2_normalize(base + self.net(feats))
        flip = np.where(np.einsum("bhwk,bhwk->bhw", n.data, rays) > 0, -1.0, 1.0)[..., None]
        return n * Tensor(np.broadcast_to(flip, n.shape))


def frozen_copy(net: Module, template: Module) -> Module:
    """``template`` with every parameter replaced by a constant holding ``net``'s current values."""
    for (_, src), (_, dst) in zip(net.named_parameters(), template.named_parameters()):
        dst.data = src.data
        dst.requires_grad = False
        dst.grad = None
    return template


def _neighbour_valid(valid: np.ndarray) -> np.ndarray:
    """(B, H, W, 2): whether both horizontal / both vertical neighbours hold depth."""
    p = np.pad(valid, ((0, 0), (1, 1), (1, 1)), mode="edge")
    horiz = p[:, 1:-1, 2:] & p[:, 1:-1, :-2]
    vert = p[:, 2:, 1:-1] & p[:, :-2, 1:-1]
    return np.stack([horiz, vert], axis=-1).astype(np.float64)


# ---------------------------------------------------------------- losses

def masked_mean_sq(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """(1/N_p) sum over masked pixels of ||pred - target||^2."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    diff = pred - target
    sq = ad.square(diff)
    m = mask.astype(np.float64)
    if sq.ndim == m.ndim + 1:
        sq = ad.sum(sq, axis=-1)
    n = max(int(mask.sum()), 1)
    return ad.scale(ad.sum(sq * Tensor(m)), 1.0 / n)


def loss_depth(d_hat: Tensor, d_gt: np.ndarray, mask: np.ndarray) -> Tensor:
    return masked_mean_sq(d_hat, d_gt, mask)


def loss_normal(s_hat: Tensor, s_gt: np.ndarray, mask: np.ndarray) -> Tensor:
    return masked_mean_sq(s_hat, s_gt, mask)


def loss_consistency(s_hat: Tensor, s_from_gt_depth: Tensor, mask: np.ndarray) -> Tensor:
    return masked_mean_sq(s_hat, s_from_gt_depth, mask)


# ---------------------------------------------------------------- oracle

def normal_from_depth_oracle(depth: np.ndarray, K: CameraIntrinsics, pixel_u=None, pixel_v=None) -> np.ndarray:
    """Normals from central differences of back-projected neighbours.

    ``pixel_u``/``pixel_v`` give the image coordinates of every patch pixel
    (defaults to the integer grid starting at 0). Edge pixels use replicated
    neighbours. Output is unit length and faces the camera.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    if pixel_u is None:
        pixel_v, pixel_u = np.mgrid[0:H, 0:W].astype(np.float64)
    x = (pixel_u - K.cx) / K.fx
    y = (pixel_v - K.cy) / K.fy
    P = np.stack([x * depth, y * depth, depth], axis=-1)
    Pp = np.pad(P, ((1, 1), (1, 1), (0, 0)), mode="edge")
    du = Pp[1:-1, 2:] - Pp[1:-1, :-2]
    dv = Pp[2:, 1:-1] - Pp[:-2, 1:-1]
    n = np.cross(du, dv)
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)
    rays = np.stack([x, y, np.ones_like(x)], axis=-1)
    flip = np.einsum("hwk,hwk->hw", n, rays) > 0
    n[flip] *= -1.0
    return n


# ---------------------------------------------------------------- model + training

@dataclass
class Stage1Config:
    hidden: int = 16
    layers: int = 4
    crop: int = 32
    batch: int = 8
    pretrain_steps: int = 300
    joint_steps: int = 600
    lr: float = 2e-3
    warmup: int = 50
    consistency: bool = True
    w_con: float = 1.0
    seed: int = 0


@dataclass
class Stage1Model:
    depth_net: DepthNet
    normal_net: NormalNet
    config: Stage1Config = field(default_factory=Stage1Config)

    @classmethod
    def create(cls, cfg: Stage1Config) -> "Stage1Model":
        rng = np.random.default_rng(cfg.seed)
        return cls(DepthNet(cfg.hidden, cfg.layers, rng), NormalNet(cfg.hidden, cfg.layers, rng), cfg)

    def frozen_normal_net(self) -> NormalNet:
        template = NormalNet(self.config.hidden, self.config.layers, np.random.default_rng(0))
        return frozen_copy(self.normal_net, template)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"depth_net.{k}": p.data for k, p in self.depth_net.named_parameters()}
        out.update({f"normal_net.{k}": p.data for k, p in self.normal_net.named_parameters()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for prefix, net in (("depth_net.", self.depth_net), ("normal_net.", self.normal_net)):
            for k, p in net.named_parameters():
                p.data[...] = state[prefix + k]

    def complete_depth(self, batch: PatchBatch) -> np.ndarray:
        return self.depth_net(batch.rgb, batch.raw, batch.mask).data

    def estimate_normals(self, depth: np.ndarray, batch: PatchBatch) -> np.ndarray:
        return self.normal_net(Tensor(depth), batch.rays, batch.spacing).data

    def predict(self, bundles, batch_size: int = 16) -> list[tuple[np.ndarray, np.ndarray]]:
        """(completed depth, estimated normals) for every bundle, full patch."""
        out = []
        for i in range(0, len(bundles), batch_size):
            b = batch_from_bundles(bundles[i:i + batch_size])
            d = self.complete_depth(b)
            n = self.estimate_normals(d, b)
            out.extend(zip(d, n))
        return out


def complete_depth(model: Stage1Model, rgb: np.ndarray, raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Single-patch convenience wrapper around ``DepthNet``."""
    if rgb.shape[:2] != raw.shape or raw.shape != mask.shape:
        raise ad.DimensionError(f"patch shapes disagree: rgb {rgb.shape}, raw {raw.shape}, mask {mask.shape}")
    return model.depth_net(rgb[None], raw[None], np.asarray(mask, bool)[None]).data[0]


def estimate_normals(model: Stage1Model, depth: np.ndarray, rays: np.ndarray, spacing: float) -> np.ndarray:
    return model.normal_net(Tensor(depth[None]), rays[None], np.array([spacing])).data[0]


def stage1_losses(model: Stage1Model, batch: PatchBatch, phase: str, consistency: bool) -> dict[str, Tensor]:
    """Loss terms for one batch.

    ``phase="pretrain"``: depth net on L_d, normal net on L_s with GT depth as input.
    ``phase="joint"``: L_d trains the depth net, L_s trains the normal net on
    (detached) completed depth, and L_con couples the two: it is evaluated
    through a frozen copy of the normal net against a constant target, so its
    gradient reaches the depth net only.
    """
    mask = batch.mask
    d_hat = model.depth_net(batch.rgb, batch.raw, mask)
    out = {"L_d": loss_depth(d_hat, batch.depth_gt, mask)}
    if phase == "pretrain":
        s_gt_in = model.normal_net(Tensor(batch.depth_gt), batch.rays, batch.spacing)
        out["L_s"] = loss_normal(s_gt_in, batch.normal_gt, mask)
        return out
    s_hat_detached = model.normal_net(ad.detach(d_hat), batch.rays, batch.spacing)
    out["L_s"] = loss_normal(s_hat_detached, batch.normal_gt, mask)
    if consistency:
        frozen = model.frozen_normal_net()
        s_hat = frozen(d_hat, batch.rays, batch.spacing)
        s_ref = frozen(Tensor(batch.depth_gt), batch.rays, batch.spacing)
        out["L_con"] = loss_consistency(s_hat, s_ref, mask)
    return out


PHASES = ("pretrain", "joint")


@dataclass
class Stage1State:
    model: Stage1Model
    optimizer: Optimizer | None = None
    phase: int = 0          # index into PHASES
    step: int = 0           # steps completed inside the current phase
    curves: list[dict[str, float]] = field(default_factory=list)
    skipped: int = 0

    @property
    def done(self) -> bool:
        return self.phase >= len(PHASES)


def _phase_steps(cfg: Stage1Config, phase: int) -> int:
    return (cfg.pretrain_steps, cfg.joint_steps)[phase]


def phase_optimizer(params, cfg: Stage1Config, phase: int) -> Optimizer:
    steps = max(_phase_steps(cfg, phase), 1)
    return Optimizer(params, OptimConfig(base_lr=cfg.lr, warmup_steps=min(cfg.warmup, steps), total_steps=steps))


def run_stage1(bundles, cfg: Stage1Config, state: Stage1State | None = None,
               stop_at: int | None = None, log_every: int = 0) -> Stage1State:
    """Pretrain both networks separately, then fine-tune jointly (resumable).

    Batches and crops of step ``k`` in phase ``p`` come from a generator
    seeded with ``(seed, p, k)``, so resuming reproduces an uninterrupted
    run. ``stop_at`` bounds the total number of steps taken overall.
    Samples whose mask is empty are skipped and counted.
    """
    usable = [b for b in bundles if b.mask.any()]
    if not usable:
        raise ValueError("stage 1 training needs at least one sample with a non-empty mask")
    if state is None:
        state = Stage1State(Stage1Model.create(cfg), skipped=len(bundles) - len(usable))
        if state.skipped:
            log.warning("stage 1: skipped %d samples with an empty mask", state.skipped)
    model = state.model
    params = model.depth_net.parameters() + model.normal_net.parameters()
    while not state.done:
        steps = _phase_steps(cfg, state.phase)
        name = PHASES[state.phase]
        if state.optimizer is None:
            state.optimizer = phase_optimizer(params, cfg, state.phase)
        while state.step < steps:
            if stop_at is not None and len(state.curves) >= stop_at:
                return state
            rng = np.random.default_rng([cfg.seed, state.phase, state.step])
            idx = rng.choice(len(usable), size=min(cfg.batch, len(usable)), replace=False)
            batch = batch_from_bundles([usable[i] for i in idx], cfg.crop, rng)
            with ad.Graph():
                terms = stage1_losses(model, batch, name, cfg.consistency)
                total = terms["L_d"] + terms["L_s"]
                if "L_con" in terms:
                    total = total + ad.scale(terms["L_con"], cfg.w_con)
                ad.backward(total)
            lr = state.optimizer.step()
            state.step += 1
            rec = {"phase": name, "step": state.step, "lr": lr}
            rec.update({k: v.item() for k, v in terms.items()})
            state.curves.append(rec)
            if log_every and state.step % log_every == 0:
                log.info("stage1 %s step %d/%d %s", name, state.step, steps,
                         " ".join(f"{k}={v:.5f}" for k, v in rec.items() if k.startswith("L_")))
        state.phase += 1
        state.step = 0
        state.optimizer = None
    return state


def train_stage1(bundles, cfg: Stage1Config, log_every: int = 0) -> tuple[Stage1Model, list[dict[str, float]]]:
    """Trained model and one loss record per step (phase, step, lr, L_d, L_s and L_con when enabled)."""
    state = run_stage1(bundles, cfg, log_every=log_every)
    return state.model, state.curves
