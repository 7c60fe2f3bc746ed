"""Stage-2 training and inference over cached point sources."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import CameraIntrinsics, Pose
from .gpc import ALL_GROUPS, PointSource, sample_gpc
from .losses import LOSS_NAMES, LossWeights, component_losses, loss_total
from .model import ModelConfig, PoseEstimate, PoseModel, feature_stats, scale_priors, stack_clouds
from .optim import OptimConfig, Optimizer

log = logging.getLogger(__name__)


@dataclass
class Stage2Item:
    """One training or test object: cached stage-1 points plus its annotation."""

    source: PointSource
    K: CameraIntrinsics
    pose: Pose
    symmetric: bool
    scene_id: str

    @property
    def category(self) -> str:
        return self.source.category


@dataclass
class Stage2Config:
    n_points: int = 128
    batch: int = 32
    epochs: int = 60
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = 100
    anneal_point: float = 0.72
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0

    def steps_per_epoch(self, n_items: int) -> int:
        return -(-n_items // self.batch)

    def optim(self, n_items: int) -> OptimConfig:
        total = self.epochs * self.steps_per_epoch(n_items)
        return OptimConfig(base_lr=self.base_lr, min_lr=self.min_lr, warmup_steps=min(self.warmup_steps, total),
                           total_steps=total, anneal_point=self.anneal_point)


def cloud_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


EVAL_EPOCH = 2**31 - 1  # epoch tag for inference-time sampling


def ground_truth(items: list[Stage2Item]) -> dict[str, np.ndarray]:
    R = np.stack([it.pose.R for it in items])
    return {"t": np.stack([it.pose.t for it in items]), "s": np.stack([it.pose.s for it in items]),
            "a_x": R[:, :, 0], "a_z": R[:, :, 2]}


def init_model(items: list[Stage2Item], cfg: Stage2Config) -> PoseModel:
    """Fresh model with scale priors and input statistics taken from the training items."""
    by_cat: dict[str, list[np.ndarray]] = {}
    for it in items:
        by_cat.setdefault(it.category, []).append(it.pose.s)
    clouds = [sample_gpc(it.source, cfg.n_points, cloud_seed(cfg.seed, 0, i), cfg.model.groups)
              for i, it in enumerate(items)]
    return PoseModel(cfg.model, np.random.default_rng(cfg.seed), scale_priors(by_cat), *feature_stats(clouds))


def batch_losses(model: PoseModel, items: list[Stage2Item], clouds, weights: LossWeights):
    feats, onehot, t_prior, cats = stack_clouds(clouds, [it.K for it in items])
    pred = model.forward_tensors(feats, onehot, t_prior, cats)
    comps = component_losses(pred, ground_truth(items), weights)
    return comps, loss_total(comps, weights)


@dataclass
class TrainState:
    model: PoseModel
    optimizer: Optimizer
    step: int = 0
    curves: list[dict[str, float]] = field(default_factory=list)


def new_state(items: list[Stage2Item], cfg: Stage2Config) -> TrainState:
    model = init_model(items, cfg)
    return TrainState(model, Optimizer(model.parameters(), cfg.optim(len(items))))


def train_stage2(items: list[Stage2Item], cfg: Stage2Config, state: TrainState | None = None,
                 stop_at: int | None = None, log_every: int = 0) -> TrainState:
    """Run (or resume) stage-2 training.

    Every step's batch and point sampling derive from ``(seed, epoch, index)``,
    so a run resumed from a saved state continues exactly as an
    uninterrupted one. ``stop_at`` ends early after that many total steps.
    """
    if not items:
        raise ValueError("stage 2 training needs at least one item")
    state = state or new_state(items, cfg)
    per_epoch = cfg.steps_per_epoch(len(items))
    total = cfg.epochs * per_epoch
    end = total if stop_at is None else min(stop_at, total)
    groups = cfg.model.groups
    while state.step < end:
        epoch, k = divmod(state.step, per_epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
        idx = order[k * cfg.batch:(k + 1) * cfg.batch]
        batch = [items[i] for i in idx]
        clouds = [sample_gpc(items[i].source, cfg.n_points, cloud_seed(cfg.seed, epoch, int(i)), groups)
                  for i in idx]
        with ad.Graph():
            comps, total_loss = batch_losses(state.model, batch, clouds, cfg.weights)
            ad.backward(total_loss)
        lr = state.optimizer.step()
        state.step += 1
        rec = {"step": state.step, "lr": lr, "total": total_loss.item()}
        rec.update({name: comps[name].item() for name in LOSS_NAMES})
        state.curves.append(rec)
        if log_every and state.step % log_every == 0:
            log.info("stage2 step %d/%d loss %.6g lr %.3g", state.step, total, rec["total"], lr)
    return state


def predict_items(model: PoseModel, items: list[Stage2Item], n_points: int, seed: int,
                  groups=ALL_GROUPS, batch_size: int = 64) -> list[PoseEstimate]:
    clouds = [sample_gpc(it.source, n_points, cloud_seed(seed, EVAL_EPOCH, i), groups)
              for i, it in enumerate(items)]
    return model.predict(clouds, [it.K for it in items], batch_size)
