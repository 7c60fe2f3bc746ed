"""Second-stage network: point embedding, pooling and the four pose decoders."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (AxisPair, CameraIntrinsics, DegenerateAxesError, Pose, orthogonalize_axes,
                       rotation_from_axes)
from .gpc import ALL_GROUPS, GeneralizedPointCloud, feature_width, translation_prior
from .nn import MLP, LayerNorm, Linear, Module
from .synth.categories import CATEGORY_NAMES, category_index

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-4


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 64
    d_global: int = 128
    blocks: int = 2
    heads: int = 4
    d_hidden: int = 128
    groups: tuple[str, ...] = ALL_GROUPS

    def __post_init__(self):
        if self.d_emb % self.heads:
            raise ValueError(f"d_emb={self.d_emb} is not divisible by heads={self.heads}")
        for v in (self.d_emb, self.d_global, self.blocks, self.heads, self.d_hidden):
            if v < 1:
                raise ValueError("model dimensions must be positive")

    @property
    def n_in(self) -> int:
        return feature_width(self.groups)

    @property
    def concat_width(self) -> int:
        return self.d_emb + self.d_global + len(CATEGORY_NAMES)


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        B, N, d = x.shape
        h = self.heads
        dh = d // h

        def split(t):
            return ad.transpose(ad.reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        w = ad.softmax(logits, axis=-1)
        self.last_weights = w.data
        out = ad.reshape(ad.transpose(ad.matmul(w, v), (0, 2, 1, 3)), (B, N, d))
        return self.o(out)


class AttentionBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = MLP([d, 2 * d, d], rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))


class PointformerLite(Module):
    """Per-point projection followed by global self-attention blocks (no positional encoding)."""

    def __init__(self, n_in: int, d_emb: int, blocks: int, heads: int, rng: np.random.Generator):
        self.proj = Linear(n_in, d_emb, rng)
        self.blocks = [AttentionBlock(d_emb, heads, rng) for _ in range(blocks)]

    def __call__(self, p: Tensor) -> Tensor:
        x = self.proj(p)
        for blk in self.blocks:
            x = blk(x)
        return x


@dataclass
class PoseEstimate:
    pose: Pose
    axes: AxisPair          # raw unit axes and confidences as decoded
    t_prior: np.ndarray
    s_prior: np.ndarray
    category: str
    degenerate: bool = False


def _fallback_axes(a_x: np.ndarray, a_z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal pair for (anti)parallel axes: keep a_z, move a_x as little as possible."""
    z = a_z / np.linalg.norm(a_z)
    x = a_x - (a_x @ z) * z
    if np.linalg.norm(x) < 1e-12:
        # the residual carries no direction; use the basis vector least aligned with z
        e = np.eye(3)[np.argmin(np.abs(z))]
        x = e - (e @ z) * z
    return x / np.linalg.norm(x), z


def axes_to_rotation(pair: AxisPair) -> tuple[np.ndarray, bool]:
    """Rotation from decoded axes; the flag reports whether the degenerate fallback fired."""
    try:
        ax, az = orthogonalize_axes(pair)
        degenerate = False
    except DegenerateAxesError:
        log.warning("degenerate decoded axes (dot=%.12f); using projection fallback",
                    float(pair.a_x @ pair.a_z))
        ax, az = _fallback_axes(np.asarray(pair.a_x, float), np.asarray(pair.a_z, float))
        degenerate = True
    return rotation_from_axes(ax, az), degenerate


class PoseModel(Module):
    """Encoder, pooling and decoders; input standardisation and scale priors ride along as constants."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 s_prior: np.ndarray | None = None,
                 feat_mean: np.ndarray | None = None, feat_std: np.ndarray | None = None,
                 feat_within: np.ndarray | None = None):
        self.cfg = cfg
        c = cfg.n_in
        w = cfg.concat_width
        self.encoder = PointformerLite(c, cfg.d_emb, cfg.blocks, cfg.heads, rng)
        self.global_mlp = MLP([cfg.d_emb, cfg.d_global, cfg.d_global], rng)
        self.head_t = MLP([w + c, cfg.d_hidden, cfg.d_hidden // 2, 3], rng, zero_last=True)
        self.head_x = MLP([w, cfg.d_hidden, 4], rng)
        self.head_z = MLP([w, cfg.d_hidden, 4], rng)
        self.head_s = MLP([w, cfg.d_hidden, 3], rng, zero_last=True)
        self.s_prior = np.ones((len(CATEGORY_NAMES), 3)) * 0.1 if s_prior is None else np.asarray(s_prior, float)
        self.feat_mean = np.zeros(c) if feat_mean is None else np.asarray(feat_mean, float)
        self.feat_std = np.ones(c) if feat_std is None else np.asarray(feat_std, float)
        self.feat_within = np.ones(c) if feat_within is None else np.asarray(feat_within, float)
        if np.any(self.s_prior <= 0):
            raise ValueError("scale priors must be strictly positive")

    # -- pieces -------------------------------------------------------------

    def standardize(self, feats: np.ndarray) -> np.ndarray:
        """Cloud mean scaled by between-cloud spread, plus deviations scaled by within-cloud spread.

        Ray and depth vary several times more between objects than across
        one object, so a single global scale would flatten the shape cue.
        The map is invertible, so the absolute values are not lost.
        """
        centre = feats.mean(axis=-2, keepdims=True)
        return (centre - self.feat_mean) / self.feat_std + (feats - centre) / self.feat_within

    def encode(self, p: Tensor) -> Tensor:
        return self.encoder(p)

    def pool_concat(self, p_emb: Tensor, onehot: np.ndarray) -> Tensor:
        B, N, _ = p_emb.shape
        g = ad.max_pool(self.global_mlp(p_emb), axis=-2)
        g = ad.expand(ad.reshape(g, (B, 1, self.cfg.d_global)), (B, N, self.cfg.d_global))
        c = Tensor(np.broadcast_to(np.asarray(onehot, float)[:, None, :], (B, N, onehot.shape[-1])))
        return ad.concat([p_emb, g, c], axis=-1)

    def decode_translation(self, p_concat: Tensor, p: Tensor, t_prior: np.ndarray) -> Tensor:
        per_point = self.head_t(ad.concat([p_concat, p], axis=-1))
        return Tensor(t_prior) + ad.mean(per_point, axis=-2)

    def decode_axes(self, pooled: Tensor) -> dict[str, Tensor]:
        out = {}
        for name, head in (("x", self.head_x), ("z", self.head_z)):
            y = head(pooled)
            out[f"a_{name}"] = ad.l2_normalize(y[..., 0:3])
            out[f"c_{name}"] = ad.sigmoid(y[..., 3])
        return out

    def decode_scale(self, pooled: Tensor, categories) -> Tensor:
        idx = [category_index(c) for c in categories]
        raw = Tensor(self.s_prior[idx]) + self.head_s(pooled)
        keep = (raw.data > SCALE_FLOOR).astype(np.float64)
        return raw * Tensor(keep) + Tensor((1.0 - keep) * SCALE_FLOOR)

    # -- full pass ----------------------------------------------------------

    def forward_tensors(self, feats: np.ndarray, onehot: np.ndarray, t_prior: np.ndarray,
                        categories) -> dict[str, Tensor]:
        """Batched decoder outputs for (B, N, C) features."""
        if feats.ndim != 3 or feats.shape[-1] != self.cfg.n_in:
            raise ad.DimensionError(f"expected (B, N, {self.cfg.n_in}) features, got {feats.shape}")
        p = Tensor(self.standardize(feats))
        p_concat = self.pool_concat(self.encode(p), onehot)
        pooled = ad.max_pool(p_concat, axis=-2)
        out = {"t": self.decode_translation(p_concat, p, t_prior)}
        out.update(self.decode_axes(pooled))
        out["s"] = self.decode_scale(pooled, categories)
        return out

    def forward(self, gpcs: list[GeneralizedPointCloud], Ks: list[CameraIntrinsics]) -> list[PoseEstimate]:
        """One estimate per cloud, in input order."""
        feats, onehot, t_prior, cats = stack_clouds(gpcs, Ks)
        out = self.forward_tensors(feats, onehot, t_prior, cats)
        ests = []
        for i, cat in enumerate(cats):
            pair = AxisPair(out["a_x"].data[i], out["a_z"].data[i],
                            float(out["c_x"].data[i]), float(out["c_z"].data[i]))
            R, degenerate = axes_to_rotation(pair)
            pose = Pose(R, out["t"].data[i], out["s"].data[i])
            ests.append(PoseEstimate(pose, pair, t_prior[i], self.s_prior[category_index(cat)], cat, degenerate))
        return ests

    def predict(self, gpcs, Ks, batch_size: int = 64) -> list[PoseEstimate]:
        out = []
        for i in range(0, len(gpcs), batch_size):
            out.extend(self.forward(gpcs[i:i + batch_size], Ks[i:i + batch_size]))
        return out

    # -- persistence --------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": p.data.copy() for k, p in self.named_parameters()}
        out["const.s_prior"] = self.s_prior
        out["const.feat_mean"] = self.feat_mean
        out["const.feat_std"] = self.feat_std
        out["const.feat_within"] = self.feat_within
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters():
            value = state[f"param.{k}"]
            if value.shape != p.shape:
                raise ad.DimensionError(f"{k}: expected {p.shape}, got {value.shape}")
            p.data[...] = value
        self.s_prior = np.array(state["const.s_prior"])
        self.feat_mean = np.array(state["const.feat_mean"])
        self.feat_std = np.array(state["const.feat_std"])
        self.feat_within = np.array(state["const.feat_within"])


def stack_clouds(gpcs: list[GeneralizedPointCloud], Ks: list[CameraIntrinsics]):
    if len(gpcs) != len(Ks):
        raise ValueError("one camera per cloud is required")
    if len({g.n for g in gpcs}) != 1:
        raise ad.DimensionError("clouds in a batch must share N")
    feats = np.stack([g.features for g in gpcs])
    onehot = np.stack([g.onehot for g in gpcs])
    t_prior = np.stack([translation_prior(g, K) for g, K in zip(gpcs, Ks)])
    return feats, onehot, t_prior, [g.category for g in gpcs]


def scale_priors(extents_by_category: dict[str, list[np.ndarray]]) -> np.ndarray:
    """(categories, 3) mean training extents; categories without data fall back to the overall mean."""
    every = [s for v in extents_by_category.values() for s in v]
    overall = np.mean(every, axis=0) if every else np.full(3, 0.1)
    return np.stack([np.mean(extents_by_category[c], axis=0) if extents_by_category.get(c) else overall
                     for c in CATEGORY_NAMES])


def feature_stats(gpcs: list[GeneralizedPointCloud]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel (mean, between-cloud std, within-cloud std); spreads below 1e-6 become 1."""
    centres = np.stack([g.features.mean(axis=0) for g in gpcs])
    within = np.sqrt(np.mean([g.features.var(axis=0) for g in gpcs], axis=0))
    between = centres.std(axis=0)
    return (centres.mean(axis=0), np.where(between > 1e-6, between, 1.0), np.where(within > 1e-6, within, 1.0))
