"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Unknown keys, malformed values
and out-of-range settings raise :class:`ConfigError`. The hash of the
canonical text (all keys, sorted) is stamped into every artifact.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .gpc import ALL_GROUPS
from .losses import LossWeights
from .model import ModelConfig
from .stage1 import Stage1Config
from .stage2 import Stage2Config
from .synth.sensor import CorruptionParams
from .synth.scene import SceneParams


ABLATION_TOGGLES = ("consistency", "normal", "ray", "separate")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # dataset
    train_scenes_per_category: int = 1250
    test_scenes_per_category: int = 100
    train_instances_per_category: int = 40
    test_instances_per_category: int = 10
    patch_res: int = 64
    mesh_segments: int = 32
    depth_dropout: float = 0.6
    depth_sigma: float = 0.005
    depth_bias: float = 0.015
    depth_period: float = 48.0
    # stage 1
    s1_hidden: int = 16
    s1_layers: int = 4
    s1_crop: int = 32
    s1_batch: int = 8
    s1_pretrain_steps: int = 300
    s1_joint_steps: int = 300
    s1_lr: float = 2e-3
    s1_warmup: int = 50
    s1_train_scenes: int = 400
    consistency: bool = True
    w_con: float = 1.0
    # stage 2
    n_points: int = 128
    d_emb: int = 64
    d_global: int = 128
    blocks: int = 2
    heads: int = 4
    d_hidden: int = 128
    use_ray: bool = True
    use_normal: bool = True
    lambda_rx: float = 8e-4
    lambda_rz: float = 8e-4
    lambda_ra: float = 4e-4
    lambda_t: float = 8e-4
    lambda_s: float = 8e-4
    lambda_conx: float = 1e-4
    lambda_conz: float = 1e-4
    alpha: float = -5.0
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = 100
    anneal_point: float = 0.72
    epochs: int = 60
    batch: int = 32
    per_category: bool = True
    checkpoint_every: int = 200
    # ablation grid: comma-separated toggles among consistency, normal, ray, separate
    ablate: str = "consistency,normal,ray"

    def __post_init__(self):
        positive = ("train_scenes_per_category", "test_scenes_per_category", "train_instances_per_category",
                    "test_instances_per_category", "patch_res", "s1_hidden", "s1_layers", "s1_crop", "s1_batch",
                    "s1_train_scenes", "n_points", "d_emb", "d_global", "blocks", "heads", "d_hidden", "epochs",
                    "batch", "base_lr", "checkpoint_every")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("s1_pretrain_steps", "s1_joint_steps", "s1_warmup", "warmup_steps", "min_lr", "w_con",
                     "depth_sigma", "depth_bias"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.mesh_segments < 8:
            raise ConfigError("mesh_segments must be at least 8")
        if self.s1_crop > self.patch_res:
            raise ConfigError("s1_crop cannot exceed patch_res")
        if not 0.0 < self.anneal_point <= 1.0:
            raise ConfigError("anneal_point must lie in (0, 1]")
        if self.min_lr > self.base_lr:
            raise ConfigError("min_lr cannot exceed base_lr")
        if self.d_emb % self.heads:
            raise ConfigError("d_emb must be divisible by heads")
        if not self.alpha < 0:
            raise ConfigError("alpha must be negative")
        for name in ("lambda_rx", "lambda_rz", "lambda_ra", "lambda_t", "lambda_s", "lambda_conx", "lambda_conz"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        unknown = set(self.ablation_toggles()) - set(ABLATION_TOGGLES)
        if unknown:
            raise ConfigError(f"unknown ablation toggles: {sorted(unknown)}")
        try:
            self.corruption()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived configs ----------------------------------------------------

    def ablation_toggles(self) -> list[str]:
        return [t.strip() for t in self.ablate.split(",") if t.strip()]

    def corruption(self) -> CorruptionParams:
        return CorruptionParams(self.depth_dropout, self.depth_sigma, self.depth_bias, self.depth_period)

    def scene_params(self) -> SceneParams:
        return dataclasses.replace(SceneParams(), res=self.patch_res, segments=self.mesh_segments,
                                   corruption=self.corruption())

    def stage1(self) -> Stage1Config:
        return Stage1Config(hidden=self.s1_hidden, layers=self.s1_layers, crop=self.s1_crop, batch=self.s1_batch,
                            pretrain_steps=self.s1_pretrain_steps, joint_steps=self.s1_joint_steps, lr=self.s1_lr,
                            warmup=self.s1_warmup, consistency=self.consistency, w_con=self.w_con, seed=self.seed)

    def groups(self) -> tuple[str, ...]:
        drop = set() if self.use_ray else {"ray"}
        if not self.use_normal:
            drop.add("normal")
        return tuple(g for g in ALL_GROUPS if g not in drop)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_rx, self.lambda_rz, self.lambda_ra, self.lambda_t, self.lambda_s,
                           self.lambda_conx, self.lambda_conz, self.alpha)

    def stage2(self) -> Stage2Config:
        model = ModelConfig(self.d_emb, self.d_global, self.blocks, self.heads, self.d_hidden, self.groups())
        return Stage2Config(n_points=self.n_points, batch=self.batch, epochs=self.epochs, base_lr=self.base_lr,
                            min_lr=self.min_lr, warmup_steps=self.warmup_steps, anneal_point=self.anneal_point,
                            weights=self.weights(), model=model, seed=self.seed)

    # -- text form ----------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in sorted(fields(self), key=lambda f: f.name))

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name: str, kind, text: str):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    kinds = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse(key, kinds[key], value)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))
