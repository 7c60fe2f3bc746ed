"""Scene sampling and patch rendering for the synthetic dataset."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, Pose, axis_angle, project
from .categories import CATEGORIES, CATEGORY_NAMES, CategorySpec, sample_scale
from .mesh import Mesh, box_of, build_mesh
from .render import EmptyMaskError, PatchBox, cast_mesh, ray_map
from .sensor import CorruptionParams, corrupt_depth, synth_rgb

GENERATOR_VERSION = "1"

DEFAULT_K = CameraIntrinsics(600.0, 600.0, 319.5, 239.5, 640, 480)

# object x-axis -> camera x, object z (up) -> camera -y
_R_BASE = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


@dataclass
class SceneInstance:
    """One object in the camera frame; ``mesh`` is centred on the box centre."""

    category: str
    pose: Pose
    mesh: Mesh
    seed: int

    @property
    def symmetric(self) -> bool:
        return CATEGORIES[self.category].symmetric

    def mesh_in_camera(self) -> Mesh:
        return self.mesh.transformed(self.pose.R, self.pose.t)


@dataclass
class PatchBundle:
    """Per-object patch set and its annotation."""

    rgb: np.ndarray
    depth_raw: np.ndarray
    depth_gt: np.ndarray
    normal_gt: np.ndarray
    mask: np.ndarray
    rays: np.ndarray
    K: CameraIntrinsics
    box: PatchBox
    category: str
    pose: Pose
    symmetric: bool
    scene_id: str = ""
    seeds: dict = field(default_factory=dict)

    @property
    def res(self) -> int:
        return self.mask.shape[0]


@dataclass(frozen=True)
class SceneParams:
    res: int = 64
    segments: int = 32
    depth_range: tuple[float, float] = (0.45, 0.85)
    elevation_deg: tuple[float, float] = (25.0, 65.0)
    roll_deg: float = 15.0
    # yaw window (degrees) around "handle pointing away from the camera" that is never sampled
    hidden_handle_exclusion_deg: float = 60.0
    box_margin: float = 0.15
    box_jitter: float = 0.05
    corruption: CorruptionParams = CorruptionParams()


def instance_seed(global_seed: int, category: str, index: int) -> int:
    ss = np.random.SeedSequence([global_seed, 1 + CATEGORY_NAMES.index(category), index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@functools.lru_cache(maxsize=512)
def _instance_mesh(category: str, seed: int, segments: int) -> tuple[Mesh, np.ndarray]:
    spec = CATEGORIES[category]
    scale = sample_scale(spec, np.random.default_rng(seed))
    mesh = build_mesh(spec, scale, segments)
    center, extents = box_of(mesh)
    return Mesh(mesh.triangles - center, mesh.normals), extents


def canonical_x_axis(z_axis: np.ndarray) -> np.ndarray:
    """For spin-symmetric objects: camera x projected onto the plane normal to the object axis."""
    ex = np.array([1.0, 0.0, 0.0])
    x = ex - (ex @ z_axis) * z_axis
    return x / np.linalg.norm(x)


def sample_rotation(rng: np.random.Generator, spec: CategorySpec, params: SceneParams) -> np.ndarray:
    elev = np.radians(rng.uniform(*params.elevation_deg))
    roll = np.radians(rng.uniform(-params.roll_deg, params.roll_deg))
    if spec.symmetric:
        yaw = 0.0
    else:
        half = np.radians(params.hidden_handle_exclusion_deg) / 2.0
        # yaw = 90 deg points the handle straight away from the camera
        yaw = np.pi / 2 + half + rng.uniform(0.0, 2.0 * np.pi - 2.0 * half)
    R = axis_angle([0, 0, 1], roll) @ axis_angle([1, 0, 0], elev) @ _R_BASE @ axis_angle([0, 0, 1], yaw)
    if spec.symmetric:
        z = R[:, 2]
        x = canonical_x_axis(z)
        R = np.stack([x, np.cross(z, x), z], axis=1)
    return R


def sample_instance(category: str, instance_seed_: int, scene_seed, K: CameraIntrinsics,
                    params: SceneParams) -> SceneInstance:
    spec = CATEGORIES[category]
    mesh, extents = _instance_mesh(category, instance_seed_, params.segments)
    rng = np.random.default_rng(scene_seed)
    R = sample_rotation(rng, spec, params)
    z = rng.uniform(*params.depth_range)
    u = rng.uniform(0.25 * K.width, 0.75 * K.width)
    v = rng.uniform(0.25 * K.height, 0.75 * K.height)
    t = np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
    return SceneInstance(category, Pose(R, t, extents), mesh, instance_seed_)


def detection_box(instance: SceneInstance, K: CameraIntrinsics, params: SceneParams,
                  rng: np.random.Generator | None = None) -> PatchBox:
    """Square window around the projected object, padded and (optionally) jittered."""
    uv = project(K, instance.mesh_in_camera().vertices)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    center = (lo + hi) / 2.0
    size = float(np.max(hi - lo)) * (1.0 + 2.0 * params.box_margin)
    if rng is not None and params.box_jitter > 0:
        center = center + rng.uniform(-params.box_jitter, params.box_jitter, size=2) * size
        size *= 1.0 + rng.uniform(-params.box_jitter, params.box_jitter)
    return PatchBox(float(center[0] - size / 2 + 0.5), float(center[1] - size / 2 + 0.5), size, params.res)


def render_patch(instance: SceneInstance, K: CameraIntrinsics, box: PatchBox):
    """GT z-depth, camera-facing normals and hit mask of ``instance`` inside ``box``."""
    depth, normal, mask = cast_mesh(instance.mesh_in_camera(), K, box)
    if not mask.any():
        raise EmptyMaskError("object has no visible pixels in the patch")
    return depth, normal, mask


def generate_scene(category: str, instance_seed_: int, scene_seed: int, K: CameraIntrinsics = DEFAULT_K,
                   params: SceneParams = SceneParams(), scene_id: str = "") -> PatchBundle:
    """Full patch bundle for one scene; deterministic in (instance seed, scene seed)."""
    ss = np.random.SeedSequence(scene_seed)
    pose_seed, box_seed, depth_seed, rgb_seed = ss.spawn(4)
    instance = sample_instance(category, instance_seed_, pose_seed, K, params)
    box = detection_box(instance, K, params, np.random.default_rng(box_seed))
    depth, normal, mask = render_patch(instance, K, box)
    rays = ray_map(K, box)
    raw = corrupt_depth(depth, mask, params.corruption, depth_seed)
    rgb = synth_rgb(normal, mask, rays, rgb_seed)
    return PatchBundle(rgb=rgb, depth_raw=raw, depth_gt=depth, normal_gt=normal, mask=mask, rays=rays,
                       K=K, box=box, category=category, pose=instance.pose,
                       symmetric=CATEGORIES[category].symmetric, scene_id=scene_id,
                       seeds={"instance": int(instance_seed_), "scene": int(scene_seed)})
