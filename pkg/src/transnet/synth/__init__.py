from .categories import CATEGORIES, CATEGORY_NAMES, CategoryError, CategorySpec, category_index, sample_scale
from .mesh import GenerationError, Mesh, box_of, build_mesh, revolve
from .render import EmptyMaskError, PatchBox, cast_mesh, ray_map
from .scene import (DEFAULT_K, GENERATOR_VERSION, PatchBundle, SceneInstance, SceneParams, canonical_x_axis,
                    detection_box, generate_scene, instance_seed, render_patch, sample_instance)
from .sensor import CorruptionParams, corrupt_depth, fresnel, synth_rgb

__all__ = [
    "CATEGORIES", "CATEGORY_NAMES", "CategoryError", "CategorySpec", "category_index", "sample_scale",
    "GenerationError", "Mesh", "box_of", "build_mesh", "revolve",
    "EmptyMaskError", "PatchBox", "cast_mesh", "ray_map",
    "DEFAULT_K", "GENERATOR_VERSION", "PatchBundle", "SceneInstance", "SceneParams", "canonical_x_axis",
    "detection_box", "generate_scene", "instance_seed", "render_patch", "sample_instance",
    "CorruptionParams", "corrupt_depth", "fresnel", "synth_rgb",
]
