"""Physics-based inverse rendering of shape, glossy materials, and
parallax-aware lighting from posed images.

The package couples a deterministic differentiable Monte Carlo path tracer
(forward: :mod:`invrender.render`, reverse: :mod:`invrender.render_grad`)
with level-set shape evolution (:mod:`invrender.evolution`), a deformed
sphere-light environment emitter (:mod:`invrender.lighting`), and a joint
optimization loop (:mod:`invrender.optimize`).
"""

from .brdf import BrdfParams, MaterialField
from .estimator import InverseRenderer
from .evolution import NieConfig, clamp_flow, drlse_loss, nie_update
from .grids import OccupancyGrid, SdfGrid, euclidean_distance_transform
from .init_shape import init_sdf, visual_hull
from .lighting import EnvmapPlusPlus, InfiniteEnvmap, unit_sphere_points
from .losses import AdamState, image_loss, psnr
from .meshes import TriMesh, chamfer_distance, marching_cubes, vertex_normals
from .optimize import (LossConfig, MaterialGrid, OptimizeConfig,
                       OptimizeResult, optimize_scene)
from .render import (Camera, RenderSettings, Scene, render_antithetic,
                     render_image)
from .render_grad import GradBuffers, backprop, backprop_antithetic
from .scenes import SCENE_NAMES, SceneBundle, make_scene

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BrdfParams", "Camera", "EnvmapPlusPlus", "GradBuffers",
    "InfiniteEnvmap", "InverseRenderer", "LossConfig", "MaterialField",
    "MaterialGrid", "NieConfig", "OccupancyGrid", "OptimizeConfig",
    "OptimizeResult", "RenderSettings", "SCENE_NAMES", "SceneBundle",
    "Scene", "SdfGrid", "TriMesh", "backprop", "backprop_antithetic",
    "chamfer_distance", "clamp_flow", "drlse_loss",
    "euclidean_distance_transform", "image_loss", "init_sdf", "make_scene",
    "marching_cubes", "nie_update", "optimize_scene", "psnr",
    "render_antithetic", "render_image", "unit_sphere_points",
    "vertex_normals", "visual_hull",
]
