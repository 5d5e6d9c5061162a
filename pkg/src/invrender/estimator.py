"""Estimator-style front end over the functional optimization API.

:class:`InverseRenderer` exposes the joint reconstruction as a scikit-learn
style estimator: hyperparameters in ``__init__`` (inspectable via
``get_params`` / ``set_params``), a ``fit`` that consumes posed views, and
fitted attributes with trailing underscores. The fit inputs are (camera,
image) pairs rather than a feature matrix, so ``score`` reports mean PSNR
over views instead of a regression metric.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .brdf import BrdfParams
from .init_shape import init_sdf, project_points
from .lighting import EnvmapPlusPlus, InfiniteEnvmap
from .losses import psnr
from .optimize import (LossConfig, MaterialGrid, OptimizeConfig,
                       optimize_scene)
from .evolution import NieConfig
from .render import RenderSettings, Scene, render_antithetic


class InverseRenderer(BaseEstimator):
    """Joint shape, material, and lighting recovery from posed images.

    Parameters mirror :class:`invrender.optimize.OptimizeConfig`; the shape
    is initialized from silhouette masks via the visual hull when masks are
    provided to :meth:`fit`, otherwise from a centered sphere.
    """

    def __init__(self, iters=1000, seed=0, spp=32, max_depth=3,
                 lr_materials=1e-2, lr_emitter_radiance=1e-2,
                 lr_emitter_r=1e-3, groups=("shape", "materials", "emitter"),
                 emitter_kind="envpp", emitter_face_res=8, emitter_scale=5.0,
                 sdf_res=64, material_grid_res=64, bbox_half=1.2,
                 keep_fraction=0.95, image_loss="L1", weight_lap_env=1e-2):
        self.iters = iters
        self.seed = seed
        self.spp = spp
        self.max_depth = max_depth
        self.lr_materials = lr_materials
        self.lr_emitter_radiance = lr_emitter_radiance
        self.lr_emitter_r = lr_emitter_r
        self.groups = groups
        self.emitter_kind = emitter_kind
        self.emitter_face_res = emitter_face_res
        self.emitter_scale = emitter_scale
        self.sdf_res = sdf_res
        self.material_grid_res = material_grid_res
        self.bbox_half = bbox_half
        self.keep_fraction = keep_fraction
        self.image_loss = image_loss
        self.weight_lap_env = weight_lap_env

    def _config(self) -> OptimizeConfig:
        return OptimizeConfig(
            iters=self.iters, seed=self.seed, groups=tuple(self.groups),
            lr_materials=self.lr_materials,
            lr_emitter_radiance=self.lr_emitter_radiance,
            lr_emitter_r=self.lr_emitter_r,
            material_grid_res=self.material_grid_res,
            loss=LossConfig(image_loss=self.image_loss,
                            weight_lap_env=self.weight_lap_env),
            nie=NieConfig(),
            render=RenderSettings(spp=self.spp, max_depth=self.max_depth,
                                  seed=self.seed))

    def fit(self, views, masks=None, out_dir=None):
        """Fit the scene to ``views`` (list of ``(camera, image)`` pairs).

        ``masks`` (optional, one boolean array per view) seed the shape via
        the visual hull; without them the initial shape is a sphere of half
        the bounding-box radius.
        """
        if not views:
            raise ValueError("need at least one view")
        cfg = self._config()
        bmin = np.full(3, -self.bbox_half)
        bmax = np.full(3, self.bbox_half)
        if masks is not None:
            cams = [v[0] for v in views]
            sdf = init_sdf(masks, cams, self.sdf_res, bmin, bmax,
                           self.keep_fraction)
        else:
            from .scenes import sphere_sdf
            sdf = sphere_sdf(self.sdf_res, self.bbox_half,
                             0.5 * self.bbox_half)
        if self.emitter_kind == "envpp":
            emitter = EnvmapPlusPlus(face_res=self.emitter_face_res,
                                     scale=self.emitter_scale)
        elif self.emitter_kind == "infinite":
            emitter = InfiniteEnvmap(np.full((32, 64, 3), 0.5))
        else:
            raise ValueError("emitter_kind must be 'envpp' or 'infinite'")
        grid = MaterialGrid(self.material_grid_res, bmin, bmax)
        from .meshes import marching_cubes
        from .brdf import MaterialField
        mesh = marching_cubes(sdf)
        seed_scene = Scene(mesh, MaterialField(grid.sample_at(mesh.vertices)),
                           emitter)
        result = optimize_scene(seed_scene, views, cfg, sdf=sdf,
                                material_grid=grid, out_dir=out_dir)
        self.scene_ = result.scene
        self.sdf_ = result.sdf
        self.material_grid_ = result.material_grid
        self.logs_ = result.logs
        return self

    def render(self, camera, spp=None):
        """Render the fitted scene from a camera."""
        self._check_fitted()
        settings = RenderSettings(spp=spp or self.spp,
                                  max_depth=self.max_depth, seed=self.seed)
        img, _ = render_antithetic(self.scene_, camera, settings)
        return img

    def score(self, views, spp=None):
        """Mean PSNR of re-rendered views against their target images."""
        self._check_fitted()
        vals = [psnr(self.render(cam, spp), np.asarray(img),
                     peak=max(np.asarray(img).max(), 1.0))
                for cam, img in views]
        return float(np.mean(vals))

    def _check_fitted(self):
        if not hasattr(self, "scene_"):
            raise RuntimeError("estimator is not fitted; call fit() first")
