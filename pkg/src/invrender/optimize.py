"""Joint shape / material / lighting optimization loop.

Each iteration renders one training view, backpropagates the image loss to
every requested parameter group, applies Adam updates (materials, emitter
radiance, emitter shape), and advances the signed distance field by one
implicit-evolution step driven by the clamped per-vertex flow.

Materials live in a persistent trilinear volumetric grid sampled onto the
extracted mesh's vertices every iteration: marching cubes destroys and
recreates vertices each step, so per-vertex storage would not survive
re-extraction. Vertex gradients are splatted back to the grid with the same
trilinear weights.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .brdf import BrdfParams, MaterialField, clamp_material
from .evolution import NieConfig, clamp_flow, nie_update
from .grids import SdfGrid
from .lighting import EnvmapPlusPlus, InfiniteEnvmap, write_pfm
from .losses import AdamState, image_loss, psnr
from .meshes import marching_cubes, uniform_laplacian_grad
from .render import Camera, RenderSettings, Scene, render_antithetic
from .render_grad import backprop_antithetic


@dataclass
class LossConfig:
    image_loss: str = "L1"
    weight_lap_env: float = 1e-2
    weight_lap_shape: float = 0.0

    def __post_init__(self):
        if self.image_loss not in ("L1", "L2"):
            raise ValueError("image_loss must be 'L1' or 'L2'")
        if self.weight_lap_env < 0 or self.weight_lap_shape < 0:
            raise ValueError("regularizer weights must be >= 0")


@dataclass
class OptimizeConfig:
    iters: int = 1000
    seed: int = 0
    groups: tuple = ("shape", "materials", "emitter")
    lr_materials: float = 1e-2
    lr_emitter_radiance: float = 1e-2
    lr_emitter_r: float = 1e-3
    checkpoint_every: int = 100
    material_grid_res: int = 64
    loss: LossConfig = dataclass_field(default_factory=LossConfig)
    nie: NieConfig = dataclass_field(default_factory=NieConfig)
    render: RenderSettings = dataclass_field(default_factory=RenderSettings)

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        unknown = set(self.groups) - {"shape", "materials", "emitter"}
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")


class MaterialGrid:
    """Trilinear volumetric BRDF-parameter field (7 channels per node)."""

    def __init__(self, resolution: int, bbox_min, bbox_max, values=None):
        self._geom = SdfGrid((resolution,) * 3, bbox_min, bbox_max,
                             np.zeros((resolution,) * 3))
        n = resolution**3
        if values is None:
            values = np.tile(BrdfParams([0.5] * 3, [0.04] * 3,
                                        0.5).as_vector(), (n, 1))
        self.values = np.ascontiguousarray(values,
                                           dtype=np.float64).reshape(n, 7)

    @property
    def resolution(self) -> int:
        return self._geom.resolution[0]

    @property
    def bbox_min(self):
        return self._geom.bbox_min

    @property
    def bbox_max(self):
        return self._geom.bbox_max

    @classmethod
    def constant(cls, resolution: int, bbox_min, bbox_max,
                 params: BrdfParams) -> "MaterialGrid":
        n = resolution**3
        return cls(resolution, bbox_min, bbox_max,
                   np.tile(params.as_vector(), (n, 1)))

    def sample_at(self, points: np.ndarray) -> np.ndarray:
        idx, w, _ = self._geom.interp_stencil(points)
        return (self.values[idx] * w[:, :, None]).sum(axis=1)

    def splat(self, points: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`sample_at`: scatter per-point gradients to the
        grid nodes with the trilinear weights."""
        grads = np.asarray(grads, dtype=np.float64).reshape(len(points), 7)
        idx, w, _ = self._geom.interp_stencil(points)
        out = np.zeros_like(self.values)
        np.add.at(out, idx, w[:, :, None] * grads[:, None, :])
        return out

    def clamp(self):
        self.values[:] = clamp_material(self.values)

    def save(self, path):
        path = Path(path)
        header = {"resolution": self.resolution,
                  "bbox_min": self.bbox_min.tolist(),
                  "bbox_max": self.bbox_max.tolist()}
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(header, indent=2))
        self.values.astype("<f4").tofile(path.with_suffix(path.suffix + ".raw"))

    @classmethod
    def load(cls, path) -> "MaterialGrid":
        path = Path(path)
        header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        raw = np.fromfile(path.with_suffix(path.suffix + ".raw"),
                          dtype="<f4").astype(np.float64)
        return cls(header["resolution"], header["bbox_min"],
                   header["bbox_max"], raw.reshape(-1, 7))


@dataclass
class OptimizeResult:
    scene: Scene
    sdf: SdfGrid
    material_grid: MaterialGrid
    logs: list
    out_dir: Path = None


def _normalize_views(views):
    out = []
    for v in views:
        if len(v) == 2:
            cam, target = v
            mask = None
        else:
            cam, target, mask = v
        target = np.asarray(target, dtype=np.float64)
        if target.shape != (cam.height, cam.width, 3):
            raise ValueError("target image does not match its camera")
        out.append((cam, target, mask))
    return out


def _checkpoint(out_dir, iteration, scene, sdf, material_grid):
    ck = Path(out_dir) / "checkpoints" / f"iter_{iteration:05d}"
    ck.mkdir(parents=True, exist_ok=True)
    if sdf is not None:
        sdf.save(ck / "sdf")
    if material_grid is not None:
        material_grid.save(ck / "materials_grid")
    if not scene.mesh.is_empty:
        scene.mesh.save_obj(ck / "mesh.obj")
        np.save(ck / "materials_vertex.npy", scene.materials.values)
    if isinstance(scene.emitter, EnvmapPlusPlus):
        scene.emitter.save(ck / "emitter")
    else:
        write_pfm(ck / "emitter.pfm", scene.emitter.texture)
    return ck


def optimize_scene(scene: Scene, views, cfg: OptimizeConfig, sdf: SdfGrid = None,
                   material_grid: MaterialGrid = None, out_dir=None,
                   callback=None) -> OptimizeResult:
    """Run the outer optimization loop; returns the final state and logs.

    ``views`` is a list of ``(camera, target_image[, mask])``; one view is
    consumed per iteration, round-robin over a seed-shuffled order. When
    ``"shape"`` is in ``cfg.groups``, ``sdf`` is required: the mesh is
    re-extracted from it each iteration and materials are resampled from the
    persistent ``material_grid``.
    """
    views = _normalize_views(views)
    if not views:
        raise ValueError("need at least one view")
    do_shape = "shape" in cfg.groups
    do_mats = "materials" in cfg.groups
    do_env = "emitter" in cfg.groups
    if do_shape:
        if sdf is None:
            raise ValueError("shape optimization requires an initial SDF grid")
        if material_grid is None:
            material_grid = MaterialGrid(cfg.material_grid_res, sdf.bbox_min,
                                         sdf.bbox_max)
    is_envpp = isinstance(scene.emitter, EnvmapPlusPlus)

    order = np.random.default_rng(cfg.seed).permutation(len(views))
    adam_mat = AdamState(lr=cfg.lr_materials)
    adam_rad = AdamState(lr=cfg.lr_emitter_radiance)
    adam_r = AdamState(lr=cfg.lr_emitter_r)
    want = tuple(
        g for g, on in (("materials", do_mats),
                        ("emitter_radiance", do_env),
                        ("emitter_r", do_env and is_envpp),
                        ("vertices", do_shape)) if on)

    logs = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = (out_dir / "log.jsonl").open("w")
    else:
        log_file = None

    def rebuild_from_sdf():
        mesh = marching_cubes(sdf)
        if mesh.is_empty:
            raise RuntimeError(
                "SDF lost its zero level set during optimization "
                "(empty extracted mesh); lower the flow step or the "
                "learning rates")
        mats = MaterialField(material_grid.sample_at(mesh.vertices))
        return Scene(mesh, mats, scene.emitter)

    if do_shape:
        scene = rebuild_from_sdf()
    if out_dir is not None:
        _checkpoint(out_dir, 0, scene, sdf, material_grid)

    for it in range(cfg.iters):
        t0 = time.perf_counter()
        cam, target, mask = views[order[it % len(views)]]
        img, _ = render_antithetic(scene, cam, cfg.render)
        loss, adjoint = image_loss(img, target, cfg.loss.image_loss)
        if mask is not None:
            adjoint = adjoint * np.asarray(mask)[:, :, None]
        grads, _ = backprop_antithetic(scene, cam, adjoint, cfg.render,
                                       want=want)
        record = {"iter": it, "view": int(order[it % len(views)]),
                  "loss": loss, "psnr": psnr(img, target,
                                             peak=max(target.max(), 1.0))}

        if do_mats:
            if do_shape:
                g = material_grid.splat(scene.mesh.vertices, grads.d_material)
                adam_mat.update(material_grid.values, g)
                material_grid.clamp()
            else:
                adam_mat.update(scene.materials.values, grads.d_material)
                scene.materials.values[:] = clamp_material(
                    scene.materials.values)
            record["grad_materials"] = float(
                np.linalg.norm(grads.d_material))
        if do_env:
            if is_envpp:
                env = scene.emitter
                g_rad = grads.d_emitter_radiance
                g_r = grads.d_emitter_r
                if cfg.loss.weight_lap_env > 0:
                    g_rad = g_rad + cfg.loss.weight_lap_env * \
                        uniform_laplacian_grad(env.base, env.radiance)
                    g_r = g_r + cfg.loss.weight_lap_env * \
                        uniform_laplacian_grad(env.base, env.r_values)
                adam_rad.update(env.radiance, g_rad)
                adam_r.update(env.r_values, g_r)
            else:
                adam_rad.update(scene.emitter.texture,
                                grads.d_emitter_radiance)
                scene.emitter = InfiniteEnvmap(
                    np.maximum(scene.emitter.texture, 0.0))
            record["grad_emitter"] = float(
                np.linalg.norm(grads.d_emitter_radiance))
        if do_shape:
            raw = grads.d_vertices
            if cfg.loss.weight_lap_shape > 0:
                raw = raw + cfg.loss.weight_lap_shape * \
                    uniform_laplacian_grad(scene.mesh, scene.mesh.vertices)
            flow = clamp_flow(raw, cfg.nie.eps_v)
            sdf, _ = nie_update(sdf, scene.mesh, flow, cfg.nie)
            record["grad_vertices"] = float(np.linalg.norm(grads.d_vertices))
            scene = rebuild_from_sdf()
        else:
            scene.refresh(emitter_only=True)

        record["seconds"] = time.perf_counter() - t0
        logs.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        if out_dir is not None and cfg.checkpoint_every > 0 and \
                (it + 1) % cfg.checkpoint_every == 0:
            _checkpoint(out_dir, it + 1, scene, sdf, material_grid)
        if callback is not None:
            callback(it, record, scene, sdf)

    if out_dir is not None:
        if cfg.iters > 0 and (cfg.checkpoint_every <= 0 or
                              cfg.iters % cfg.checkpoint_every != 0):
            _checkpoint(out_dir, cfg.iters, scene, sdf, material_grid)
        log_file.close()
    return OptimizeResult(scene, sdf, material_grid, logs, out_dir)
