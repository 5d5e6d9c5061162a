"""Scene assembly and the forward renderer.

A :class:`Scene` couples a triangle mesh with per-vertex materials and one
emitter (the parallax-aware sphere light or an infinite environment map);
:func:`render_image` produces deterministic HDR images from it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .brdf import MaterialField
from .bvh import Bvh
from .lighting import EnvmapPlusPlus, InfiniteEnvmap
from .meshes import TriMesh, vertex_normals


@dataclass
class RenderSettings:
    """Knobs shared by the forward and gradient renderers."""

    spp: int = 64
    max_depth: int = 6
    rr_start_depth: int = 3
    seed: int = 0
    ray_eps: float = 1e-5
    roughness_escalator: bool = True
    use_nee: bool = True
    fd_step_vertex: float = 1e-5
    fd_step_r: float = 1e-4
    edge_samples: int = 32
    edge_delta_px: float = 0.05

    def __post_init__(self):
        if self.spp <= 0:
            raise ValueError("spp must be positive")
        if not 1 <= self.max_depth <= _kernels.MAXB:
            raise ValueError(f"max_depth must be in [1, {_kernels.MAXB}]")
        if self.rr_start_depth < 1:
            raise ValueError("rr_start_depth must be at least 1")


class Camera:
    """Pinhole camera, -z looking, y up in camera space.

    ``world_from_camera`` is a rigid 4x4 transform; ``fov_y`` is the full
    vertical field of view in degrees. Pixel (0, 0) is the top-left corner;
    continuous screen coordinate ``px`` runs over [0, width].
    """

    def __init__(self, width: int, height: int, fov_y: float,
                 world_from_camera: np.ndarray):
        if width <= 0 or height <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0 < fov_y < 180:
            raise ValueError("fov_y must be in (0, 180) degrees")
        m = np.asarray(world_from_camera, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("world_from_camera must be 4x4")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8):
            raise ValueError("world_from_camera rotation must be orthonormal")
        self.width = int(width)
        self.height = int(height)
        self.fov_y = float(fov_y)
        self.world_from_camera = m.copy()

    @classmethod
    def look_at(cls, position, target, up=(0.0, 1.0, 0.0), width: int = 64,
                height: int = 64, fov_y: float = 45.0) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        fwd = target - position
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("camera position and target coincide")
        fwd = fwd / n
        right = np.cross(fwd, up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise ValueError("up vector is parallel to the view direction")
        right /= rn
        true_up = np.cross(right, fwd)
        m = np.eye(4)
        m[:3, 0] = right
        m[:3, 1] = true_up
        m[:3, 2] = -fwd  # camera looks along -z
        m[:3, 3] = position
        return cls(width, height, fov_y, m)

    @property
    def position(self) -> np.ndarray:
        return self.world_from_camera[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3].copy()

    @property
    def tan_half_fov(self) -> float:
        return float(np.tan(np.deg2rad(self.fov_y) / 2.0))

    def ray(self, px: float, py: float):
        """World-space unit ray through continuous screen point (px, py)."""
        d = _kernels._screen_ray(self.position, self.rotation, self.width,
                                 self.height, self.tan_half_fov,
                                 float(px), float(py))
        return self.position, np.array(d)

    def project(self, points: np.ndarray):
        """Project world points; returns (screen (n, 2), valid (n,))."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.zeros((len(pts), 2))
        ok = np.zeros(len(pts), dtype=bool)
        o = self.position
        rot = self.rotation
        for i, p in enumerate(pts):
            px, py, valid = _kernels._project_point(
                o, rot, self.width, self.height, self.tan_half_fov,
                p[0], p[1], p[2])
            out[i] = (px, py)
            ok[i] = valid
        return out, ok

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fov_y": self.fov_y,
            "world_from_camera": self.world_from_camera.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["width"], d["height"], d["fov_y"],
                   np.array(d["world_from_camera"]))


_DUMMY_ENV = None
_DUMMY_INF = None


def _dummy_env_tuple():
    global _DUMMY_ENV
    if _DUMMY_ENV is None:
        b = Bvh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        _DUMMY_ENV = b.arrays() + (np.zeros((0, 3)), np.zeros((0, 3)),
                                   np.zeros(0), np.zeros(0), np.zeros(4))
    return _DUMMY_ENV


def _dummy_inf_tuple():
    global _DUMMY_INF
    if _DUMMY_INF is None:
        _DUMMY_INF = (np.zeros((1, 1, 3)), np.ones(1), np.ones((1, 1)),
                      np.full((1, 1), 1.0 / (4.0 * np.pi)))
    return _DUMMY_INF


class Scene:
    """Object mesh + per-vertex materials + one emitter."""

    def __init__(self, mesh: TriMesh, materials: MaterialField, emitter):
        if not isinstance(emitter, (EnvmapPlusPlus, InfiniteEnvmap)):
            raise TypeError("emitter must be EnvmapPlusPlus or InfiniteEnvmap")
        if len(materials) != mesh.n_vertices:
            raise ValueError("materials must have one row per mesh vertex")
        self.mesh = mesh
        self.materials = materials
        self.emitter = emitter
        self._flat = None
        self._obj_flat = None

    def refresh(self, emitter_only: bool = False):
        """Invalidate cached acceleration structures after mutating geometry,
        materials, or the emitter. ``emitter_only`` keeps the object BVH
        (valid when only emitter parameters changed since the last render)."""
        self._flat = None
        if not emitter_only:
            self._obj_flat = None
        if isinstance(self.emitter, EnvmapPlusPlus):
            self.emitter.rebuild()

    def flatten(self):
        """Kernel-ready tuples (obj, env_type, env, inf_env)."""
        if self._flat is not None:
            return self._flat
        if self._obj_flat is None:
            mesh = self.mesh
            if mesh.normals is None:
                mesh.normals = vertex_normals(mesh)
            bvh = Bvh(mesh.vertices, mesh.faces)
            self._obj_flat = bvh.arrays() + (
                np.ascontiguousarray(mesh.normals, dtype=np.float64),
                np.ascontiguousarray(self.materials.values, dtype=np.float64))
        obj = self._obj_flat
        if isinstance(self.emitter, EnvmapPlusPlus):
            e = self.emitter
            pdf_a = np.empty(len(e.face_power))
            for fidx in range(len(pdf_a)):
                pdf_a[fidx] = e.pdf_area(fidx)
            # center + inverse total power: the MIS weights use the smooth
            # proxy pdf lum(Le(y)) / total_power * d^2 / |radial . dir|,
            # which is continuous across emitter triangles (the true
            # per-face pdf is piecewise constant and would make the weights
            # jump under an emitter or object perturbation)
            total_power = float(e.face_power.sum())
            aux = np.array([e.center[0], e.center[1], e.center[2],
                            1.0 / total_power if total_power > 0 else 0.0])
            env = e.bvh.arrays() + (
                np.ascontiguousarray(e.face_normals),
                np.ascontiguousarray(e.radiance),
                np.ascontiguousarray(e.power_cdf),
                np.ascontiguousarray(pdf_a),
                aux)
            env_type = _kernels.ENV_SPHERE
            inf_env = _dummy_inf_tuple()
        else:
            env = _dummy_env_tuple()
            env_type = _kernels.ENV_INFINITE
            inf_env = (self.emitter.texture, self.emitter.row_cdf,
                       self.emitter.cond_cdf, self.emitter.pdf_table)
        self._flat = (obj, env_type, env, inf_env)
        return self._flat


def render_image(scene: Scene, camera: Camera, settings: RenderSettings,
                 pass_id: int = 0):
    """Render an HDR image; returns (image (H, W, 3), stats dict).

    ``pass_id`` 1 renders the antithetic variant (first-bounce specular half
    vectors mirrored about the normal); the random streams are identical to
    pass 0.
    """
    obj, env_type, env, inf_env = scene.flatten()
    img = np.zeros((camera.height, camera.width, 3))
    row_counts = np.zeros((camera.height, 2), dtype=np.int64)
    _kernels.forward_kernel(
        obj, env_type, env, inf_env, camera.position, camera.rotation,
        camera.tan_half_fov, camera.width, camera.height, settings.spp,
        settings.seed, pass_id, settings.max_depth, settings.rr_start_depth,
        settings.ray_eps, settings.roughness_escalator, settings.use_nee,
        img, row_counts)
    stats = {
        "nonfinite_samples": int(row_counts[:, 0].sum()),
        "emitter_escape_rays": int(row_counts[:, 1].sum()),
    }
    if stats["nonfinite_samples"]:
        warnings.warn(f"dropped {stats['nonfinite_samples']} non-finite "
                      "radiance samples")
    if stats["emitter_escape_rays"]:
        warnings.warn(f"{stats['emitter_escape_rays']} rays escaped the "
                      "sphere emitter (is the scene inside it?)")
    return img, stats


def render_antithetic(scene: Scene, camera: Camera, settings: RenderSettings):
    """Average of the two antithetic passes; returns (image, stats)."""
    img0, s0 = render_image(scene, camera, settings, pass_id=0)
    img1, s1 = render_image(scene, camera, settings, pass_id=1)
    stats = {k: s0[k] + s1[k] for k in s0}
    return 0.5 * (img0 + img1), stats


def trace(scene: Scene, origin, direction, settings: RenderSettings,
          pass_id: int = 0, pixel: int = 0, sample: int = 0):
    """Radiance estimate along one explicit ray (diagnostic helper)."""
    obj, env_type, env, inf_env = scene.flatten()
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    d = d / np.linalg.norm(d)
    rec = _kernels.make_scratch()
    out = _kernels.trace_record(
        o[0], o[1], o[2], d[0], d[1], d[2], obj, env_type, env, inf_env,
        settings.seed, pixel, sample, settings.max_depth,
        settings.rr_start_depth, settings.ray_eps, pass_id,
        settings.roughness_escalator, settings.use_nee, rec)
    return np.array(out[:3]), {"n_bounces": out[3], "end_type": out[4]}
