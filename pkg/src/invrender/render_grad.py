"""Reverse-mode gradients of rendered images.

The gradient pass replays the forward sampling decisions exactly (same
counter-based streams) and differentiates the recorded light-carrying terms
with every sampling density detached:

- material parameters: analytic BRDF derivatives scattered to mesh vertices;
- emitter radiance: linear scatter to sphere-light vertices or environment
  texels;
- emitter shape (inverted distance r): local central differences of the
  next-event geometry with the sampled point fixed in barycentric
  coordinates;
- object vertex positions: local central differences of the first-hit terms
  (interior term) plus a screen-space silhouette edge integral for the
  visibility discontinuity (boundary term).

Pairing pass 0 with the half-vector-mirrored pass 1 and averaging gives the
antithetic estimator that cancels the heavy-tailed normal-distribution
derivative noise on glossy surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .lighting import EnvmapPlusPlus
from .render import Camera, RenderSettings, Scene


@dataclass
class GradBuffers:
    """Gradients of a scalar loss with respect to scene parameters.

    ``d_emitter_radiance`` is (n_emitter_vertices, 3) for the sphere light or
    (height, width, 3) for an infinite environment map; ``d_emitter_r`` is
    empty for the latter.
    """

    d_material: np.ndarray
    d_emitter_radiance: np.ndarray
    d_emitter_r: np.ndarray
    d_vertices: np.ndarray

    @classmethod
    def zeros_for(cls, scene: Scene) -> "GradBuffers":
        nv = scene.mesh.n_vertices
        if isinstance(scene.emitter, EnvmapPlusPlus):
            ne = scene.emitter.n_vertices
            return cls(np.zeros((nv, 7)), np.zeros((ne, 3)), np.zeros(ne),
                       np.zeros((nv, 3)))
        h, w = scene.emitter.texture.shape[:2]
        return cls(np.zeros((nv, 7)), np.zeros((h, w, 3)), np.zeros(0),
                   np.zeros((nv, 3)))

    def __iadd__(self, other: "GradBuffers") -> "GradBuffers":
        self.d_material += other.d_material
        self.d_emitter_radiance += other.d_emitter_radiance
        self.d_emitter_r += other.d_emitter_r
        self.d_vertices += other.d_vertices
        return self

    def scaled(self, s: float) -> "GradBuffers":
        return GradBuffers(self.d_material * s, self.d_emitter_radiance * s,
                           self.d_emitter_r * s, self.d_vertices * s)


def silhouette_edges(mesh, eye) -> np.ndarray:
    """Edges separating front- and back-facing triangles as seen from ``eye``
    (plus open-boundary and non-manifold edges), as a (k, 2) vertex-id array."""
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    faces = mesh.faces
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    raw = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fidx = np.tile(np.arange(len(faces)), 3)
    key = np.sort(raw, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    key = key[order]
    fidx = fidx[order]
    uniq, start = np.unique(key, axis=0, return_index=True)
    counts = np.diff(np.append(start, len(key)))
    fn = mesh.face_normals(normalized=False)
    centroids = mesh.vertices[faces].mean(axis=1)
    front = np.einsum("ij,ij->i", fn, eye - centroids) > 0.0
    sil = np.zeros(len(uniq), dtype=bool)
    two = counts == 2
    f1 = fidx[start]
    f2 = fidx[np.minimum(start + 1, len(fidx) - 1)]
    sil[two] = front[f1[two]] != front[f2[two]]
    sil[~two] = True  # open or non-manifold edges always bound visibility
    return np.ascontiguousarray(uniq[sil], dtype=np.int64)


def backprop(scene: Scene, camera: Camera, adjoint: np.ndarray,
             settings: RenderSettings, pass_id: int = 0,
             want=("materials", "emitter_radiance", "emitter_r", "vertices"),
             boundary: bool = True):
    """Gradients of ``sum(adjoint * image)``; returns (GradBuffers, image).

    ``adjoint`` is d loss / d pixel, shape (height, width, 3). The returned
    image is the replayed forward render (bitwise equal to
    :func:`invrender.render.render_image` with the same settings/pass).
    """
    adjoint = np.ascontiguousarray(adjoint, dtype=np.float64)
    if adjoint.shape != (camera.height, camera.width, 3):
        raise ValueError("adjoint must match the camera image shape")
    obj, env_type, env, inf_env = scene.flatten()
    grads = GradBuffers.zeros_for(scene)
    is_sphere = isinstance(scene.emitter, EnvmapPlusPlus)
    if is_sphere:
        e = scene.emitter
        e_unit = np.ascontiguousarray(e.base.vertices)
        e_r = np.ascontiguousarray(e.r_values)
        e_scale = float(e.scale)
        e_c = e.center
        d_env_rad = grads.d_emitter_radiance
        d_env_r = grads.d_emitter_r
    else:
        e_unit = np.zeros((0, 3))
        e_r = np.zeros(0)
        e_scale = 1.0
        e_c = np.zeros(3)
        h, w = scene.emitter.texture.shape[:2]
        d_env_rad = np.zeros((h * w, 3))
        d_env_r = np.zeros(0)
    want_mat = "materials" in want
    want_rad = "emitter_radiance" in want
    want_r = "emitter_r" in want and is_sphere
    want_verts = "vertices" in want
    img = np.zeros((camera.height, camera.width, 3))
    row_counts = np.zeros((camera.height, 2), dtype=np.int64)
    _kernels.grad_kernel(
        obj, env_type, env, inf_env, camera.position, camera.rotation,
        camera.tan_half_fov, camera.width, camera.height, settings.spp,
        settings.seed, pass_id, settings.max_depth, settings.rr_start_depth,
        settings.ray_eps, settings.roughness_escalator, settings.use_nee,
        adjoint, want_mat, want_rad, want_r, want_verts,
        e_unit, e_r, e_scale, float(e_c[0]), float(e_c[1]), float(e_c[2]),
        settings.fd_step_vertex, settings.fd_step_r,
        grads.d_material, d_env_rad, d_env_r, grads.d_vertices,
        img, row_counts)
    if not is_sphere and want_rad:
        grads.d_emitter_radiance += d_env_rad.reshape(
            scene.emitter.texture.shape)
    if want_verts and boundary and scene.mesh.n_faces > 0:
        edges = silhouette_edges(scene.mesh, camera.position)
        if len(edges):
            _kernels.boundary_kernel(
                edges, obj, env_type, env, inf_env, camera.position,
                camera.rotation, camera.tan_half_fov, camera.width,
                camera.height, adjoint, settings.edge_samples,
                settings.edge_delta_px, settings.seed, pass_id,
                settings.max_depth, settings.rr_start_depth,
                settings.ray_eps, settings.roughness_escalator,
                settings.use_nee, grads.d_vertices)
    return grads, img


def backprop_antithetic(scene: Scene, camera: Camera, adjoint: np.ndarray,
                        settings: RenderSettings,
                        want=("materials", "emitter_radiance", "emitter_r",
                              "vertices"),
                        boundary: bool = True):
    """Average of the two antithetic gradient passes; returns
    (GradBuffers, image) with the image also pass-averaged."""
    g0, img0 = backprop(scene, camera, adjoint, settings, 0, want, boundary)
    g1, img1 = backprop(scene, camera, adjoint, settings, 1, want, boundary)
    g0 += g1
    return g0.scaled(0.5), 0.5 * (img0 + img1)
