"""Emitters: a parallax-aware deformed-cube sphere light and an
infinite-distance lat-long environment map baseline.

The sphere emitter stores, per vertex of a cube-sphere mesh, an inverted
distance ``r`` in (0, 1] and an RGB radiance. A vertex at unit position ``x``
with inward normal ``n = -x`` sits at ``s * (x - n * (1/r - 1)) + c``, i.e. at
distance ``s / r`` from the center ``c``; ``r = 1`` is the scene bounding
sphere and ``r -> 0`` the far-field limit. Triangles are wound so normals
point toward ``c`` and emission is direction-independent, so the light is an
ordinary textured area light and is importance sampled by triangle power
(area times mean vertex luminance).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from numba import njit

from .brdf import luminance
from .bvh import Bvh, bvh_intersect
from .meshes import TriMesh

R_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# cube-sphere construction
# ---------------------------------------------------------------------------

def unit_sphere_points(face_res: int) -> TriMesh:
    """Cube-sphere: 6 grids of ``face_res**2`` points projected to the unit
    sphere, shared edges/corners deduplicated, triangles wound inward.

    The returned mesh has unit-length vertices; inward normals are ``-x``.
    """
    if face_res < 2:
        raise ValueError("face_res must be >= 2")
    n = face_res
    lin = np.linspace(-1.0, 1.0, n)
    u, v = np.meshgrid(lin, lin, indexing="ij")
    one = np.ones_like(u)
    face_grids = [
        np.stack([one, u, v], axis=-1),    # +x
        np.stack([-one, u, v], axis=-1),   # -x
        np.stack([u, one, v], axis=-1),    # +y
        np.stack([u, -one, v], axis=-1),   # -y
        np.stack([u, v, one], axis=-1),    # +z
        np.stack([u, v, -one], axis=-1),   # -z
    ]
    all_pts = np.concatenate([g.reshape(-1, 3) for g in face_grids], axis=0)
    all_pts = all_pts / np.linalg.norm(all_pts, axis=1, keepdims=True)
    uniq, inverse = np.unique(all_pts, axis=0, return_inverse=True)

    faces = []
    for fi in range(6):
        base = fi * n * n
        for i in range(n - 1):
            for j in range(n - 1):
                a = inverse[base + i * n + j]
                b = inverse[base + (i + 1) * n + j]
                c = inverse[base + (i + 1) * n + j + 1]
                d = inverse[base + i * n + j + 1]
                faces.append((a, b, c))
                faces.append((a, c, d))
    faces = np.array(faces, dtype=np.int64)

    mesh = TriMesh(uniq, faces)
    # wind every triangle inward (geometric normal pointing toward the origin)
    fn = mesh.face_normals()
    centroids = uniq[faces].mean(axis=1)
    outward = np.einsum("ij,ij->i", fn, centroids) > 0
    faces[outward] = faces[outward][:, [0, 2, 1]]
    mesh = TriMesh(uniq, faces)
    mesh.normals = -uniq  # inward unit normals
    return mesh


def envpp_vertex_position(x, n, r, s, c) -> np.ndarray:
    """World position of an emitter vertex: ``s * (x - n * (1/r - 1)) + c``."""
    x = np.asarray(x, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0.0):
        raise ValueError("inverted distance r must be positive")
    d = 1.0 / r - 1.0
    if x.ndim == 1:
        return s * (x - n * d) + np.asarray(c, dtype=np.float64)
    return s * (x - n * d[:, None]) + np.asarray(c, dtype=np.float64)


class EnvmapPlusPlus:
    """Deformed-cube sphere emitter with per-vertex inverted distance and
    radiance. Call :meth:`rebuild` after mutating ``r_values``/``radiance``."""

    def __init__(self, face_res: int = 32, r_values=None, radiance=None,
                 scale: float = 1.0, center=(0.0, 0.0, 0.0)):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.face_res = int(face_res)
        self.base = unit_sphere_points(self.face_res)
        nv = self.base.n_vertices
        self.r_values = (np.full(nv, 1.0) if r_values is None
                         else np.asarray(r_values, dtype=np.float64).reshape(nv).copy())
        self.radiance = (np.ones((nv, 3)) if radiance is None
                         else np.asarray(radiance, dtype=np.float64).reshape(nv, 3).copy())
        self.scale = float(scale)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.mesh = None
        self.rebuild()

    @property
    def n_vertices(self) -> int:
        return self.base.n_vertices

    def rebuild(self):
        """Recompute world positions, inward normals, and the power table."""
        self.r_values = np.clip(self.r_values, R_FLOOR, 1.0)
        self.radiance = np.maximum(self.radiance, 0.0)
        pos = envpp_vertex_position(self.base.vertices, -self.base.vertices,
                                    self.r_values, self.scale, self.center)
        self.mesh = TriMesh(pos, self.base.faces.copy())
        self.mesh.normals = self.base.normals.copy()
        fn = self.mesh.face_normals(normalized=False)
        self.face_areas = 0.5 * np.linalg.norm(fn, axis=1)
        self.face_normals = fn / np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
        lum = self.radiance @ np.array([0.2126, 0.7152, 0.0722])
        self.face_power = self.face_areas * lum[self.mesh.faces].mean(axis=1)
        self.total_power = float(self.face_power.sum())
        if self.total_power > 0:
            cdf = np.cumsum(self.face_power)
            self.power_cdf = cdf / cdf[-1]
        else:
            m = len(self.face_power)
            self.power_cdf = np.arange(1, m + 1, dtype=np.float64) / m
        self.bvh = Bvh(self.mesh.vertices, self.mesh.faces)

    # -- queries -----------------------------------------------------------

    def eval(self, origin, direction):
        """Interpolated radiance along a ray from inside the emitter.

        Returns ``(radiance, face, bary)``; a miss gives black and face -1.
        """
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        t, f, b1, b2 = bvh_intersect(*self.bvh.arrays(), o[0], o[1], o[2],
                                     d[0], d[1], d[2], 1e-9, np.inf)
        if f < 0:
            return np.zeros(3), -1, np.zeros(3)
        bary = np.array([1.0 - b1 - b2, b1, b2])
        rad = bary @ self.radiance[self.mesh.faces[f]]
        return rad, int(f), bary

    def sample(self, shading_point, u):
        """Power-proportional area sample converted to solid angle.

        Returns ``(direction, distance, radiance, pdf_solid_angle)``; a
        grazing (zero-cosine) pick returns pdf 0.
        """
        p = np.asarray(shading_point, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64).reshape(3)
        f = int(np.searchsorted(self.power_cdf, u[0], side="right"))
        f = min(f, len(self.power_cdf) - 1)
        su = np.sqrt(u[1])
        b0 = 1.0 - su
        b1 = u[2] * su
        b2 = 1.0 - b0 - b1
        tri = self.mesh.vertices[self.mesh.faces[f]]
        y = b0 * tri[0] + b1 * tri[1] + b2 * tri[2]
        delta = y - p
        dist = float(np.linalg.norm(delta))
        if dist < 1e-12:
            return np.zeros(3), 0.0, np.zeros(3), 0.0
        direction = delta / dist
        cos_e = float(-np.dot(self.face_normals[f], direction))
        pdf_a = self.pdf_area(f)
        if abs(cos_e) < 1e-9 or pdf_a <= 0:
            return direction, dist, np.zeros(3), 0.0
        pdf_sa = pdf_a * dist * dist / abs(cos_e)
        rad = np.array([b0, b1, b2]) @ self.radiance[self.mesh.faces[f]]
        return direction, dist, rad, float(pdf_sa)

    def pdf_area(self, face: int) -> float:
        """Area-measure pdf of picking a point on the given face."""
        if self.total_power <= 0:
            return 1.0 / (len(self.face_power) * max(self.face_areas[face], 1e-300))
        return self.face_power[face] / (self.total_power * max(self.face_areas[face], 1e-300))

    def pdf_solid_angle(self, shading_point, face: int, dist: float, direction) -> float:
        cos_e = abs(float(np.dot(self.face_normals[face], np.asarray(direction))))
        if cos_e < 1e-9:
            return 0.0
        return self.pdf_area(face) * dist * dist / cos_e

    # -- persistence -------------------------------------------------------

    def save(self, path):
        path = Path(path)
        header = {
            "face_res": self.face_res,
            "scale": self.scale,
            "center": self.center.tolist(),
            "n_vertices": self.n_vertices,
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2))
        blob = np.concatenate([self.r_values, self.radiance.reshape(-1)]).astype("<f4")
        blob.tofile(path.with_suffix(path.suffix + ".raw"))

    @classmethod
    def load(cls, path) -> "EnvmapPlusPlus":
        path = Path(path)
        header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        raw = np.fromfile(path.with_suffix(path.suffix + ".raw"), dtype="<f4").astype(np.float64)
        nv = header["n_vertices"]
        return cls(header["face_res"], raw[:nv], raw[nv:].reshape(nv, 3),
                   header["scale"], header["center"])


def resample_latlong_to_vertices(texture: np.ndarray, unit_points: np.ndarray) -> np.ndarray:
    """Bilinear lat-long lookups at unit directions (for seeding vertex radiance)."""
    tex = np.ascontiguousarray(texture, dtype=np.float64)
    pts = np.asarray(unit_points, dtype=np.float64).reshape(-1, 3)
    out = np.empty((len(pts), 3))
    for i, p in enumerate(pts):
        out[i] = latlong_eval(tex, p[0], p[1], p[2])
    return out


# ---------------------------------------------------------------------------
# infinite lat-long environment map
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _dir_to_uv(dx, dy, dz):
    """y-up lat-long mapping: v = theta/pi from +y, u = atan2(z, x)/2pi."""
    theta = np.arccos(min(max(dy, -1.0), 1.0))
    phi = np.arctan2(dz, dx)
    if phi < 0.0:
        phi += 2.0 * np.pi
    return phi / (2.0 * np.pi), theta / np.pi


@njit(cache=True)
def latlong_eval(tex, dx, dy, dz):
    """Bilinear lookup of a lat-long texture in a unit direction."""
    h, w = tex.shape[0], tex.shape[1]
    u, v = _dir_to_uv(dx, dy, dz)
    x = u * w - 0.5
    y = v * h - 0.5
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    fx = x - x0
    fy = y - y0
    x1 = (x0 + 1) % w
    x0 = x0 % w
    y1 = min(max(y0 + 1, 0), h - 1)
    y0 = min(max(y0, 0), h - 1)
    r = ((1 - fx) * (1 - fy) * tex[y0, x0, 0] + fx * (1 - fy) * tex[y0, x1, 0]
         + (1 - fx) * fy * tex[y1, x0, 0] + fx * fy * tex[y1, x1, 0])
    g = ((1 - fx) * (1 - fy) * tex[y0, x0, 1] + fx * (1 - fy) * tex[y0, x1, 1]
         + (1 - fx) * fy * tex[y1, x0, 1] + fx * fy * tex[y1, x1, 1])
    b = ((1 - fx) * (1 - fy) * tex[y0, x0, 2] + fx * (1 - fy) * tex[y0, x1, 2]
         + (1 - fx) * fy * tex[y1, x0, 2] + fx * fy * tex[y1, x1, 2])
    return r, g, b


@njit(cache=True)
def latlong_pdf(pdf_table, dx, dy, dz):
    h, w = pdf_table.shape
    u, v = _dir_to_uv(dx, dy, dz)
    j = min(int(u * w), w - 1)
    i = min(int(v * h), h - 1)
    return pdf_table[i, j]


@njit(cache=True)
def latlong_sample(tex, row_cdf, cond_cdf, pdf_table, u0, u1):
    """Luminance-weighted texel sample; exact sin-theta warp inside the row.

    Returns (dx, dy, dz, pdf, r, g, b).
    """
    h, w = tex.shape[0], tex.shape[1]
    i = np.searchsorted(row_cdf, u0, side="right")
    if i >= h:
        i = h - 1
    lo = row_cdf[i - 1] if i > 0 else 0.0
    span = row_cdf[i] - lo
    ur = (u0 - lo) / span if span > 0 else 0.5
    j = np.searchsorted(cond_cdf[i], u1, side="right")
    if j >= w:
        j = w - 1
    lo_c = cond_cdf[i, j - 1] if j > 0 else 0.0
    span_c = cond_cdf[i, j] - lo_c
    uc = (u1 - lo_c) / span_c if span_c > 0 else 0.5
    cos_lo = np.cos(i * np.pi / h)
    cos_hi = np.cos((i + 1) * np.pi / h)
    cos_t = cos_lo + ur * (cos_hi - cos_lo)
    sin_t = np.sqrt(max(1.0 - cos_t * cos_t, 0.0))
    phi = (j + uc) * 2.0 * np.pi / w
    dx = sin_t * np.cos(phi)
    dy = cos_t
    dz = sin_t * np.sin(phi)
    r, g, b = latlong_eval(tex, dx, dy, dz)
    return dx, dy, dz, pdf_table[i, j], r, g, b


class InfiniteEnvmap:
    """Infinitely distant lat-long emitter with luminance-weighted sampling."""

    def __init__(self, texture: np.ndarray):
        tex = np.ascontiguousarray(texture, dtype=np.float64)
        if tex.ndim != 3 or tex.shape[2] != 3:
            raise ValueError("texture must be (height, width, 3)")
        if not np.all(np.isfinite(tex)) or np.any(tex < 0):
            raise ValueError("texture must be finite and non-negative")
        self.texture = tex
        h, w = tex.shape[:2]
        lum = tex @ np.array([0.2126, 0.7152, 0.0722])
        rows = np.arange(h)
        dcos = np.cos(rows * np.pi / h) - np.cos((rows + 1) * np.pi / h)
        row_w = lum.sum(axis=1) * dcos
        total = row_w.sum()
        if total <= 0:
            # black texture: keep a uniform-over-sphere fallback
            row_w = dcos * w
            total = row_w.sum()
            lum = np.ones_like(lum)
        self.row_cdf = np.cumsum(row_w) / total
        col_sums = np.maximum(lum.sum(axis=1, keepdims=True), 1e-300)
        self.cond_cdf = np.cumsum(lum / col_sums, axis=1)
        self.cond_cdf[:, -1] = 1.0
        p_row = row_w / total
        p_col = lum / col_sums
        dphi = 2.0 * np.pi / w
        self.pdf_table = np.ascontiguousarray(
            p_row[:, None] * p_col / (dcos[:, None] * dphi))

    def eval(self, direction) -> np.ndarray:
        d = np.asarray(direction, dtype=np.float64)
        return np.array(latlong_eval(self.texture, d[0], d[1], d[2]))

    def pdf(self, direction) -> float:
        d = np.asarray(direction, dtype=np.float64)
        return float(latlong_pdf(self.pdf_table, d[0], d[1], d[2]))

    def sample(self, u):
        """Returns ``(direction, pdf_solid_angle, radiance)``."""
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        dx, dy, dz, pdf, r, g, b = latlong_sample(
            self.texture, self.row_cdf, self.cond_cdf, self.pdf_table, u[0], u[1])
        return np.array([dx, dy, dz]), float(pdf), np.array([r, g, b])


# ---------------------------------------------------------------------------
# PFM I/O
# ---------------------------------------------------------------------------

def write_pfm(path, image: np.ndarray):
    """Color PFM, little-endian, rows written bottom-to-top."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PFM writer expects (height, width, 3)")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"PF":
            raise ValueError("only color PFM files are supported")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f4" if scale < 0 else ">f4")
    img = data.reshape(h, w, 3)[::-1].astype(np.float64)
    return np.ascontiguousarray(img)
