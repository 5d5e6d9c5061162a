"""Triangle meshes: marching-cubes extraction, normals, Laplacians, I/O."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage import measure

from .grids import SdfGrid

DEGENERATE_SQ_AREA = 1e-12


@dataclass
class TriMesh:
    """Indexed triangle mesh with per-vertex normals and optional per-vertex
    attribute channels (materials, radiance, inverted distance)."""

    vertices: np.ndarray = field(repr=False)
    faces: np.ndarray = field(repr=False)
    normals: np.ndarray = field(default=None, repr=False)
    attributes: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self._neighbors = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return self.n_faces == 0

    def face_normals(self, normalized=True) -> np.ndarray:
        v0 = self.vertices[self.faces[:, 0]]
        e1 = self.vertices[self.faces[:, 1]] - v0
        e2 = self.vertices[self.faces[:, 2]] - v0
        n = np.cross(e1, e2)
        if normalized:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.maximum(norm, 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalized=False), axis=1)

    def edges(self, unique=True) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0) if unique else e

    def laplacian_matrix(self):
        """Sparse uniform Laplacian ``A = D^-1 Adj - I`` (rows of isolated
        vertices zeroed), cached."""
        if self._neighbors is None:
            n = self.n_vertices
            e = self.edges()
            rows = np.concatenate([e[:, 0], e[:, 1]])
            cols = np.concatenate([e[:, 1], e[:, 0]])
            adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            deg = np.asarray(adj.sum(axis=1)).ravel()
            has = deg > 0
            inv_deg = np.where(has, 1.0 / np.maximum(deg, 1.0), 0.0)
            a = sparse.diags(inv_deg) @ adj - sparse.diags(has.astype(np.float64))
            self._neighbors = sparse.csr_matrix(a)
        return self._neighbors

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces

    def is_watertight(self) -> bool:
        """True when every edge is shared by exactly two faces."""
        if self.is_empty:
            return False
        e = self.edges(unique=False)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def with_vertex_normals(self) -> "TriMesh":
        self.normals = vertex_normals(self)
        return self

    def save_obj(self, path):
        path = Path(path)
        lines = []
        for v in self.vertices:
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
        has_n = self.normals is not None
        if has_n:
            for n in self.normals:
                lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
        for f in self.faces:
            a, b, c = f + 1
            if has_n:
                lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
            else:
                lines.append(f"f {a} {b} {c}")
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load_obj(cls, path) -> "TriMesh":
        verts, norms, faces = [], [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
        normals = np.array(norms) if norms and len(norms) == len(verts) else None
        return cls(np.array(verts), np.array(faces, dtype=np.int64), normals)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length.

    Isolated vertices get (0, 0, 1) and a warning.
    """
    if mesh.is_empty:
        raise ValueError("cannot compute normals of an empty mesh")
    weighted = mesh.face_normals(normalized=False)  # magnitude = 2 * area
    acc = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], weighted)
    norms = np.linalg.norm(acc, axis=1)
    isolated = norms < 1e-300
    if isolated.any():
        warnings.warn(f"{int(isolated.sum())} isolated vertices; normals set to (0,0,1)")
        acc[isolated] = (0.0, 0.0, 1.0)
        norms[isolated] = 1.0
    return acc / norms[:, None]


def uniform_laplacian(mesh: TriMesh, channel: np.ndarray):
    """Uniform-weight graph Laplacian of a per-vertex channel.

    Returns ``(delta, loss)`` with ``delta_v = mean(neighbors) - value_v`` and
    ``loss = mean_v ||delta_v||^2``. Vertices without neighbors get delta 0.
    """
    channel = np.asarray(channel, dtype=np.float64)
    squeeze = channel.ndim == 1
    x = channel.reshape(mesh.n_vertices, -1)
    delta = mesh.laplacian_matrix() @ x
    loss = float(np.mean(np.sum(delta**2, axis=1)))
    return (delta[:, 0] if squeeze else delta), loss


def uniform_laplacian_grad(mesh: TriMesh, channel: np.ndarray) -> np.ndarray:
    """Gradient of the uniform-Laplacian loss with respect to the channel."""
    channel = np.asarray(channel, dtype=np.float64)
    squeeze = channel.ndim == 1
    x = channel.reshape(mesh.n_vertices, -1)
    a = mesh.laplacian_matrix()
    grad = (2.0 / mesh.n_vertices) * (a.T @ (a @ x))
    return grad[:, 0] if squeeze else grad


def _drop_small_components(vertices, faces, min_faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    n = len(vertices)
    adj = sparse.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    face_label = labels[faces[:, 0]]
    keep_labels = {
        lab for lab, cnt in zip(*np.unique(face_label, return_counts=True)) if cnt >= min_faces
    }
    keep = np.array([lab in keep_labels for lab in face_label])
    return _compact(vertices, faces[keep])


def _compact(vertices, faces):
    """Drop unreferenced vertices and reindex faces."""
    used = np.unique(faces)
    remap = -np.ones(len(vertices), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[faces]


def marching_cubes(grid: SdfGrid, iso: float = 0.0, drop_small: bool = True,
                   min_component_faces: int = 10) -> TriMesh:
    """Extract the iso-surface of an SDF grid as a triangle mesh.

    Vertices lie on cell edges at linearly interpolated crossings; faces are
    consistently wound so normals point toward increasing grid values.
    Ambiguous cube configurations are resolved by the Lewiner 33-case table
    (topologically consistent, so closed level sets come out watertight).
    Connected components with fewer than ``min_component_faces`` faces are
    discarded when ``drop_small`` is set. An all-positive or all-negative grid
    yields an empty mesh.
    """
    vmin, vmax = grid.values.min(), grid.values.max()
    if iso <= vmin or iso >= vmax:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                       np.zeros((0, 3)))
    verts, faces, _, _ = measure.marching_cubes(
        grid.values, level=iso, spacing=tuple(grid.cell_size),
        gradient_direction="descent", allow_degenerate=False,
    )
    verts = verts.astype(np.float64) + grid.bbox_min
    faces = faces.astype(np.int64)

    # Exact-position dedup (marching cubes can emit coincident vertices on
    # shared cell edges depending on the case table path).
    uniq, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse[faces]
    verts = uniq
    # dedup can collapse slivers into degenerate faces
    v0 = verts[faces[:, 0]]
    sq_area = np.sum(np.cross(verts[faces[:, 1]] - v0, verts[faces[:, 2]] - v0) ** 2, axis=1)
    faces = faces[sq_area > DEGENERATE_SQ_AREA]

    if drop_small and len(faces):
        verts, faces = _drop_small_components(verts, faces, min_component_faces)
    if not len(faces):
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    mesh = TriMesh(verts, faces)
    # Orient so face normals agree with the field gradient (outward for an SDF).
    centroids = verts[faces].mean(axis=1)
    _, grads = grid.sample(centroids)
    agree = np.einsum("ij,ij->i", mesh.face_normals(), grads)
    if np.median(agree) < 0:
        mesh.faces = mesh.faces[:, [0, 2, 1]]
    mesh.with_vertex_normals()
    return mesh


def chamfer_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (da.mean() + db.mean()))


def save_attributes(path, attributes: dict):
    """Per-vertex attribute sidecar: JSON header plus little-endian float32 data."""
    path = Path(path)
    header = {"channels": []}
    blobs = []
    count = None
    for name, arr in attributes.items():
        arr = np.asarray(arr, dtype=np.float64).reshape(len(arr), -1)
        if count is None:
            count = len(arr)
        elif len(arr) != count:
            raise ValueError("all attribute channels must have the same vertex count")
        header["channels"].append({"name": name, "width": arr.shape[1]})
        blobs.append(arr.astype("<f4").tobytes())
    header["count"] = count or 0
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2))
    path.with_suffix(path.suffix + ".raw").write_bytes(b"".join(blobs))


def load_attributes(path) -> dict:
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = np.frombuffer(path.with_suffix(path.suffix + ".raw").read_bytes(), dtype="<f4")
    out = {}
    offset = 0
    n = header["count"]
    for ch in header["channels"]:
        w = ch["width"]
        out[ch["name"]] = raw[offset:offset + n * w].astype(np.float64).reshape(n, w)
        offset += n * w
    return out
