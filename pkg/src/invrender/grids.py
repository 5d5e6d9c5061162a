"""Dense scalar grids: signed distance fields, occupancy grids, distance transforms."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass
class SdfGrid:
    """Dense 3D scalar grid over an axis-aligned box, trilinearly interpolated.

    ``values[ix, iy, iz]`` is the signed distance at node
    ``bbox_min + (ix, iy, iz) * cell_size`` (negative inside).
    """

    resolution: tuple
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(self.resolution)
        if len(self.resolution) != 3 or any(n < 2 for n in self.resolution):
            raise ValueError(f"resolution must be >= 2 per axis, got {self.resolution}")
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox_min must be < bbox_max componentwise")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def cell_size(self) -> np.ndarray:
        res = np.array(self.resolution, dtype=np.float64)
        return (self.bbox_max - self.bbox_min) / (res - 1.0)

    def node_coords(self) -> np.ndarray:
        """World-space coordinates of all grid nodes, shape (nx, ny, nz, 3)."""
        axes = [
            np.linspace(self.bbox_min[a], self.bbox_max[a], self.resolution[a])
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def interp_stencil(self, points: np.ndarray):
        """Trilinear interpolation stencil at ``points`` (N, 3).

        Returns ``(flat_idx, weights, weight_grads)`` with shapes (N, 8),
        (N, 8) and (N, 8, 3): for each point the flat indices of its 8 cell
        nodes, the trilinear weights, and the spatial gradient of each weight.
        Points outside the bbox are clamped to the boundary first.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("sample points must be finite")
        res = np.array(self.resolution)
        cell = self.cell_size
        # Clamp into the box, then into the last cell so i+1 stays valid.
        local = (points - self.bbox_min) / cell
        local = np.clip(local, 0.0, (res - 1).astype(np.float64))
        i0 = np.minimum(local.astype(np.int64), res - 2)
        f = local - i0  # fractional position in the cell, in [0, 1]

        n = points.shape[0]
        idx = np.empty((n, 8), dtype=np.int64)
        w = np.empty((n, 8))
        gw = np.empty((n, 8, 3))
        strides = np.array([res[1] * res[2], res[2], 1], dtype=np.int64)
        for k, (dx, dy, dz) in enumerate(
            [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]
        ):
            corner = i0 + np.array([dx, dy, dz])
            idx[:, k] = corner @ strides
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            wz = f[:, 2] if dz else 1.0 - f[:, 2]
            w[:, k] = wx * wy * wz
            sx = 1.0 if dx else -1.0
            sy = 1.0 if dy else -1.0
            sz = 1.0 if dz else -1.0
            gw[:, k, 0] = sx * wy * wz / cell[0]
            gw[:, k, 1] = wx * sy * wz / cell[1]
            gw[:, k, 2] = wx * wy * sz / cell[2]
        return idx, w, gw

    def sample(self, points: np.ndarray):
        """Trilinear value and analytic spatial gradient at ``points``.

        Accepts a single point (3,) or an array (N, 3); outside points are
        clamped to the bbox. Returns ``(values, gradients)``.
        """
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        idx, w, gw = self.interp_stencil(pts)
        flat = self.values.reshape(-1)
        vals = (flat[idx] * w).sum(axis=1)
        grads = (flat[idx][:, :, None] * gw).sum(axis=1)
        if single:
            return vals[0], grads[0]
        return vals, grads

    def copy(self) -> "SdfGrid":
        return SdfGrid(self.resolution, self.bbox_min.copy(), self.bbox_max.copy(), self.values.copy())

    def save(self, path):
        """Write ``<path>.json`` header and ``<path>.raw`` little-endian float32 data."""
        path = Path(path)
        header = {
            "resolution": list(self.resolution),
            "bbox_min": self.bbox_min.tolist(),
            "bbox_max": self.bbox_max.tolist(),
            "dtype": "<f4",
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2))
        self.values.astype("<f4").tofile(path.with_suffix(path.suffix + ".raw"))

    @classmethod
    def load(cls, path) -> "SdfGrid":
        path = Path(path)
        header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        res = tuple(header["resolution"])
        values = np.fromfile(path.with_suffix(path.suffix + ".raw"), dtype="<f4").astype(np.float64)
        return cls(res, np.array(header["bbox_min"]), np.array(header["bbox_max"]), values.reshape(res))


def trilinear_sample(grid: SdfGrid, p):
    """Evaluate the grid and its analytic gradient at one or more points."""
    return grid.sample(p)


@dataclass
class OccupancyGrid:
    """Boolean voxel grid; ``occupied[ix, iy, iz]`` refers to the same node
    lattice as :class:`SdfGrid` (nodes, not cell centers)."""

    resolution: tuple
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    occupied: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.occupied = np.ascontiguousarray(self.occupied, dtype=bool).reshape(self.resolution)
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox_min must be < bbox_max componentwise")


def euclidean_distance_transform(occ: OccupancyGrid) -> SdfGrid:
    """Signed exact Euclidean distance transform of an occupancy grid.

    Occupied voxels get the negative distance to the nearest empty voxel
    center; empty voxels the positive distance to the nearest occupied one,
    both in scene units (anisotropic cells supported).
    """
    inside = occ.occupied
    if not inside.any():
        raise ValueError("occupancy grid is all-empty: no surface")
    if inside.all():
        raise ValueError("occupancy grid is all-occupied: no surface")
    res = np.array(occ.resolution, dtype=np.float64)
    spacing = (occ.bbox_max - occ.bbox_min) / (res - 1.0)
    d_out = ndimage.distance_transform_edt(~inside, sampling=spacing)
    d_in = ndimage.distance_transform_edt(inside, sampling=spacing)
    sdf = np.where(inside, -d_in, d_out)
    return SdfGrid(occ.resolution, occ.bbox_min, occ.bbox_max, sdf)
