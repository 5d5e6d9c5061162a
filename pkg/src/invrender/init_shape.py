"""Shape initialization: voxel visual hull from silhouette masks, and its
conversion to a signed distance field."""

from __future__ import annotations

import warnings

import numpy as np

from .grids import OccupancyGrid, SdfGrid, euclidean_distance_transform
from .render import Camera


def project_points(camera: Camera, points: np.ndarray):
    """Vectorized pinhole projection matching the renderer's convention.

    Returns ``(screen (n, 2), in_front (n,))``; ``screen`` is continuous with
    pixel (0, 0) at the top-left corner.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = (pts - camera.position) @ camera.rotation  # camera-from-world
    zbar = -q[:, 2]
    in_front = zbar > 1e-9
    z = np.where(in_front, zbar, 1.0)
    t = camera.tan_half_fov
    aspect = camera.width / camera.height
    px = 0.5 * camera.width * (1.0 + q[:, 0] / (z * t * aspect))
    py = 0.5 * camera.height * (1.0 - q[:, 1] / (z * t))
    return np.stack([px, py], axis=1), in_front


def visual_hull(masks, cameras, grid_res: int, bbox_min, bbox_max,
                keep_fraction: float = 0.95) -> OccupancyGrid:
    """Silhouette-cone intersection on a voxel grid.

    A grid node is occupied iff, among the views whose image it projects
    into, the fraction landing on a foreground mask pixel is at least
    ``keep_fraction``. Nodes visible in no view stay empty, so the hull is
    conservative for exact masks at ``keep_fraction`` 1.
    """
    if len(masks) != len(cameras) or not masks:
        raise ValueError("need one mask per camera (and at least one view)")
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in [0, 1]")
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    grid = SdfGrid((grid_res,) * 3, bbox_min, bbox_max,
                   np.zeros((grid_res,) * 3))
    pts = grid.node_coords().reshape(-1, 3)
    seen = np.zeros(len(pts), dtype=np.int64)
    inside = np.zeros(len(pts), dtype=np.int64)
    for mask, cam in zip(masks, cameras):
        mask = np.asarray(mask)
        if mask.shape != (cam.height, cam.width):
            raise ValueError(f"mask shape {mask.shape} does not match camera "
                             f"({cam.height}, {cam.width})")
        screen, in_front = project_points(cam, pts)
        ix = np.floor(screen[:, 0]).astype(np.int64)
        iy = np.floor(screen[:, 1]).astype(np.int64)
        visible = (in_front & (ix >= 0) & (ix < cam.width) & (iy >= 0)
                   & (iy < cam.height))
        seen += visible
        fg = np.zeros(len(pts), dtype=bool)
        fg[visible] = mask.astype(bool)[iy[visible], ix[visible]]
        inside += fg
    if not seen.any():
        warnings.warn("bounding box is outside every view; hull is empty")
    occupied = (seen > 0) & (inside >= keep_fraction * seen)
    return OccupancyGrid((grid_res,) * 3, bbox_min, bbox_max,
                         occupied.reshape((grid_res,) * 3))


def init_sdf(masks, cameras, grid_res: int, bbox_min, bbox_max,
             keep_fraction: float = 0.95) -> SdfGrid:
    """Visual hull followed by a signed Euclidean distance transform."""
    occ = visual_hull(masks, cameras, grid_res, bbox_min, bbox_max,
                      keep_fraction)
    return euclidean_distance_transform(occ)
