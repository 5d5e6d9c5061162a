"""Median-split BVH with watertight ray-triangle intersection.

Construction is deterministic (stable sorts, fixed split rule); traversal is
numba-compiled and allocation-free apart from a fixed-depth stack.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LEAF_SIZE = 4
STACK_SIZE = 64


class Bvh:
    """Flat BVH over a triangle soup; arrays are what the kernels consume."""

    __slots__ = ("nmin", "nmax", "left", "right", "start", "count", "order",
                 "vertices", "faces")

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        n = len(faces)
        if n == 0:
            self.nmin = np.zeros((1, 3))
            self.nmax = np.full((1, 3), -1.0)  # inverted box: never hit
            self.left = np.full(1, -1, dtype=np.int64)
            self.right = np.full(1, -1, dtype=np.int64)
            self.start = np.zeros(1, dtype=np.int64)
            self.count = np.zeros(1, dtype=np.int64)
            self.order = np.zeros(0, dtype=np.int64)
            return
        tri = self.vertices[self.faces]
        tmin = tri.min(axis=1)
        tmax = tri.max(axis=1)
        centroids = tri.mean(axis=1)

        nmin, nmax, left, right, start, count = [], [], [], [], [], []
        order = np.arange(n, dtype=np.int64)

        def new_node():
            nmin.append(None); nmax.append(None)
            left.append(-1); right.append(-1)
            start.append(0); count.append(0)
            return len(nmin) - 1

        stack = [(new_node(), 0, n)]
        while stack:
            node, lo, hi = stack.pop()
            idx = order[lo:hi]
            nmin[node] = tmin[idx].min(axis=0)
            nmax[node] = tmax[idx].max(axis=0)
            if hi - lo <= LEAF_SIZE:
                start[node] = lo
                count[node] = hi - lo
                continue
            c = centroids[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            key = np.argsort(c[:, axis], kind="stable")
            order[lo:hi] = idx[key]
            mid = lo + (hi - lo) // 2
            lnode = new_node()
            rnode = new_node()
            left[node] = lnode
            right[node] = rnode
            stack.append((lnode, lo, mid))
            stack.append((rnode, mid, hi))

        self.nmin = np.ascontiguousarray(nmin, dtype=np.float64)
        self.nmax = np.ascontiguousarray(nmax, dtype=np.float64)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.order = order

    def arrays(self):
        return (self.nmin, self.nmax, self.left, self.right, self.start,
                self.count, self.order, self.vertices, self.faces)


@njit(cache=True, inline="always")
def _ray_setup(dx, dy, dz):
    """Watertight-test shear constants: axis permutation + shear to ray space."""
    adx, ady, adz = abs(dx), abs(dy), abs(dz)
    if adx >= ady and adx >= adz:
        kz = 0
    elif ady >= adz:
        kz = 1
    else:
        kz = 2
    kx = kz + 1
    if kx == 3:
        kx = 0
    ky = kx + 1
    if ky == 3:
        ky = 0
    d = np.empty(3)
    d[0] = dx; d[1] = dy; d[2] = dz
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sx = d[kx] / d[kz]
    sy = d[ky] / d[kz]
    sz = 1.0 / d[kz]
    return kx, ky, kz, sx, sy, sz


@njit(cache=True, inline="always")
def _tri_hit(verts, faces, f, ox, oy, oz, kx, ky, kz, sx, sy, sz, tmin, tmax):
    """Watertight intersection of one triangle.

    Returns (t, b1, b2) with b1/b2 the barycentric weights of face vertices 1
    and 2, or t = -1 on miss.
    """
    i0 = faces[f, 0]; i1 = faces[f, 1]; i2 = faces[f, 2]
    a0 = verts[i0, 0] - ox; a1 = verts[i0, 1] - oy; a2c = verts[i0, 2] - oz
    b0 = verts[i1, 0] - ox; b1c = verts[i1, 1] - oy; b2c = verts[i1, 2] - oz
    c0 = verts[i2, 0] - ox; c1 = verts[i2, 1] - oy; c2 = verts[i2, 2] - oz
    av = np.empty(3); bv = np.empty(3); cv = np.empty(3)
    av[0] = a0; av[1] = a1; av[2] = a2c
    bv[0] = b0; bv[1] = b1c; bv[2] = b2c
    cv[0] = c0; cv[1] = c1; cv[2] = c2
    akz = av[kz]; bkz = bv[kz]; ckz = cv[kz]
    ax = av[kx] - sx * akz; ay = av[ky] - sy * akz
    bx = bv[kx] - sx * bkz; by = bv[ky] - sy * bkz
    cx = cv[kx] - sx * ckz; cy = cv[ky] - sy * ckz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return -1.0, 0.0, 0.0
    det = u + v + w
    if det == 0.0:
        return -1.0, 0.0, 0.0
    az = sz * akz; bz = sz * bkz; cz = sz * ckz
    t_scaled = u * az + v * bz + w * cz
    t = t_scaled / det
    if t <= tmin or t >= tmax:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    return t, v * inv, w * inv


@njit(cache=True, inline="always")
def _box_hit(nmin, nmax, node, ox, oy, oz, ix, iy, iz, tmax):
    t0 = (nmin[node, 0] - ox) * ix
    t1 = (nmax[node, 0] - ox) * ix
    if t0 > t1:
        t0, t1 = t1, t0
    lo = t0
    hi = t1
    t0 = (nmin[node, 1] - oy) * iy
    t1 = (nmax[node, 1] - oy) * iy
    if t0 > t1:
        t0, t1 = t1, t0
    lo = max(lo, t0)
    hi = min(hi, t1)
    t0 = (nmin[node, 2] - oz) * iz
    t1 = (nmax[node, 2] - oz) * iz
    if t0 > t1:
        t0, t1 = t1, t0
    lo = max(lo, t0)
    hi = min(hi, t1)
    return lo <= hi and lo < tmax and hi > 0.0


@njit(cache=True)
def bvh_intersect(nmin, nmax, left, right, start, count, order, verts, faces,
                  ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Nearest hit along the ray; returns (t, face, b1, b2) or t = inf."""
    if len(order) == 0:
        return np.inf, -1, 0.0, 0.0
    kx, ky, kz, sx, sy, sz = _ray_setup(dx, dy, dz)
    ix = 1.0 / dx if dx != 0.0 else np.inf
    iy = 1.0 / dy if dy != 0.0 else np.inf
    iz = 1.0 / dz if dz != 0.0 else np.inf
    best_t = tmax
    best_f = -1
    best_b1 = 0.0
    best_b2 = 0.0
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _box_hit(nmin, nmax, node, ox, oy, oz, ix, iy, iz, best_t):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                f = order[k]
                t, b1, b2 = _tri_hit(verts, faces, f, ox, oy, oz,
                                     kx, ky, kz, sx, sy, sz, tmin, best_t)
                if t > 0.0:
                    best_t = t
                    best_f = f
                    best_b1 = b1
                    best_b2 = b2
        else:
            stack[top] = left[node]
            top += 1
            stack[top] = right[node]
            top += 1
    if best_f < 0:
        return np.inf, -1, 0.0, 0.0
    return best_t, best_f, best_b1, best_b2


@njit(cache=True)
def bvh_occluded(nmin, nmax, left, right, start, count, order, verts, faces,
                 ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Any-hit test in (tmin, tmax)."""
    if len(order) == 0:
        return False
    kx, ky, kz, sx, sy, sz = _ray_setup(dx, dy, dz)
    ix = 1.0 / dx if dx != 0.0 else np.inf
    iy = 1.0 / dy if dy != 0.0 else np.inf
    iz = 1.0 / dz if dz != 0.0 else np.inf
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _box_hit(nmin, nmax, node, ox, oy, oz, ix, iy, iz, tmax):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                f = order[k]
                t, _, _ = _tri_hit(verts, faces, f, ox, oy, oz,
                                   kx, ky, kz, sx, sy, sz, tmin, tmax)
                if t > 0.0:
                    return True
        else:
            stack[top] = left[node]
            top += 1
            stack[top] = right[node]
            top += 1
    return False
