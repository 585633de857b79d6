"""Surface voxelization by exact triangle/box overlap (separating-axis test).

The grid covers ``[-extent/2, extent/2]`` on every axis. A voxel is set iff
some triangle intersects its closed cell. Work happens in cell units, where
every cell is the unit cube ``[i, i+1] x [j, j+1] x [k, k+1]``; overlap is
invariant under that affine map.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import GeometryError
from .mesh import FILL, TriangleMesh

DIMS = (30, 30, 30)
_CHUNK = 1 << 20


def tri_box_overlap(tri: np.ndarray, half=0.5) -> np.ndarray:
    """Vectorized triangle/box test.

    ``tri`` is (M, 3, 3): triangle corners already expressed relative to the
    box center; the box is axis-aligned with half-size ``half``. Touching
    counts as overlap.
    """
    h = np.broadcast_to(np.asarray(half, dtype=np.float64), (3,))
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    # box face normals
    lo = np.minimum(np.minimum(v0, v1), v2)
    hi = np.maximum(np.maximum(v0, v1), v2)
    ok = np.all((lo <= h) & (hi >= -h), axis=1)
    edges = (v1 - v0, v2 - v1, v0 - v2)
    # triangle plane
    normal = np.cross(edges[0], edges[1])
    r = np.abs(normal) @ h
    ok &= np.abs(np.einsum("ij,ij->i", normal, v0)) <= r
    # edge x box-axis cross products
    for e in edges:
        for ax in range(3):
            a = np.zeros_like(e)
            # e x unit(ax)
            a[:, (ax + 1) % 3] = e[:, (ax + 2) % 3]
            a[:, (ax + 2) % 3] = -e[:, (ax + 1) % 3]
            p0 = np.einsum("ij,ij->i", a, v0)
            p1 = np.einsum("ij,ij->i", a, v1)
            p2 = np.einsum("ij,ij->i", a, v2)
            rad = np.abs(a) @ h
            ok &= (np.minimum(np.minimum(p0, p1), p2) <= rad) & (np.maximum(np.maximum(p0, p1), p2) >= -rad)
    return ok


def to_cell_units(points: np.ndarray, dims=DIMS, extent: float = 1.0) -> np.ndarray:
    d = np.asarray(dims, dtype=np.float64)
    return (points + extent / 2.0) * (d / extent)


def voxelize(mesh: TriangleMesh, dims=DIMS, extent: float = 1.0) -> np.ndarray:
    """Binary (uint8) occupancy grid of shape ``dims``.

    The mesh is expected in normalized coordinates. Parts of a rotated mesh that
    leave the grid are clipped; a mesh reaching beyond what any rotation of a
    normalized mesh can reach is rejected.
    """
    dims = tuple(int(d) for d in dims)
    bound = FILL * extent / 2.0 * math.sqrt(3.0) * (1.0 + 1e-9)
    reach = float(np.abs(mesh.vertices).max())
    if not np.isfinite(reach) or reach > bound:
        raise GeometryError(
            f"mesh extends to {reach:.6g}, beyond the normalized bound {bound:.6g}; normalize it first"
        )
    grid = np.zeros(dims, dtype=np.uint8)
    tris = to_cell_units(mesh.triangles(), dims, extent)
    dmax = np.asarray(dims) - 1
    lo = np.clip(np.ceil(tris.min(axis=1)).astype(np.int64) - 1, 0, dmax)
    hi = np.clip(np.floor(tris.max(axis=1)).astype(np.int64), 0, dmax)
    # drop triangles whose bounding box misses the grid entirely
    inside = np.all((tris.max(axis=1) >= 0) & (tris.min(axis=1) <= np.asarray(dims)), axis=1)
    tris, lo, hi = tris[inside], lo[inside], hi[inside]
    ext = hi - lo + 1
    counts = ext.prod(axis=1)
    starts = np.concatenate([[0], np.cumsum(counts)])
    total = int(starts[-1])
    for c0 in range(0, total, _CHUNK):
        flat = np.arange(c0, min(c0 + _CHUNK, total))
        t = np.searchsorted(starts, flat, side="right") - 1
        local = flat - starts[t]
        e = ext[t]
        k = local % e[:, 2]
        j = (local // e[:, 2]) % e[:, 1]
        i = local // (e[:, 2] * e[:, 1])
        cell = lo[t] + np.stack([i, j, k], axis=1)
        hit = tri_box_overlap(tris[t] - (cell + 0.5)[:, None, :])
        c = cell[hit]
        grid[c[:, 0], c[:, 1], c[:, 2]] = 1
    if not grid.any():
        raise GeometryError("voxelization produced an empty grid")
    return grid
