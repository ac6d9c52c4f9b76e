"""Small geometric helpers shared by the phantom generator and the mask rasterizer."""

from __future__ import annotations

import numpy as np

from .volume import Volume


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError("zero-length direction")
    return v / n


def perpendicular_frame(d) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``d`` to a right-handed orthonormal basis."""
    d = unit(d)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def segment_distance(points: np.ndarray, p0, p1) -> tuple[np.ndarray, np.ndarray]:
    """Distance from ``points`` (n, 3) to segment p0-p1 and the clamped parameter t."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d = p1 - p0
    dd = float(d @ d)
    if dd == 0.0:
        t = np.zeros(len(points))
    else:
        t = np.clip((points - p0) @ d / dd, 0.0, 1.0)
    closest = p0 + t[:, None] * d
    return np.linalg.norm(points - closest, axis=1), t


def rasterize_tubes(template: Volume, segments, flat_ends: bool = False) -> np.ndarray:
    """Boolean mask of voxels inside a union of tapered tube segments.

    Parameters
    ----------
    template : Volume
        Grid to rasterize on.
    segments : iterable of (p0, p1, r0, r1)
        World endpoints in mm and end radii. A voxel center belongs to a
        segment when its distance to the closest point ``c(t)`` of the segment
        is at most ``r0 + t (r1 - r0)``.
    flat_ends : bool
        Cut segments square at their endpoints instead of rounding them.
    """
    dims = np.array(template.dims)
    spacing = np.array(template.spacing)
    origin = np.array(template.origin)
    mask = np.zeros(template.dims, dtype=bool)
    for p0, p1, r0, r1 in segments:
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        rmax = max(r0, r1)
        lo = np.minimum(p0, p1) - rmax
        hi = np.maximum(p0, p1) + rmax
        ilo = np.maximum(np.floor((lo - origin) / spacing).astype(int), 0)
        ihi = np.minimum(np.ceil((hi - origin) / spacing).astype(int), dims - 1)
        if np.any(ihi < ilo):
            continue
        axes = [origin[k] + spacing[k] * np.arange(ilo[k], ihi[k] + 1) for k in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        shape = grid.shape[:3]
        dist, t = segment_distance(grid.reshape(-1, 3), p0, p1)
        inside = dist <= r0 + t * (r1 - r0)
        if flat_ends:
            axis = p1 - p0
            raw = (grid.reshape(-1, 3) - p0) @ axis / max(float(axis @ axis), 1e-300)
            inside &= (raw >= 0.0) & (raw <= 1.0)
        inside = inside.reshape(shape)
        mask[ilo[0]:ihi[0] + 1, ilo[1]:ihi[1] + 1, ilo[2]:ihi[2] + 1] |= inside
    return mask
