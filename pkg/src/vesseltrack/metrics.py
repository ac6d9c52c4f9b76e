"""Overlap and surface-distance scores between binary masks.

Surfaces are the 6-connected boundary voxels of a mask (foreground voxels
with at least one background face neighbour, the volume border counting as
background). Distances are between voxel centers in mm.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import Volume, voxel_to_world

__all__ = ["dice", "boundary_points", "surface_distances", "surface_rms", "hausdorff", "evaluate"]

_FACES = ndimage.generate_binary_structure(3, 1)


def _check_pair(a: Volume, b: Volume):
    if a.dims != b.dims:
        raise ValueError(f"mask dims differ: {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing):
        raise ValueError(f"mask spacing differs: {a.spacing} vs {b.spacing}")


def dice(a: Volume, b: Volume) -> float:
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    _check_pair(a, b)
    ma, mb = a.data > 0.5, b.data > 0.5
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def boundary_points(m: Volume) -> np.ndarray:
    """World coordinates (mm) of the boundary voxels of ``m``."""
    mask = m.data > 0.5
    inner = ndimage.binary_erosion(mask, structure=_FACES, border_value=0)
    idx = np.argwhere(mask & ~inner)
    return voxel_to_world(m, idx.astype(np.float64))


def surface_distances(a: Volume, b: Volume) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-surface distances from every boundary point of ``a`` to ``b`` and back."""
    _check_pair(a, b)
    pa, pb = boundary_points(a), boundary_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("surface distances need two nonempty masks")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return d_ab, d_ba


def surface_rms(a: Volume, b: Volume) -> float:
    """RMS of the pooled distances a->b and b->a."""
    d_ab, d_ba = surface_distances(a, b)
    pooled = np.concatenate([d_ab, d_ba])
    return float(np.sqrt(np.mean(pooled ** 2)))


def hausdorff(a: Volume, b: Volume) -> float:
    d_ab, d_ba = surface_distances(a, b)
    return float(max(d_ab.max(), d_ba.max()))


def evaluate(a: Volume, b: Volume) -> dict:
    """All three scores; the surface ones are ``nan`` if either mask is empty."""
    out = {"dice": dice(a, b)}
    try:
        d_ab, d_ba = surface_distances(a, b)
    except ValueError:
        out["surface_rms_mm"] = float("nan")
        out["hausdorff_mm"] = float("nan")
        return out
    pooled = np.concatenate([d_ab, d_ba])
    out["surface_rms_mm"] = float(np.sqrt(np.mean(pooled ** 2)))
    out["hausdorff_mm"] = float(pooled.max())
    return out
