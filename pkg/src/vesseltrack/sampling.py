"""Conical sampling clouds built from concentric spherical calottes.

A cone with aperture ``alpha`` is sampled on ``L`` spheres of radius ``l*s``.
On calotte ``l`` there are ``M(l) = ceil(l*alpha) + 1`` circumferences at
polar angles ``m/l``; circumference ``m`` carries ``N(m, l)`` evenly spaced
points so neighbouring points are at most ``s`` apart along the arc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ConeParams",
    "SampleCloud",
    "circ_count",
    "circ_radius",
    "point_count",
    "canonical_cloud",
    "rotation_to",
    "place_cloud",
    "write_cloud",
]

_DEGENERATE_XY = 1e-8


@dataclass(frozen=True)
class ConeParams:
    alpha: float = 1.0
    s: float = 1.5
    L: int = 8

    def __post_init__(self):
        if not 0 < self.alpha <= math.pi / 2:
            raise ValueError(f"alpha must lie in (0, pi/2], got {self.alpha}")
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"L must be a positive integer, got {self.L}")

    @property
    def height(self) -> float:
        return self.L * self.s


def circ_count(l: int, alpha: float) -> int:
    """Number of circumferences ``M(l)`` on calotte ``l`` (the axis point counts as one)."""
    if l < 1:
        raise ValueError("calotte index starts at 1")
    return math.ceil(l * alpha) + 1


def circ_radius(m: int, l: int, s: float) -> float:
    return l * s * math.cos(math.pi / 2 - m / l)


def point_count(m: int, l: int, s: float) -> int:
    if m == 0:
        return 1
    return max(1, math.ceil(2 * math.pi * circ_radius(m, l, s) / s))


def canonical_cloud(params: ConeParams) -> tuple[np.ndarray, np.ndarray]:
    """Sample positions around the +z axis with the apex at the origin.

    Returns
    -------
    index : (n, 3) int array
        ``(l, m, n)`` per point.
    points : (n, 3) float array
        Local coordinates; every point of calotte ``l`` has norm ``l*s``.
    """
    s = params.s
    index = []
    points = []
    for l in range(1, params.L + 1):
        radius = l * s
        index.append((l, 0, 0))
        points.append((0.0, 0.0, radius))
        for m in range(1, circ_count(l, params.alpha)):
            polar = m / l
            r = circ_radius(m, l, s)
            z = radius * math.cos(polar)
            count = point_count(m, l, s)
            psi = 2 * math.pi * np.arange(count) / count
            for n in range(count):
                index.append((l, m, n))
                points.append((r * math.cos(psi[n]), r * math.sin(psi[n]), z))
    return np.array(index, dtype=np.int64), np.array(points, dtype=np.float64)


def rotation_to(axis) -> np.ndarray:
    """Orthonormal matrix whose third row is ``axis``.

    The first two rows are ``V1 = (-Dy, Dx, 0)`` and ``V2 = D x V1``, both
    normalised. When the axis is (anti)parallel to z, ``V1 = (1, 0, 0)``.
    """
    d = np.asarray(axis, dtype=np.float64)
    if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError(f"axis must be a unit 3-vector, got {axis!r}")
    dx, dy, _ = d
    if abs(dx) < _DEGENERATE_XY and abs(dy) < _DEGENERATE_XY:
        # project x onto the plane normal to d so near-z axes stay orthogonal
        v1 = np.array([1.0, 0.0, 0.0]) - dx * d
    else:
        v1 = np.array([-dy, dx, 0.0])
    v1 = v1 / np.linalg.norm(v1)
    v2 = np.cross(d, v1)
    v2 /= np.linalg.norm(v2)
    return np.vstack([v1, v2, d])


@dataclass(frozen=True, eq=False)
class SampleCloud:
    params: ConeParams
    apex: np.ndarray
    axis: np.ndarray
    index: np.ndarray
    points: np.ndarray

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        for idx, p in zip(self.index, self.points):
            yield tuple(int(i) for i in idx), p

    @property
    def layers(self) -> np.ndarray:
        return self.index[:, 0]


def place_cloud(params: ConeParams, seed, axis) -> SampleCloud:
    """Rotate the canonical cloud so +z follows ``axis`` and move its apex to ``seed``.

    With ``R = rotation_to(axis)`` the placed point is ``R.T @ p + seed``;
    ``R.T`` is the map that sends +z to the third row of ``R``.
    """
    axis = np.asarray(axis, dtype=np.float64)
    seed = np.asarray(seed, dtype=np.float64)
    rot = rotation_to(axis)
    index, local = canonical_cloud(params)
    placed = local @ rot + seed
    return SampleCloud(params, seed.copy(), axis.copy(), index, placed)


def write_cloud(cloud: SampleCloud, path) -> Path:
    """Dump ``x y z l m n`` per line for external viewers."""
    path = Path(path)
    with path.open("w") as fh:
        for (l, m, n), p in cloud:
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {l} {m} {n}\n")
    return path
