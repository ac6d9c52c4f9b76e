"""Synthetic vessel phantoms with exact ground truth.

Every phantom is a union of tapered tube segments (round-capped so joints
close; the straight tube is cut flat). The ground-truth mask is
the set of voxel centers inside any segment; the image is that mask painted
with ``vessel_intensity`` over ``background_intensity`` plus i.i.d. Gaussian
noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._geometry import perpendicular_frame, rasterize_tubes, unit
from .volume import Volume

__all__ = ["PhantomSpec", "Phantom", "Segment", "generate", "write_centerline", "read_centerline"]

KINDS = ("sinusoid", "tree", "straight_tube", "y_tube", "loop_tube")


@dataclass(frozen=True)
class Segment:
    p0: tuple
    p1: tuple
    r0: float
    r1: float
    level: int = 0
    parent: int = -1

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.p1, self.p0)))


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "straight_tube"
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    vessel_intensity: float = 100.0
    background_intensity: float = 0.0
    noise_sigma: float = 0.0
    rng_seed: int = 0
    radius: float = 3.0
    # straight_tube / y_tube / loop_tube
    length: float = 40.0
    arm_angle: float = 0.5
    arm_length: float = 20.0
    loop_radius: float = 15.0
    # sinusoid
    amplitude: float = 8.0
    wavelength: float = 40.0
    bifurcations: int = 1
    # tree
    depth: int = 3
    angle_min: float = 0.35
    angle_max: float = 0.6
    root_length: float = 35.0
    length_decay: float = 0.8
    radius_decay: float = 0.8
    start: tuple | None = None
    direction: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind '{self.kind}', expected one of {KINDS}")
        if not self.vessel_intensity > self.background_intensity:
            raise ValueError("vessel_intensity must exceed background_intensity")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.depth < 1:
            raise ValueError("tree depth must be >= 1")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError("dims must be 3 integers >= 2")


@dataclass
class Phantom:
    image: Volume
    truth: Volume
    segments: list = field(default_factory=list)
    seed: np.ndarray | None = None
    seed_direction: np.ndarray | None = None

    @property
    def terminal_segments(self) -> list:
        parents = {s.parent for s in self.segments}
        return [i for i in range(len(self.segments)) if i not in parents]


def _center(spec: PhantomSpec) -> np.ndarray:
    return (np.array(spec.dims) - 1) * np.array(spec.spacing) / 2.0


def _polyline(points, radius, level=0, parent=-1, first_index=0):
    segs = []
    for k in range(len(points) - 1):
        par = parent if k == 0 else first_index + k - 1
        segs.append(Segment(tuple(points[k]), tuple(points[k + 1]), radius, radius, level, par))
    return segs


def _straight(spec):
    c = _center(spec)
    d = unit(spec.direction)
    p0 = c - d * spec.length / 2
    p1 = c + d * spec.length / 2
    return [Segment(tuple(p0), tuple(p1), spec.radius, spec.radius)], p0 + d * 0.25 * spec.length, d


def _y_tube(spec):
    c = _center(spec)
    d = unit(spec.direction)
    u, _ = perpendicular_frame(d)
    fork = c - d * spec.arm_length * 0.25
    p0 = fork - d * spec.length / 2
    segs = [Segment(tuple(p0), tuple(fork), spec.radius, spec.radius)]
    arm_r = spec.radius * spec.radius_decay
    for sign in (1, -1):
        a = math.cos(spec.arm_angle) * d + sign * math.sin(spec.arm_angle) * u
        segs.append(Segment(tuple(fork), tuple(fork + a * spec.arm_length), arm_r, arm_r, 1, 0))
    return segs, p0 + d * 0.2 * spec.length, d


def _loop_tube(spec):
    """Inlet stem, a ring of two half-circles, and an outlet stem."""
    c = _center(spec)
    d = unit(spec.direction)
    u, _ = perpendicular_frame(d)
    R = spec.loop_radius
    bottom = c - d * R
    top = c + d * R
    stem = spec.length / 2
    segs = [Segment(tuple(bottom - d * stem), tuple(bottom), spec.radius, spec.radius)]
    for sign in (1, -1):
        angles = np.linspace(-math.pi / 2, math.pi / 2, 25)
        pts = [c + R * (math.sin(t) * d + sign * math.cos(t) * u) for t in angles]
        segs.extend(_polyline(pts, spec.radius, 1, 0, len(segs)))
    segs.append(Segment(tuple(top), tuple(top + d * stem), spec.radius, spec.radius, 2, len(segs) - 1))
    return segs, bottom - d * stem * 0.6, d


def _sinusoid(spec, rng):
    """Planar sine wave along x with straight side branches leaving at mid-course."""
    c = _center(spec)
    extent = (np.array(spec.dims) - 1) * np.array(spec.spacing)
    margin = 3 * spec.radius
    xs = np.linspace(margin, extent[0] - margin, 80)
    pts = [np.array([x, c[1] + spec.amplitude * math.sin(2 * math.pi * x / spec.wavelength), c[2]])
           for x in xs]
    segs = _polyline(pts, spec.radius)
    n_main = len(segs)
    for b in range(spec.bifurcations):
        k = int((b + 1) * n_main / (spec.bifurcations + 1))
        p = np.asarray(segs[k].p0)
        tangent = unit(np.subtract(segs[k].p1, segs[k].p0))
        side = 1 if b % 2 == 0 else -1
        ang = spec.arm_angle * side
        rot = np.array([[math.cos(ang), -math.sin(ang), 0], [math.sin(ang), math.cos(ang), 0], [0, 0, 1]])
        a = rot @ tangent
        r = spec.radius * spec.radius_decay
        segs.append(Segment(tuple(p), tuple(p + a * spec.arm_length), r, r, 1, k))
    seed = pts[2]
    return segs, seed, unit(pts[3] - pts[1])


def _tree(spec, rng):
    """Recursive binary tree; each child turns by a random angle in a random plane."""
    extent = (np.array(spec.dims) - 1) * np.array(spec.spacing)
    d0 = unit(spec.direction)
    if spec.start is not None:
        start = np.asarray(spec.start, dtype=np.float64)
    else:
        start = _center(spec) - d0 * (0.5 * extent @ np.abs(d0) - 2 * spec.radius)
    segs: list[Segment] = []

    def grow(p, d, length, radius, level, parent):
        end = p + d * length
        idx = len(segs)
        segs.append(Segment(tuple(p), tuple(end), radius, radius, level, parent))
        if level + 1 >= spec.depth:
            return
        u, w = perpendicular_frame(d)
        phi = rng.uniform(0, 2 * math.pi)
        axis = math.cos(phi) * u + math.sin(phi) * w
        for sign in (1, -1):
            theta = rng.uniform(spec.angle_min, spec.angle_max)
            child = unit(math.cos(theta) * d + sign * math.sin(theta) * axis)
            grow(end, child, length * spec.length_decay * rng.uniform(0.9, 1.1),
                 radius * spec.radius_decay, level + 1, idx)

    grow(start, d0, spec.root_length, spec.radius, 0, -1)
    # clip segments to the volume box
    clipped = []
    for s in segs:
        p0 = np.clip(s.p0, 0, extent)
        p1 = np.clip(s.p1, 0, extent)
        clipped.append(Segment(tuple(p0), tuple(p1), s.r0, s.r1, s.level, s.parent))
    seed = start + d0 * min(0.2 * spec.root_length, 3 * spec.radius)
    return clipped, seed, d0


def generate(spec: PhantomSpec) -> Phantom:
    """Build image, ground-truth mask and the analytic centerline segments."""
    rng = np.random.default_rng(spec.rng_seed)
    if spec.kind == "straight_tube":
        segs, seed, sdir = _straight(spec)
    elif spec.kind == "y_tube":
        segs, seed, sdir = _y_tube(spec)
    elif spec.kind == "loop_tube":
        segs, seed, sdir = _loop_tube(spec)
    elif spec.kind == "sinusoid":
        segs, seed, sdir = _sinusoid(spec, rng)
    else:
        segs, seed, sdir = _tree(spec, rng)
    template = Volume(np.zeros(tuple(int(n) for n in spec.dims)), spec.spacing)
    mask = rasterize_tubes(template, [(s.p0, s.p1, s.r0, s.r1) for s in segs],
                           flat_ends=spec.kind == "straight_tube")
    image = np.where(mask, spec.vessel_intensity, spec.background_intensity).astype(np.float64)
    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([spec.rng_seed, 1])
        image = image + noise_rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return Phantom(
        image=template.like(image),
        truth=template.like(mask.astype(np.float64)),
        segments=segs,
        seed=np.asarray(seed, dtype=np.float64),
        seed_direction=np.asarray(sdir, dtype=np.float64),
    )


def write_centerline(phantom: Phantom, path) -> Path:
    path = Path(path)
    doc = {
        "seed": [float(x) for x in phantom.seed],
        "seed_direction": [float(x) for x in phantom.seed_direction],
        "segments": [
            {"p0": [float(x) for x in s.p0], "p1": [float(x) for x in s.p1],
             "r0": float(s.r0), "r1": float(s.r1), "level": s.level, "parent": s.parent}
            for s in phantom.segments
        ],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def read_centerline(path) -> dict:
    doc = json.loads(Path(path).read_text())
    doc["segments"] = [Segment(tuple(s["p0"]), tuple(s["p1"]), s["r0"], s["r1"], s["level"], s["parent"])
                       for s in doc["segments"]]
    return doc


def spec_to_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)
