"""Vessel network bookkeeping: validation, next seeds, export and rasterization.

A network is a forest of branches. Every branch is an ordered chain of
detections; a child branch records the parent branch and the index of the
parent detection it hangs from.

Validation of a batch of new branches works in three steps:

* duplicates: two new branches whose chains run within
  ``beta_dup * (mean radius a + mean radius b)`` of each other (mean
  nearest-point distance) are the same vessel; the costlier one is dropped;
* overlap trimming: leading detections within half a radius of the parent's
  centerline are removed, and a branch with nothing left is dropped as covered;
* loops: a branch that comes within ``beta_loop * (r_new + r_near)`` of a
  network detection it is far from *along the tree* reconnects the network
  and is dropped. "Far" means a tree path longer than ``loop_span`` times
  that threshold, which exempts the attachment zone and sibling branches
  diverging from a shared fork.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from ._geometry import rasterize_tubes, unit
from .vesselness import CylinderModel, Detection
from .volume import Volume

__all__ = [
    "Branch",
    "Seed",
    "VesselNetwork",
    "branch_distance",
    "remove_duplicates",
    "validate_branches",
    "next_seeds",
    "seed_is_new",
    "export_topology",
    "read_topology",
    "export_swc",
    "read_swc",
    "rasterize_mask",
    "network_segments",
]

SEED_WINDOW = 0.3
# a leading detection counts as inside the parent within this fraction of its radius;
# a full radius swallows sibling arms that leave a wide vessel
TRIM_FACTOR = 0.5
TOPOLOGY_FIELDS = ["x", "y", "z", "radius", "fitness", "dx", "dy", "dz", "layer"]


@dataclass
class Branch:
    id: int
    detections: list
    parent_branch: int | None = None
    parent_index: int | None = None
    source_seed: int = 0
    cost: float = 0.0

    def __post_init__(self):
        if not self.detections:
            raise ValueError("a branch needs at least one detection")

    @property
    def points(self) -> np.ndarray:
        return np.array([d.center for d in self.detections]).reshape(-1, 3)

    @property
    def radii(self) -> np.ndarray:
        return np.array([d.radius for d in self.detections])

    @property
    def mean_radius(self) -> float:
        return float(self.radii.mean())


@dataclass
class Seed:
    position: np.ndarray
    direction: np.ndarray
    radius: float
    parent_branch: int | None = None
    parent_index: int | None = None


@dataclass
class VesselNetwork:
    branches: list = field(default_factory=list)
    seeds_used: list = field(default_factory=list)

    def get(self, branch_id) -> Branch | None:
        for b in self.branches:
            if b.id == branch_id:
                return b
        return None

    def next_id(self) -> int:
        return max((b.id for b in self.branches), default=-1) + 1

    def n_detections(self) -> int:
        return sum(len(b.detections) for b in self.branches)


def branch_distance(a: Branch, b: Branch) -> float:
    """Symmetric chain distance: the smaller of the two directed mean nearest-point distances."""
    pa, pb = a.points, b.points
    da = cKDTree(pb).query(pa)[0].mean()
    db = cKDTree(pa).query(pb)[0].mean()
    return float(min(da, db))


class _Tree:
    """Detections of the accepted network as a weighted tree for along-network distances."""

    def __init__(self, branches):
        self.branches = {}
        self.offset = {}
        pts, radii = [], []
        for b in branches:
            self._add(b, pts, radii)
        self.points = np.array(pts).reshape(-1, 3)
        self.radii = np.array(radii)

    def _add(self, b, pts, radii):
        self.offset[b.id] = len(pts)
        self.branches[b.id] = b
        pts.extend(b.points.tolist())
        radii.extend(b.radii.tolist())

    def add(self, b):
        pts, radii = self.points.tolist(), self.radii.tolist()
        self._add(b, pts, radii)
        self.points = np.array(pts).reshape(-1, 3)
        self.radii = np.array(radii)

    def node(self, branch_id, index) -> int:
        return self.offset[branch_id] + index

    def distances_from(self, node: int) -> np.ndarray:
        rows, cols, w = [], [], []
        for bid, b in self.branches.items():
            base = self.offset[bid]
            for k in range(len(b.detections) - 1):
                rows.append(base + k)
                cols.append(base + k + 1)
            if b.parent_branch is not None and b.parent_branch in self.offset:
                rows.append(self.node(b.parent_branch, b.parent_index))
                cols.append(base)
        n = len(self.points)
        if rows:
            rows = np.array(rows)
            cols = np.array(cols)
            w = np.linalg.norm(self.points[rows] - self.points[cols], axis=1) + 1e-9
            graph = coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
        else:
            graph = coo_matrix((n, n)).tocsr()
        return dijkstra(graph, directed=False, indices=node)


def _trim_into_parent(branch: Branch, parent: Branch) -> list:
    tree = cKDTree(parent.points)
    dets = list(branch.detections)
    while dets:
        dist, k = tree.query(dets[0].center)
        if dist < TRIM_FACTOR * parent.detections[k].radius:
            dets.pop(0)
        else:
            break
    return dets


def remove_duplicates(new: list, beta_dup: float = 1.0) -> list:
    """Drop branches that duplicate a cheaper one (ties: lower id wins); input order is kept."""
    order = sorted(range(len(new)), key=lambda k: (new[k].cost, new[k].id))
    kept = []
    for k in order:
        dup = any(branch_distance(new[k], new[j]) < beta_dup * (new[k].mean_radius + new[j].mean_radius)
                  for j in kept)
        if not dup:
            kept.append(k)
    return [new[k] for k in sorted(kept)]


def validate_branches(net: VesselNetwork, new: list, beta_dup: float = 1.0,
                      beta_loop: float = 1.5, loop_span: float = 4.0) -> list:
    """Accepted subset of ``new`` (possibly trimmed and re-attached), in input order.

    ``net`` is not modified.
    """
    if not new:
        return []
    kept = remove_duplicates(new, beta_dup)
    tree = _Tree(net.branches)
    accepted = []
    for b in kept:
        if not tree.branches:
            root = Branch(b.id, list(b.detections), None, None, b.source_seed, b.cost)
            accepted.append(root)
            tree.add(root)
            continue
        parent = tree.branches.get(b.parent_branch)
        if parent is None:
            # attach to whatever accepted detection is closest to the start
            node = int(cKDTree(tree.points).query(b.detections[0].center)[1])
            parent = _owner(tree, node)
        dets = _trim_into_parent(b, parent)
        if not dets:
            continue
        pidx = int(cKDTree(parent.points).query(dets[0].center)[1])
        cand = Branch(b.id, dets, parent.id, pidx, b.source_seed, b.cost)
        if _forms_loop(tree, cand, beta_loop, loop_span):
            continue
        accepted.append(cand)
        tree.add(cand)
    return accepted


def _owner(tree: _Tree, node: int) -> Branch:
    for bid, off in tree.offset.items():
        b = tree.branches[bid]
        if off <= node < off + len(b.detections):
            return b
    raise IndexError(node)


def _forms_loop(tree: _Tree, cand: Branch, beta_loop: float, loop_span: float) -> bool:
    attach = tree.node(cand.parent_branch, cand.parent_index)
    along_net = tree.distances_from(attach)
    pts = cand.points
    steps = np.linalg.norm(np.diff(np.vstack([tree.points[attach], pts]), axis=0), axis=1)
    along_new = np.cumsum(steps)
    r_new = cand.mean_radius
    kd = cKDTree(tree.points)
    reach = beta_loop * (r_new + tree.radii.max())
    for k in range(len(pts)):
        for n in kd.query_ball_point(pts[k], reach):
            thr = beta_loop * (r_new + tree.radii[n])
            if np.linalg.norm(pts[k] - tree.points[n]) < thr and along_new[k] + along_net[n] > loop_span * thr:
                return True
    return False


def next_seeds(accepted: list) -> list:
    """One seed per branch of at least two detections: the fittest of its last 30%."""
    seeds = []
    for b in accepted:
        n = len(b.detections)
        if n < 2:
            continue
        window = math.ceil(SEED_WINDOW * n)
        start = n - window
        fits = [b.detections[k].fitness for k in range(start, n)]
        best = max(range(window), key=lambda j: (fits[j], j))
        k = start + best
        det = b.detections[k]
        pts = b.points
        # chord from the branch start: neighbouring detections can coincide
        travel = pts[k] - pts[0]
        direction = np.array(det.direction, dtype=np.float64)
        if np.linalg.norm(travel) > 0 and direction @ travel < 0:
            direction = -direction
        seeds.append(Seed(det.center.copy(), direction, float(det.radius), b.id, k))
    return seeds


def seed_is_new(seed: Seed, used: list, beta_loop: float, max_guard: float = math.inf) -> bool:
    """False when ``seed`` lies within ``min(beta_loop * radius, max_guard)`` of an already used seed."""
    guard = min(beta_loop * seed.radius, max_guard)
    for s in used:
        if np.linalg.norm(np.asarray(s.position) - seed.position) < guard:
            return False
    return True


# -- export -------------------------------------------------------------------------


def export_topology(net: VesselNetwork, path) -> Path:
    """Write the branch forest as JSON.

    Per branch: ``id``, ``parent`` (id or null), ``parent_index``,
    ``source_seed``, ``cost`` and ``detections`` as rows in the order of
    ``fields`` (x y z mm, radius mm, fitness, unit direction, layer).
    """
    doc = {
        "format": "vesseltrack-topology",
        "version": 1,
        "fields": TOPOLOGY_FIELDS,
        "branches": [
            {
                "id": b.id,
                "parent": b.parent_branch,
                "parent_index": b.parent_index,
                "source_seed": b.source_seed,
                "cost": float(b.cost),
                "detections": [
                    [*(float(x) for x in d.center), float(d.radius), float(d.fitness),
                     *(float(x) for x in d.direction), int(d.layer)]
                    for d in b.detections
                ],
            }
            for b in net.branches
        ],
        "seeds": [
            {"position": [float(x) for x in s.position], "direction": [float(x) for x in s.direction],
             "radius": float(s.radius)}
            for s in net.seeds_used
        ],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def read_topology(path) -> VesselNetwork:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "vesseltrack-topology":
        raise ValueError(f"{path}: not a topology export")
    net = VesselNetwork()
    for rec in doc["branches"]:
        dets = []
        for x, y, z, r, fit, dx, dy, dz, layer in rec["detections"]:
            w = 1.0 / fit - 1.0 if fit > 0 else math.inf
            dets.append(Detection(CylinderModel((x, y, z), (dx, dy, dz), r), w, int(layer)))
        net.branches.append(Branch(rec["id"], dets, rec["parent"], rec["parent_index"],
                                   rec.get("source_seed", 0), rec.get("cost", 0.0)))
    for s in doc.get("seeds", []):
        net.seeds_used.append(Seed(np.array(s["position"]), np.array(s["direction"]), s["radius"]))
    return net


def export_swc(net: VesselNetwork, path) -> Path:
    """Standard 7-column SWC: id type x y z radius parent (type 2 throughout)."""
    node_of = {}
    lines = ["# vesseltrack SWC export", "# id type x y z radius parent"]
    next_node = 1
    for b in net.branches:
        for k, d in enumerate(b.detections):
            if k > 0:
                parent = node_of[(b.id, k - 1)]
            elif b.parent_branch is not None and (b.parent_branch, b.parent_index) in node_of:
                parent = node_of[(b.parent_branch, b.parent_index)]
            else:
                parent = -1
            x, y, z = d.center
            lines.append(f"{next_node} 2 {x:.6f} {y:.6f} {z:.6f} {d.radius:.6f} {parent}")
            node_of[(b.id, k)] = next_node
            next_node += 1
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_swc(path) -> np.ndarray:
    """SWC rows as an ``(n, 7)`` float array."""
    rows = [line.split() for line in Path(path).read_text().splitlines()
            if line.strip() and not line.startswith("#")]
    return np.array(rows, dtype=np.float64).reshape(-1, 7)


def network_segments(net: VesselNetwork) -> list:
    """Tube segments ``(p0, p1, r0, r1)`` covering every branch and its link to the parent."""
    segs = []
    for b in net.branches:
        dets = b.detections
        parent = net.get(b.parent_branch) if b.parent_branch is not None else None
        if parent is not None and b.parent_index is not None:
            pd = parent.detections[b.parent_index]
            segs.append((pd.center, dets[0].center, pd.radius, dets[0].radius))
        if len(dets) == 1:
            segs.append((dets[0].center, dets[0].center, dets[0].radius, dets[0].radius))
        for d0, d1 in zip(dets[:-1], dets[1:]):
            segs.append((d0.center, d1.center, d0.radius, d1.radius))
    return segs


def rasterize_mask(net: VesselNetwork, template: Volume, radius_scale: float = 1.0) -> Volume:
    """Binary volume of voxels within the (linearly interpolated) radius of any branch."""
    segs = [(p0, p1, r0 * radius_scale, r1 * radius_scale) for p0, p1, r0, r1 in network_segments(net)]
    mask = rasterize_tubes(template, segs)
    return template.like(mask.astype(np.float64))


def travel_direction(points: np.ndarray) -> np.ndarray:
    return unit(points[-1] - points[0])
