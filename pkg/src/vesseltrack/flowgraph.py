"""Layered split-node graph over detections and iterative branch extraction.

Each detection ``i`` becomes a begin node ``b_i`` and an end node ``e_i``
joined by a detection edge of negative cost ``log(1 - p_det)``. Transition
edges ``e_i -> b_j`` link detections on consecutive layers, entrance edges
``S -> e_i`` open at allowed sources, and exit edges ``b_i -> T`` carry
``1 + C_det(i)``. With one unit of flow per extraction the min-cost flow is a
shortest S-T path on a DAG, solved exactly by relaxation in layer order.

After a branch is accepted its detections become sources for later
branches (bifurcations), their own edges are closed, and every detection
within ``d_radius`` of the branch pays a toll ``k_toll * exp(-dist / d_radius)``
on its detection and exit edges. Extraction stops when the cheapest path
is no longer negative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vesselness import Detection

__all__ = [
    "GraphParams",
    "FlowGraph",
    "BranchPath",
    "C_IN",
    "detection_cost",
    "transition_cost",
    "toll_cost",
    "build_graph",
    "min_cost_path",
    "apply_toll",
    "extract_branches",
    "path_edges",
    "path_cost",
    "flow_conservation_ok",
    "write_graph",
]

C_IN = 1.0


@dataclass(frozen=True)
class GraphParams:
    d_max: float = 3.0
    d_radius: float = 4.0
    k_toll: float = 5.0

    def __post_init__(self):
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")
        if not self.d_radius > 0:
            raise ValueError("d_radius must be positive")
        if self.k_toll < 0:
            raise ValueError("k_toll must be >= 0")


def detection_cost(p_det: float) -> float:
    return math.log(1.0 - p_det)


def transition_cost(dist: float, d_max: float) -> float:
    """``-log((d_max - dist) / d_max)``; infinite at or beyond ``d_max``."""
    if dist >= d_max:
        return math.inf
    return -math.log((d_max - dist) / d_max)


def toll_cost(dist: float, gp: GraphParams) -> float:
    """Toll charged at ``dist`` mm from an accepted detection (0 beyond ``d_radius``)."""
    if dist > gp.d_radius:
        return 0.0
    return gp.k_toll * math.exp(-dist / gp.d_radius)


@dataclass(frozen=True)
class BranchPath:
    """One extracted branch.

    ``detections`` lists graph detection indices in layer order, excluding
    ``entry`` (the source the flow entered through: the apex or a detection
    of an earlier branch).
    """

    detections: tuple
    total_cost: float
    entry: int


@dataclass
class FlowGraph:
    detections: list
    centers: np.ndarray
    layers: np.ndarray
    base_cost: np.ndarray
    transitions: dict  # i -> list of (j, cost), j on layer(i) + 1
    toll: np.ndarray
    source: np.ndarray
    used: np.ndarray
    params: GraphParams = field(default_factory=GraphParams)

    @property
    def n(self) -> int:
        return len(self.detections)

    def det_cost(self, i: int) -> float:
        return float(self.base_cost[i] + self.toll[i])

    def exit_cost(self, i: int) -> float:
        return 1.0 + self.det_cost(i)

    def edges(self) -> list:
        """All open edges as ``(from, to, kind, cost)``; nodes are 'S', 'T', ('b', i), ('e', i)."""
        out = []
        for i in range(self.n):
            if self.source[i]:
                out.append(("S", ("e", i), "entrance", C_IN))
            if not self.used[i]:
                out.append((("b", i), ("e", i), "detection", self.det_cost(i)))
                out.append((("b", i), "T", "exit", self.exit_cost(i)))
            for j, c in self.transitions.get(i, ()):
                if not self.used[j]:
                    out.append((("e", i), ("b", j), "transition", c))
        return out


def build_graph(dets: list[Detection], apex: Detection, gp: GraphParams) -> FlowGraph:
    """Graph over ``[apex] + dets``; the apex is node 0 on layer 0 and the only source."""
    if apex is None:
        raise ValueError("apex detection is required")
    all_dets = [apex] + list(dets)
    n = len(all_dets)
    centers = np.array([d.center for d in all_dets]).reshape(n, 3)
    layers = np.array([0] + [int(d.layer) for d in dets], dtype=int)
    if np.any(layers[1:] < 1):
        raise ValueError("candidate detections must lie on layers >= 1")
    base = np.array([detection_cost(d.p_det) for d in all_dets])
    transitions: dict = {}
    by_layer: dict = {}
    for i, l in enumerate(layers):
        by_layer.setdefault(int(l), []).append(i)
    for i in range(n):
        nxt = by_layer.get(int(layers[i]) + 1, [])
        if not nxt:
            continue
        dist = np.linalg.norm(centers[nxt] - centers[i], axis=1)
        links = [(j, transition_cost(float(dd), gp.d_max)) for j, dd in zip(nxt, dist) if dd < gp.d_max]
        if links:
            transitions[i] = links
    source = np.zeros(n, dtype=bool)
    source[0] = True
    used = np.zeros(n, dtype=bool)
    return FlowGraph(all_dets, centers, layers, base, transitions, np.zeros(n), source, used, gp)


def _better(cost, seq, best_cost, best_seq) -> bool:
    if not cost < math.inf:
        return False
    if best_seq is None or cost < best_cost:
        return True
    return cost == best_cost and seq < best_seq


def min_cost_path(g: FlowGraph) -> BranchPath | None:
    """Cheapest S-T path under current costs, or ``None`` when T is unreachable.

    Nodes are relaxed in topological order (layer by layer, begin before end
    node). Ties go to the lexicographically smallest detection sequence, with
    the entry index first.
    """
    n = g.n
    inf = math.inf
    # state per node: (cost, sequence); sequence = (entry, d1, d2, ...)
    cost_b = [inf] * n
    seq_b = [None] * n
    cost_e = [inf] * n
    seq_e = [None] * n
    for i in range(n):
        if g.source[i]:
            cost_e[i] = C_IN
            seq_e[i] = (i,)
    best_cost, best_seq = inf, None
    order = sorted(range(n), key=lambda i: (g.layers[i], i))
    layer_groups: list = []
    for i in order:
        if layer_groups and g.layers[layer_groups[-1][0]] == g.layers[i]:
            layer_groups[-1].append(i)
        else:
            layer_groups.append([i])
    for group in layer_groups:
        # begin nodes: detection edge into e_i, exit edge into T
        for i in group:
            if seq_b[i] is None or g.used[i]:
                continue
            c = cost_b[i] + g.det_cost(i)
            if _better(c, seq_b[i], cost_e[i], seq_e[i]):
                cost_e[i], seq_e[i] = c, seq_b[i]
            c = cost_b[i] + g.exit_cost(i)
            if _better(c, seq_b[i], best_cost, best_seq):
                best_cost, best_seq = c, seq_b[i]
        # end nodes: transitions into the next layer
        for i in group:
            if seq_e[i] is None:
                continue
            for j, tc in g.transitions.get(i, ()):
                if g.used[j]:
                    continue
                c = cost_e[i] + tc
                s = seq_e[i] + (j,)
                if _better(c, s, cost_b[j], seq_b[j]):
                    cost_b[j], seq_b[j] = c, s
    if best_seq is None:
        return None
    return BranchPath(tuple(best_seq[1:]), float(best_cost), int(best_seq[0]))


def path_edges(g: FlowGraph, path: BranchPath) -> list:
    """The S-T edge list ``(from, to, kind, cost)`` traversed by ``path``."""
    trans = {(i, j): c for i, links in g.transitions.items() for j, c in links}
    edges = [("S", ("e", path.entry), "entrance", C_IN)]
    prev = path.entry
    for k, j in enumerate(path.detections):
        edges.append((("e", prev), ("b", j), "transition", trans[(prev, j)]))
        if k < len(path.detections) - 1:
            edges.append((("b", j), ("e", j), "detection", g.det_cost(j)))
        else:
            edges.append((("b", j), "T", "exit", g.exit_cost(j)))
        prev = j
    return edges


def path_cost(g: FlowGraph, path: BranchPath) -> float:
    return float(sum(e[3] for e in path_edges(g, path)))


def flow_conservation_ok(g: FlowGraph, path: BranchPath) -> bool:
    """Check inflow == outflow at every b/e node for the unit flow along ``path``."""
    inflow: dict = {}
    outflow: dict = {}
    for a, b, _, _ in path_edges(g, path):
        outflow[a] = outflow.get(a, 0) + 1
        inflow[b] = inflow.get(b, 0) + 1
    nodes = set(inflow) | set(outflow)
    for node in nodes:
        if node in ("S", "T"):
            continue
        if inflow.get(node, 0) != outflow.get(node, 0):
            return False
    return outflow.get("S", 0) == 1 and inflow.get("T", 0) == 1


def apply_toll(g: FlowGraph, accepted: BranchPath, open_sources: bool = True) -> FlowGraph:
    """Charge tolls around ``accepted``, close its detections, and open them as sources."""
    gp = g.params
    members = list(accepted.detections)
    if members:
        diff = g.centers[:, None, :] - g.centers[members][None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        inc = np.where(dist <= gp.d_radius, gp.k_toll * np.exp(-dist / gp.d_radius), 0.0)
        g.toll = g.toll + inc.sum(axis=1)
    for j in members:
        g.used[j] = True
        if open_sources:
            g.source[j] = True
    return g


def extract_branches(dets: list[Detection], apex: Detection, gp: GraphParams,
                     max_branches: int | None = None) -> tuple[list[BranchPath], FlowGraph]:
    """Extract branches until the cheapest remaining path is not negative.

    Returns the branches in discovery order and the final graph (graph
    detection index 0 is the apex, index ``k`` is ``dets[k - 1]``).
    """
    g = build_graph(dets, apex, gp)
    branches = []
    while max_branches is None or len(branches) < max_branches:
        path = min_cost_path(g)
        if path is None or path.total_cost >= 0:
            break
        branches.append(path)
        apply_toll(g, path)
    return branches, g


def write_graph(g: FlowGraph, path) -> Path:
    """Debug dump of nodes and open edges as JSON."""
    def name(node):
        return node if isinstance(node, str) else f"{node[0]}{node[1]}"

    doc = {
        "nodes": [
            {"index": i, "layer": int(g.layers[i]), "center": [float(x) for x in g.centers[i]],
             "p_det": float(g.detections[i].p_det), "toll": float(g.toll[i]),
             "source": bool(g.source[i]), "used": bool(g.used[i])}
            for i in range(g.n)
        ],
        "edges": [{"from": name(a), "to": name(b), "kind": k, "cost": c} for a, b, k, c in g.edges()],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path
