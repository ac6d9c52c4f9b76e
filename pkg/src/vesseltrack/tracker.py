"""Iterative network tracking from a single seed.

Each iteration pops a seed, fits the apex detection, samples a cone in the
seed direction, scores the candidates, extracts branches through the flow
graph, validates them against the network built so far and queues new seeds
at the branch ends. The queue is FIFO, so a bounded run covers the proximal
tree first.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from ._geometry import unit
from .flowgraph import GraphParams, extract_branches
from .network import Branch, Seed, VesselNetwork, next_seeds, seed_is_new, validate_branches
from .sampling import ConeParams, place_cloud
from .vesselness import DEParams, Detection, fit_cylinder, fit_multistart, select_candidates, with_layer
from .volume import Volume, contains

__all__ = ["TrackerConfig", "TrackingError", "track"]

log = logging.getLogger(__name__)

# an apex whose lumen is not at least one noise std brighter than its shell
# is noise that happens to pass the lumen-brighter rule
MIN_APEX_CONTRAST = 1.0
# the user seed gets a stricter bar: fits in pure noise reach about 2 std
MIN_SEED_CONTRAST = 3.0


class TrackingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    """Everything a tracking run depends on.

    ``initial_radius`` is the starting radius guess for the first apex fit
    (defaults to twice the largest voxel spacing). With ``bidirectional``
    the first seed is followed both ways along its fitted axis.
    """

    initial_seed: tuple
    initial_direction: tuple | None = None
    cone: ConeParams = field(default_factory=ConeParams)
    graph: GraphParams = field(default_factory=GraphParams)
    de: DEParams = field(default_factory=DEParams)
    sens: float = 0.8
    beta_dup: float = 1.0
    beta_loop: float = 1.5
    max_iterations: int = 500
    initial_radius: float | None = None
    bidirectional: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.sens <= 1:
            raise ValueError("sens must lie in (0, 1]")
        if self.beta_dup < 0 or self.beta_loop < 0:
            raise ValueError("beta_dup and beta_loop must be >= 0")
        if len(self.initial_seed) != 3:
            raise ValueError("initial_seed must be a 3-vector")
        if self.initial_direction is not None:
            d = np.asarray(self.initial_direction, dtype=np.float64)
            if d.shape != (3,) or not np.linalg.norm(d) > 0:
                raise ValueError("initial_direction must be a nonzero 3-vector")
        if self.initial_radius is not None and not self.initial_radius > 0:
            raise ValueError("initial_radius must be positive")


def _initial_detection(v: Volume, cfg: TrackerConfig) -> Detection:
    seed = np.asarray(cfg.initial_seed, dtype=np.float64)
    if not contains(v, seed):
        raise TrackingError("seed outside volume bounds")
    r0 = cfg.initial_radius if cfg.initial_radius is not None else 2.0 * max(v.spacing)
    if cfg.initial_direction is None:
        det = fit_multistart(v, seed, r0, cfg.de)
    else:
        det = fit_cylinder(v, seed, unit(cfg.initial_direction), r0, cfg.de, key=(0,))
    if not _is_vessel(det, MIN_SEED_CONTRAST):
        raise TrackingError("seed not on a vessel")
    return det


def _is_vessel(det: Detection | None, min_contrast: float = MIN_APEX_CONTRAST) -> bool:
    return det is not None and det.contrast >= min_contrast


def _oriented(det: Detection, direction) -> np.ndarray:
    d = np.array(det.direction)
    return -d if d @ direction < 0 else d


def track(v: Volume, cfg: TrackerConfig) -> VesselNetwork:
    """Grow a vessel network from ``cfg.initial_seed``.

    Raises
    ------
    TrackingError
        When the seed lies outside the volume or no vessel can be fitted there.
    """
    first = _initial_detection(v, cfg)
    start_dir = first.direction
    if cfg.initial_direction is not None:
        start_dir = _oriented(first, unit(cfg.initial_direction))
    queue = deque([Seed(first.center.copy(), start_dir, first.radius)])
    if cfg.bidirectional:
        queue.append(Seed(first.center.copy(), -start_dir, first.radius))

    net = VesselNetwork()
    iteration = 0
    while queue and iteration < cfg.max_iterations:
        seed = queue.popleft()
        iteration += 1
        if iteration == 1:
            apex = first
        else:
            apex = fit_cylinder(v, seed.position, seed.direction, seed.radius, cfg.de,
                                key=(2, iteration), search_radius=0.5 * cfg.cone.s)
        net.seeds_used.append(seed)
        if not _is_vessel(apex):
            log.info("cone %d at %s: apex fit failed", iteration, _fmt(seed.position))
            continue
        axis = _oriented(apex, seed.direction)
        cloud = place_cloud(cfg.cone, apex.center, axis)
        cands = select_candidates(v, cloud, apex, cfg.sens, cfg.de, key_prefix=(1, iteration))
        paths, g = extract_branches(cands, with_layer(apex, 0), cfg.graph)

        base_id = net.next_id()
        local_of = {}  # graph detection index -> (tentative branch id, position)
        tentative = []
        for k, path in enumerate(paths):
            bid = base_id + k
            dets = [g.detections[j] for j in path.detections]
            if path.entry == 0:
                parent, pidx = seed.parent_branch, seed.parent_index
                if parent is None and not net.branches:
                    dets = [apex] + dets
            else:
                parent, pidx = local_of[path.entry]
            for pos, j in enumerate(path.detections):
                local_of[j] = (bid, pos)
            tentative.append(Branch(bid, dets, parent, pidx, iteration - 1, path.total_cost))

        accepted = validate_branches(net, tentative, cfg.beta_dup, cfg.beta_loop)
        accepted = _renumber(accepted, base_id)
        net.branches.extend(accepted)

        pending = [s for s in queue]
        # a wide vessel's guard must not swallow the seed one cone length ahead
        max_guard = 0.5 * cfg.cone.L * cfg.cone.s
        for s in next_seeds(accepted):
            if seed_is_new(s, net.seeds_used + pending, cfg.beta_loop, max_guard):
                queue.append(s)
                pending.append(s)
        log.info("cone %d at %s: %d candidates, %d paths, %d accepted, %d branches total",
                 iteration, _fmt(apex.center), len(cands), len(paths), len(accepted), len(net.branches))
    return net


def _renumber(branches: list, base_id: int) -> list:
    mapping = {b.id: base_id + k for k, b in enumerate(branches)}
    return [replace(b, id=mapping[b.id], parent_branch=mapping.get(b.parent_branch, b.parent_branch))
            for b in branches]


def _fmt(p) -> str:
    return "(" + ", ".join(f"{x:.1f}" for x in p) + ")"
