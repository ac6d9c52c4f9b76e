"""Seed-based vessel network tracking in 3D volumes."""

from .flowgraph import GraphParams
from .metrics import dice, hausdorff, surface_rms
from .network import VesselNetwork, export_swc, export_topology, rasterize_mask, read_topology
from .sampling import ConeParams
from .synth import PhantomSpec, generate
from .tracker import TrackerConfig, TrackingError, track
from .vesselness import DEParams
from .volume import Volume, load_volume, save_volume

__all__ = [
    "ConeParams",
    "DEParams",
    "GraphParams",
    "PhantomSpec",
    "TrackerConfig",
    "TrackingError",
    "Volume",
    "VesselNetwork",
    "dice",
    "export_swc",
    "export_topology",
    "generate",
    "hausdorff",
    "load_volume",
    "rasterize_mask",
    "read_topology",
    "save_volume",
    "surface_rms",
    "track",
]
