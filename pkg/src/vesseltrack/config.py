"""INI configuration for tracking runs and phantoms.

Tracking configs use the sections ``[tracker]``, ``[cone]``, ``[graph]`` and
``[de]``; phantom configs use ``[phantom]``. Every key is optional except
``kind`` in ``[phantom]``; omitted keys take the dataclass defaults. Lengths
are mm and angles radians. Vectors are written ``x, y, z``.

Example::

    [tracker]
    seed = 63.5, 63.5, 12.0
    direction = 0, 0, 1
    sens = 0.8

    [cone]
    alpha = 0.8
    s = 1.5
    L = 8

    [graph]
    d_max = 4.5
    d_radius = 4.0
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .flowgraph import GraphParams
from .sampling import ConeParams
from .synth import PhantomSpec
from .tracker import TrackerConfig
from .vesselness import DEParams

__all__ = ["ConfigError", "parse_vector", "load_tracker_config", "tracker_config_from_parser",
           "load_phantom_spec", "write_tracker_config", "with_overrides", "SWEEP_KEYS"]

# sweepable parameter -> (section, field)
SWEEP_KEYS = {
    "d_radius": ("graph", "d_radius"),
    "d_max": ("graph", "d_max"),
    "k_toll": ("graph", "k_toll"),
    "alpha": ("cone", "alpha"),
    "s": ("cone", "s"),
    "L": ("cone", "L"),
    "sens": ("tracker", "sens"),
    "beta_dup": ("tracker", "beta_dup"),
    "beta_loop": ("tracker", "beta_loop"),
}


class ConfigError(ValueError):
    pass


def parse_vector(text: str, name: str = "vector") -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ConfigError(f"{name}: expected 3 comma-separated numbers, got '{text}'")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _read(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep "L" distinct from "l"
    path = Path(path)
    try:
        with path.open() as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return cp


def _convert(cls, section: str, raw: dict) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, text in raw.items():
        if key not in fields:
            raise ConfigError(f"[{section}] unknown key '{key}'")
        default = fields[key].default
        text = text.strip()
        try:
            if text.lower() in ("none", ""):
                out[key] = None
            elif isinstance(default, bool):
                out[key] = text.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                out[key] = int(text)
            elif isinstance(default, tuple) or (default is None and "," in text):
                parts = [p for p in text.replace(",", " ").split() if p]
                nums = [float(p) for p in parts]
                out[key] = tuple(int(n) if n.is_integer() and key == "dims" else n for n in nums)
            elif isinstance(default, str):
                out[key] = text
            else:
                out[key] = float(text)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse '{text}'") from None
    return out


def _build(cls, section: str, raw: dict):
    try:
        return cls(**_convert(cls, section, raw))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[{section}] {exc}") from None


def tracker_config_from_parser(cp: configparser.ConfigParser, seed=None, direction=None) -> TrackerConfig:
    sections = {name: dict(cp[name]) if cp.has_section(name) else {}
                for name in ("tracker", "cone", "graph", "de")}
    unknown = set(cp.sections()) - set(sections) - {"phantom"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    tr = sections["tracker"]
    text_seed = tr.pop("seed", None)
    text_dir = tr.pop("direction", None)
    if seed is None:
        if text_seed is None:
            raise ConfigError("no seed given: use --seed or set 'seed' in [tracker]")
        seed = parse_vector(text_seed, "seed")
    if direction is None and text_dir is not None and text_dir.strip().lower() != "none":
        direction = parse_vector(text_dir, "direction")
    kwargs = _convert(TrackerConfig, "tracker", tr)
    try:
        return TrackerConfig(
            initial_seed=tuple(seed),
            initial_direction=None if direction is None else tuple(direction),
            cone=_build(ConeParams, "cone", sections["cone"]),
            graph=_build(GraphParams, "graph", sections["graph"]),
            de=_build(DEParams, "de", sections["de"]),
            **kwargs,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[tracker] {exc}") from None


def load_tracker_config(path, seed=None, direction=None) -> TrackerConfig:
    """Parse a tracking config; ``seed``/``direction`` override the file values."""
    return tracker_config_from_parser(_read(path), seed, direction)


def load_phantom_spec(path) -> PhantomSpec:
    cp = _read(path)
    if not cp.has_section("phantom"):
        raise ConfigError("missing section [phantom]")
    raw = dict(cp["phantom"])
    if "kind" not in raw:
        raise ConfigError("[phantom] missing required key 'kind'")
    return _build(PhantomSpec, "phantom", raw)


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(x)) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_tracker_config(cfg: TrackerConfig, path) -> Path:
    """Write ``cfg`` back as INI; loading the file reproduces ``cfg``."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    tracker = {"seed": _fmt(cfg.initial_seed),
               "direction": "none" if cfg.initial_direction is None else _fmt(cfg.initial_direction)}
    for f in dataclasses.fields(TrackerConfig):
        if f.name in ("initial_seed", "initial_direction", "cone", "graph", "de"):
            continue
        value = getattr(cfg, f.name)
        tracker[f.name] = "none" if value is None else _fmt(value)
    cp["tracker"] = tracker
    for name in ("cone", "graph", "de"):
        obj = getattr(cfg, name)
        cp[name] = {f.name: "none" if getattr(obj, f.name) is None else _fmt(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
    path = Path(path)
    with path.open("w") as fh:
        cp.write(fh)
    return path


def with_overrides(cfg: TrackerConfig, overrides: dict) -> TrackerConfig:
    """Copy of ``cfg`` with sweep parameters (see ``SWEEP_KEYS``) replaced."""
    parts = {"cone": {}, "graph": {}, "tracker": {}}
    for key, value in overrides.items():
        if key not in SWEEP_KEYS:
            raise ConfigError(f"unknown sweep parameter '{key}', expected one of {sorted(SWEEP_KEYS)}")
        section, field = SWEEP_KEYS[key]
        parts[section][field] = int(value) if field == "L" else float(value)
    return dataclasses.replace(
        cfg,
        cone=dataclasses.replace(cfg.cone, **parts["cone"]),
        graph=dataclasses.replace(cfg.graph, **parts["graph"]),
        **parts["tracker"],
    )
