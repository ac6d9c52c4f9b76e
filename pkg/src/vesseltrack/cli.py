"""Command-line front end.

Commands::

    vesseltrack generate PHANTOM.ini --out PREFIX
    vesseltrack track VOLUME --config TRACK.ini [--seed x,y,z] [--direction dx,dy,dz] --out PREFIX
    vesseltrack evaluate MASK_A MASK_B
    vesseltrack sweep --case VOLUME MASK TRACK.ini [--case ...] --grid d_radius=2,3,4 --out TABLE.tsv
    vesseltrack export-swc TOPOLOGY.json --out TREE.swc

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import metrics
from .config import ConfigError, load_phantom_spec, load_tracker_config, parse_vector, with_overrides
from .network import export_swc, export_topology, rasterize_mask, read_topology
from .synth import generate, write_centerline
from .tracker import TrackingError, track
from .volume import VolumeFormatError, load_volume, save_volume

log = logging.getLogger("vesseltrack")

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _vector(text):
    try:
        return parse_vector(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def cmd_generate(args) -> int:
    spec = load_phantom_spec(args.spec)
    ph = generate(spec)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_volume(ph.image, f"{prefix}.vvol", dtype="f32")
    save_volume(ph.truth, f"{prefix}_mask.vvol", dtype="u8")
    write_centerline(ph, f"{prefix}_centerline.json")
    print(f"wrote {prefix}.vvol, {prefix}_mask.vvol, {prefix}_centerline.json")
    return 0


def run_track(volume_path, cfg, prefix):
    v = load_volume(volume_path)
    net = track(v, cfg)
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    export_topology(net, f"{prefix}_topology.json")
    export_swc(net, f"{prefix}.swc")
    mask = rasterize_mask(net, v)
    save_volume(mask, f"{prefix}_mask.vvol", dtype="u8")
    return net, mask


def cmd_track(args) -> int:
    cfg = load_tracker_config(args.config, seed=args.seed, direction=args.direction)
    net, _ = run_track(args.volume, cfg, args.out)
    print(f"{len(net.branches)} branches, {net.n_detections()} detections -> {args.out}_topology.json")
    return 0


def cmd_evaluate(args) -> int:
    a = load_volume(args.mask_a)
    b = load_volume(args.mask_b)
    report = metrics.evaluate(a, b)
    print(f"dice = {report['dice']:.6f}")
    print(f"surface_rms = {report['surface_rms_mm']:.6f} mm")
    print(f"hausdorff = {report['hausdorff_mm']:.6f} mm")
    return 0


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        name, sep, values = item.partition("=")
        if not sep or not values:
            raise UsageError(f"bad --grid '{item}', expected name=v1,v2,...")
        try:
            grid[name.strip()] = [float(x) for x in values.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"bad --grid values in '{item}'") from None
    return grid


def sweep_point(case, overrides) -> tuple[float, str]:
    """Dice of one tracking run, or ``(0.0, message)`` if it failed."""
    volume, mask, config = case
    try:
        cfg = with_overrides(load_tracker_config(config), overrides)
        v = load_volume(volume)
        truth = load_volume(mask)
        net = track(v, cfg)
        return metrics.dice(rasterize_mask(net, v), truth), ""
    except (TrackingError, ConfigError, VolumeFormatError, OSError, ValueError) as exc:
        return 0.0, str(exc)


def run_sweep(cases, grid: dict, jobs: int = 1) -> list[dict]:
    """One row per grid combination: parameter values, per-case Dice and their mean."""
    names = list(grid)
    combos = [dict(zip(names, values)) for values in itertools.product(*(grid[n] for n in names))]
    for combo in combos:
        with_overrides(load_tracker_config(cases[0][2]), combo)  # reject bad names before running
    tasks = [(case, combo) for combo in combos for case in cases]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(sweep_point, *zip(*tasks)))
    else:
        results = [sweep_point(case, combo) for case, combo in tasks]
    rows = []
    for k, combo in enumerate(combos):
        chunk = results[k * len(cases):(k + 1) * len(cases)]
        scores = [d for d, _ in chunk]
        notes = "; ".join(f"case {i}: {msg}" for i, (_, msg) in enumerate(chunk) if msg)
        row = dict(combo)
        row.update({f"dice_{i}": d for i, d in enumerate(scores)})
        row["dice"] = sum(scores) / len(scores)
        row["error"] = notes
        rows.append(row)
    return rows


def cmd_sweep(args) -> int:
    grid = _parse_grid(args.grid)
    if not grid:
        raise UsageError("sweep needs at least one --grid")
    rows = run_sweep([tuple(c) for c in args.case], grid, args.jobs)
    fields = list(rows[0].keys())
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=fields, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_export_swc(args) -> int:
    net = read_topology(args.topology)
    export_swc(net, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vesseltrack", description="Seed-based vessel network tracking.")
    p.add_argument("-v", "--verbose", action="store_true", help="per-cone progress log on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic phantom (volume, mask, centerline)")
    g.add_argument("spec", help="phantom INI file with a [phantom] section")
    g.add_argument("--out", required=True, help="output prefix")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("track", help="track a vessel network from a seed")
    t.add_argument("volume")
    t.add_argument("--config", required=True, help="tracking INI file")
    t.add_argument("--seed", type=_vector, help="x,y,z in mm (overrides the config)")
    t.add_argument("--direction", type=_vector, help="dx,dy,dz (optional)")
    t.add_argument("--out", required=True, help="output prefix")
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("evaluate", help="Dice, RMS and Hausdorff surface distance of two masks")
    e.add_argument("mask_a")
    e.add_argument("mask_b")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="Dice over a parameter grid")
    s.add_argument("--case", nargs=3, action="append", required=True,
                   metavar=("VOLUME", "MASK", "CONFIG"), help="one test case; repeatable")
    s.add_argument("--grid", action="append", default=[], metavar="NAME=V1,V2,...",
                   help="d_radius, d_max, alpha, s, ...; repeatable")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.add_argument("--out", help="TSV output (default stdout)")
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("export-swc", help="convert a topology export to SWC")
    x.add_argument("topology")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_swc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vesseltrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TrackingError, VolumeFormatError, OSError, ValueError) as exc:
        print(f"vesseltrack: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
