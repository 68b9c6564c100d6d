"""``reconstruct`` command-line driver.

Every subcommand writes tab-delimited records to stdout. Failures print a
single ``error<TAB><category><TAB><message>`` line to stderr and exit with
2 (config), 3 (io) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, IoError, LayoutRegError
from .globalreg import format_trace
from .io import read_trajectory, save_dataset, write_layout
from .layout import estimate_layout, write_pgm
from .pipeline import (
    PipelineConfig,
    compute_metrics,
    config_from_dict,
    get_dataset,
    load_config,
    run_pipeline,
    tomllib,
)
from .planes import extract_fragment_planes
from .synth import SyntheticRoomSpec, synthesize_room

EXIT_CODES = {"config": 2, "io": 3, "numerical": 4}


def _emit(*fields):
    print("\t".join(str(f) for f in fields))


def _load(args) -> PipelineConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    return load_config(args.config).with_overrides(seed=args.seed, out=args.out,
                                                   no_layout=getattr(args, "no_layout", False))


def _room_from_file(path) -> SyntheticRoomSpec:
    """A room spec file is either a bare room table or a config with ``[synth]``."""
    path = Path(path)
    try:
        tree = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from None
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "synth" in tree:
        return config_from_dict(tree, path.parent).room_spec()
    try:
        return SyntheticRoomSpec.from_dict(tree)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_synth(args) -> int:
    if args.config is None:
        raise ConfigError("--spec/--config is required")
    spec = _room_from_file(args.config)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    spec.validate()
    out = Path(args.out or "data")
    ds = synthesize_room(spec)
    try:
        save_dataset(ds, out)
    except OSError as exc:
        raise IoError(f"cannot write dataset to {out}: {exc.strerror}") from None
    _emit("fragments", len(ds.fragments))
    _emit("points", sum(len(f) for f in ds.fragments))
    _emit("dataset", out)
    return 0


def cmd_run(args) -> int:
    config = _load(args)
    res = run_pipeline(config, trace=True)
    for name, path in res.artifacts.items():
        _emit("artifact", name, path)
    if args.trace:
        sys.stdout.write(format_trace(res.joint.trace))
    if res.metrics:
        _emit("metric", "value")
        for k, v in res.metrics.items():
            _emit(k, repr(v))
    return 0


def _trajectory(args, config, dataset):
    path = Path(args.trajectory) if args.trajectory else Path(config.out) / "trajectory.txt"
    poses = read_trajectory(path)
    if len(poses) != len(dataset.fragments):
        raise IoError(f"{path}: {len(poses)} poses for {len(dataset.fragments)} fragments")
    return poses


def cmd_eval(args) -> int:
    config = _load(args)
    dataset = get_dataset(config)
    if dataset.ground_truth is None:
        raise IoError("dataset has no ground truth")
    poses = _trajectory(args, config, dataset)
    metrics = compute_metrics(dataset, poses, alignment=config.alignment)
    _emit("metric", "value")
    for k, v in metrics.items():
        _emit(k, repr(v))
    return 0


def cmd_layout(args) -> int:
    config = _load(args)
    dataset = get_dataset(config)
    if args.trajectory:
        poses = _trajectory(args, config, dataset)
    else:
        poses = dataset.chained_odometry()
    labelings = [extract_fragment_planes(f, config.planes) for f in dataset.fragments]
    layout, _ = estimate_layout(labelings, poses, dataset.fragments, config.layout)
    out = Path(config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_layout(layout, out / "layout.txt")
        write_pgm(layout.grid, out / "occupancy.pgm", layout.boundary_cells)
    except OSError as exc:
        raise IoError(f"cannot write to {out}: {exc.strerror}") from None
    _emit("role", "nx", "ny", "nz", "offset")
    for role, p in layout.role_planes():
        _emit(role, *(repr(float(x)) for x in np.r_[p.normal, p.offset]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reconstruct", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, help="override the synthetic-room seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--spec", dest="config", help="room spec file (alias of --config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="full reconstruction pipeline")
    common(p)
    p.add_argument("--no-layout", action="store_true", help="drop the layout term")
    p.add_argument("--trace", action="store_true", help="print per-iteration energies")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="metrics for a trajectory against ground truth")
    common(p)
    p.add_argument("--trajectory", help="trajectory file (default: <out>/trajectory.txt)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("layout", help="layout estimation from fragments and a trajectory")
    common(p)
    p.add_argument("--trajectory", help="trajectory file (default: chained odometry)")
    p.set_defaults(func=cmd_layout)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.seed is not None and args.seed < 0:
        return _fail("config", "seed must be non-negative")
    try:
        return args.func(args)
    except LayoutRegError as exc:
        return _fail(exc.category, exc)
    except OSError as exc:
        return _fail("io", exc)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail("numerical", exc)


def _fail(category, message) -> int:
    msg = " ".join(str(message).split())
    print(f"error\t{category}\t{msg}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
