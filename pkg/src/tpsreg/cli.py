"""Command-line entry point.

Exit codes: 0 success, 2 configuration / argument error, 3 stage failure
(the failing stage is named on stderr).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .correspond import BaselineEstimator, gather_control_points, read_many, write_correspondences
from .errors import ConfigError, StageError
from .mesh import condition, read_ply, write_ply
from .resample import warp_mask, warp_volume, warp_volume_nearest
from .segment import extract_body_envelope, extract_bone, read_mask, write_mask
from .tps import read_field, save_tps, subsample_controls, tps_field_on_grid, tps_fit, write_field
from .volume import GridGeometry, read_metaimage, read_metaimage_array, write_metaimage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"input not found: {p}")
    return p


def _triple(text: str, conv=float):
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got '{text}'")
    return tuple(conv(p) for p in parts)


# ---------------------------------------------------------------------------
# stage commands

def cmd_segment(a):
    vol = read_metaimage(_existing(a.volume))
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = extract_body_envelope(vol, a.envelope_hu)
    bone = extract_bone(vol, env, a.bone_crop_z, a.bone_hu)
    write_mask(env, out / "envelope.mhd")
    write_mask(bone, out / "bone.mhd")
    print(f"envelope {env.count} voxels, bone {bone.count} voxels -> {out}")


def cmd_mesh(a):
    mask = read_mask(_existing(a.mask), a.label)
    m = condition(mask, a.taubin_lambda, a.taubin_mu, a.taubin_iterations, a.target_faces or None)
    write_ply(m, a.out)
    print(f"{m.label}: {m.n_vertices} vertices, {m.n_faces} faces -> {a.out}")


def cmd_correspond(a):
    est = BaselineEstimator(a.null_threshold, a.mutual_factor)
    sets = []
    for src, tgt in a.pair:
        s = read_ply(_existing(src))
        t = read_ply(_existing(tgt))
        sets.append(est(s, t))
    write_correspondences(sets, a.out)
    for cs in sets:
        print(f"{cs.source_structure}: {len(cs)} pairs, {cs.n_null} null")


def cmd_tps_fit(a):
    sets = read_many(_existing(p) for p in a.correspondences)
    cps = gather_control_points(sets, a.min_spacing)
    if a.max_controls and len(cps) > a.max_controls:
        cps = subsample_controls(cps, a.max_controls, a.min_spacing)
    if a.controls_out:
        pipeline.write_control_points(cps, a.controls_out)
    model = tps_fit(cps, a.lambda_tps)
    save_tps(model, a.out)
    print(f"fitted {model.n} control points (lambda {a.lambda_tps}) -> {a.out}")
    if a.grid:
        geometry, _, _ = read_metaimage_array(_existing(a.grid))
        fld = tps_field_on_grid(model, geometry, a.stride)
        write_field(fld, a.field)
        print(f"field on {geometry.dims} (stride {a.stride}) -> {a.field}")


def cmd_warp(a):
    fld = read_field(_existing(a.field))
    if a.mask:
        out = warp_mask(fld, read_mask(_existing(a.image)))
        write_mask(out, a.out)
    else:
        vol = read_metaimage(_existing(a.image))
        out = warp_volume_nearest(fld, vol) if a.nearest else warp_volume(fld, vol)
        write_metaimage(out, a.out)
    print(f"warped {a.image} -> {a.out}")


def _config(a):
    overrides = list(a.set or [])
    if a.output_dir:
        overrides.append(f"output_dir={json.dumps(str(Path(a.output_dir).resolve()))}")
    return pipeline.load_config(_existing(a.config), overrides)


def cmd_init(a):
    art = pipeline.run_initialise(_config(a))
    print(f"{len(art.controls)} control points -> {art.output_dir}")
    print(pipeline.format_timing({str(art.output_dir): art.timing}))


def cmd_register(a):
    art = pipeline.run_register(_config(a))
    print(pipeline.format_metrics(art.metrics))
    print(pipeline.format_timing({str(art.init.output_dir): art.timing}))


def cmd_evaluate(a):
    rep = pipeline.run_evaluate(_existing(a.results), _existing(a.baseline), a.pipeline, a.baseline_pipeline,
                                a.metric, a.alpha, a.workers)
    out = Path(a.out) if a.out else Path(a.results)
    rep.write(out)
    print(pipeline.format_evaluation(rep.as_dict()))


def cmd_report(a):
    print(pipeline.build_report(_existing(p) for p in a.paths))


def cmd_phantom(a):
    from .phantom import write_case

    cfg = write_case(a.out_dir, GridGeometry(a.dims, a.spacing), a.organs, a.max_displacement, a.seed, a.jitter)
    print(f"phantom case -> {cfg}")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpsreg", description="Structure-guided TPS registration initialisation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("segment", help="body envelope and bone masks from an HU volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--bone-hu", type=float, default=400.0)
    s.add_argument("--envelope-hu", type=float, default=-200.0)
    s.add_argument("--bone-crop-z", type=float, default=None, help="drop bone below this z (mm)")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("mesh", help="mask -> smoothed, decimated PLY surface")
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--label", default=None)
    s.add_argument("--taubin-lambda", type=float, default=0.5)
    s.add_argument("--taubin-mu", type=float, default=-0.53)
    s.add_argument("--taubin-iterations", type=int, default=10)
    s.add_argument("--target-faces", type=int, default=3000, help="0 disables decimation")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("correspond", help="baseline correspondences between moving and fixed meshes")
    s.add_argument("--pair", nargs=2, action="append", required=True, metavar=("MOVING_PLY", "FIXED_PLY"))
    s.add_argument("--out", required=True)
    s.add_argument("--null-threshold", type=float, default=20.0)
    s.add_argument("--mutual-factor", type=float, default=2.0)
    s.set_defaults(func=cmd_correspond)

    s = sub.add_parser("tps-fit", help="fit the TPS to correspondence CSVs, optionally evaluate a field")
    s.add_argument("--correspondences", nargs="+", required=True)
    s.add_argument("--out", required=True, help="binary model file")
    s.add_argument("--lambda", dest="lambda_tps", type=float, default=0.0)
    s.add_argument("--max-controls", type=int, default=0)
    s.add_argument("--min-spacing", type=float, default=1.0)
    s.add_argument("--controls-out", default=None)
    s.add_argument("--grid", default=None, help="MetaImage whose grid receives the field")
    s.add_argument("--field", default=None, help="output field (with --grid)")
    s.add_argument("--stride", type=int, default=4)
    s.set_defaults(func=cmd_tps_fit)

    s = sub.add_parser("warp", help="pull an image or mask through a displacement field")
    s.add_argument("--field", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mask", action="store_true", help="treat input as a mask (nearest neighbour)")
    s.add_argument("--nearest", action="store_true", help="nearest-neighbour for a scalar image")
    s.set_defaults(func=cmd_warp)

    for name, fn, text in (("init", cmd_init, "full initialisation from a config file"),
                           ("register", cmd_register, "initialisation, refinement and metrics")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--output-dir", default=None)
        s.set_defaults(func=fn)

    s = sub.add_parser("evaluate", help="paired signed-rank tests between two result directories")
    s.add_argument("--results", required=True)
    s.add_argument("--baseline", required=True)
    s.add_argument("--pipeline", default=None)
    s.add_argument("--baseline-pipeline", default=None)
    s.add_argument("--metric", default="mdta", choices=("mdta", "hausdorff", "dice"))
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default=None, help="directory for evaluation.json/csv (default: --results)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="summarise timing, metrics and evaluation files")
    s.add_argument("paths", nargs="+")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("phantom", help="write a synthetic phantom case with a known deformation")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--dims", type=lambda t: _triple(t, int), default=(64, 144, 240))
    s.add_argument("--spacing", type=_triple, default=(2.0, 2.0, 2.0))
    s.add_argument("--organs", type=int, default=4)
    s.add_argument("--max-displacement", type=float, default=15.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jitter", type=float, default=0.0)
    s.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failed: {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:
        print(f"stage failed: {args.command}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
