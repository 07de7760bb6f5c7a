"""Command line entry point: ``satmpi <command> ...``.

Exit status is 0 on success, 1 for invalid input or usage, 2 when a
computation fails.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .errors import ComputationError, SatMpiError, ValidationError
from .fit import FitConfig, fit, scene_config
from .io import (dsm_from_altitude, ensure_dir, load_manifest, load_scene, read_dsm, read_pfm,
                 read_points_csv, write_dsm, write_pfm, write_points_csv, write_preview)
from .mpi import load_mpi, save_mpi
from .objective import LossWeights, format_report, mae, me, psnr, report_json, ssim
from .render import render_view
from .rpc import read_rpc
from .synth import fixture_spec, make_scene
from .warp import warp_src_to_tgt

log = logging.getLogger("satmpi")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage problems are validation errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_render(out, render, prefix=""):
    write_pfm(out / f"{prefix}rgb.pfm", render.rgb)
    write_preview(out / f"{prefix}rgb.ppm", render.rgb)
    write_pfm(out / f"{prefix}altitude.pfm", render.altitude)
    if render.pan is not None:
        write_pfm(out / f"{prefix}pan.pfm", render.pan)


def cmd_rpc(args):
    rpc = read_rpc(args.rpc)
    if args.action == "project":
        lat, lon, hei = read_points_csv(args.input, ("lat", "lon", "hei"))
        samp, line = rpc.project(lat, lon, hei)
        write_points_csv(args.output, ("samp", "line"), (samp, line))
    else:
        samp, line, hei = read_points_csv(args.input, ("samp", "line", "hei"))
        lat, lon = rpc.localize(samp, line, hei)
        write_points_csv(args.output, ("lat", "lon", "hei"), (lat, lon, hei))
    return 0


def cmd_render(args):
    m = load_manifest(args.manifest)
    mpi = load_mpi(args.mpi)
    rpc = read_rpc(args.rpc or m.path(m.source_rpc))
    out = ensure_dir(args.out)
    _write_render(out, render_view(mpi, rpc, m.geo_ref))
    return 0


def cmd_warp(args):
    m = load_manifest(args.manifest)
    mpi = load_mpi(args.mpi)
    size = tuple(args.size) if args.size else None
    _, render = warp_src_to_tgt(mpi, read_rpc(m.path(m.source_rpc)), read_rpc(args.rpc),
                                m.geo_ref, size)
    out = ensure_dir(args.out)
    _write_render(out, render)
    return 0


def _fit_config(args):
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"config {args.config}: {e.msg} (line {e.lineno})") from None
        known = {f.name for f in fields(FitConfig)}
        unknown = set(base) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "weights" in base:
            base["weights"] = LossWeights(**base["weights"])
    for key in ("iterations", "learning_rate", "optimizer"):
        if getattr(args, key) is not None:
            base[key] = getattr(args, key)
    if args.seed is not None:
        base["seed"] = args.seed
    return scene_config(**base) if args.preset == "scene" else FitConfig(**base)


def cmd_fit(args):
    config = _fit_config(args)
    scene = load_scene(args.manifest)
    trace = fit(scene, config)
    out = ensure_dir(args.out)
    save_mpi(trace.mpi, out / "mpi.bin")
    _write_render(out, trace.render)
    trace.write_csv(out / "trace.csv", config.log_every)
    cfg = asdict(config)
    (out / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    if scene.truth_dsm is not None:
        write_dsm(out / "dsm.bin", dsm_from_altitude(trace.render, scene.rpc, scene.truth_dsm[1]),
                  scene.truth_dsm[1])
    log.info("fit done in %.1f s, final total %.6f", trace.wall_time, trace.history[-1].total)
    return 0


def cmd_eval(args):
    metrics = {}
    if args.pred_rgb or args.truth_rgb:
        if not (args.pred_rgb and args.truth_rgb):
            raise UsageError("--pred-rgb and --truth-rgb go together")
        a, b = read_pfm(args.pred_rgb), read_pfm(args.truth_rgb)
        metrics["psnr"] = psnr(a, b)
        metrics["ssim"] = ssim(a, b)
    if args.pred_dsm or args.truth_dsm:
        if not (args.pred_dsm and args.truth_dsm):
            raise UsageError("--pred-dsm and --truth-dsm go together")
        (pa, _), (pb, _) = read_dsm(args.pred_dsm), read_dsm(args.truth_dsm)
        mask = pa.mask & pb.mask
        metrics["mae"] = mae(pa.values, pb.values, mask)
        metrics["me"] = me(pa.values, pb.values, mask)
    if not metrics:
        raise UsageError("nothing to evaluate")
    sys.stdout.write(report_json(metrics) + "\n" if args.json else format_report(metrics))
    return 0


def cmd_synth(args):
    spec = fixture_spec(args.kind, size=tuple(args.size), n_targets=args.targets, slope=args.slope)
    make_scene(spec, args.out, lr_factor=args.lr_factor)
    return 0


def build_parser():
    p = _Parser(prog="satmpi", description="Satellite multiplane-image rendering and fitting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for bitwise-repeatable runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("rpc", help="project or localize CSV point batches")
    s.add_argument("action", choices=("project", "localize"))
    s.add_argument("rpc")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_rpc)

    s = sub.add_parser("render", help="render an MPI in the source view (or --rpc)")
    s.add_argument("manifest")
    s.add_argument("--mpi", required=True)
    s.add_argument("--rpc")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("warp", help="warp a source MPI into a target view and render it")
    s.add_argument("manifest")
    s.add_argument("--mpi", required=True)
    s.add_argument("--rpc", required=True, help="target camera")
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("fit", help="fit an MPI to a scene manifest")
    s.add_argument("manifest")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--config", help="JSON file with FitConfig fields")
    s.add_argument("--preset", choices=("default", "scene"), default="scene")
    s.add_argument("--iterations", type=int)
    s.add_argument("--learning-rate", dest="learning_rate", type=float)
    s.add_argument("--optimizer", choices=("gd", "adam"))
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="PSNR/SSIM of images, MAE/ME of DSMs")
    s.add_argument("--pred-rgb")
    s.add_argument("--truth-rgb")
    s.add_argument("--pred-dsm")
    s.add_argument("--truth-dsm")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic stereo scene")
    s.add_argument("kind", choices=("flat", "ramp", "hill"))
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    s.add_argument("--targets", type=int, default=4, choices=range(0, 5))
    s.add_argument("--slope", type=float, default=0.3)
    s.add_argument("--lr-factor", type=int, default=4)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = 1 if args.deterministic else args.threads
    if threads is not None and threads < 1:
        print("satmpi: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except ValidationError as e:
        print(f"satmpi: invalid input: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"satmpi: {e}", file=sys.stderr)
        return 1
    except (ComputationError, SatMpiError) as e:
        print(f"satmpi: computation failed: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"satmpi: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
