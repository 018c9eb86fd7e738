"""Command-line toolchain: phantoms, scan simulation, reconstruction,
calibration, evaluation, and slice export.

Every command that writes an artifact also writes `<out>.manifest.json`
recording the resolved configuration, seeds, and paths; `helixct replay
<manifest>` re-executes the run.  Exit codes: 0 success, 1 usage error,
2 numerical failure, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time

import numpy as np

import helixct
from helixct import metrics_io as mio
from helixct import operators as ops
from helixct import presets, recon, selfsup
from helixct.geometry import ScanGeometry
from helixct.phantom import (VolumeSpec, get_phantom, load_phantom,
                             standard_phantoms, voxelize)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the CLI contract wants 1
    def error(self, message):
        raise UsageError(message)


def _parse_triple(text, kind=float):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise UsageError(f"expected three comma-separated values, got {text!r}")
    return tuple(kind(p) for p in parts)


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _resolve_geometry(name_or_path) -> ScanGeometry:
    if name_or_path in presets.PRESETS:
        return presets.get_preset(name_or_path)[0]
    return ScanGeometry.from_json_dict(_load_json(name_or_path))


def _resolve_volume_spec(name_or_path) -> VolumeSpec:
    if name_or_path in presets.PRESETS:
        return presets.get_preset(name_or_path)[1]
    d = _load_json(name_or_path)
    return VolumeSpec(tuple(d["dims"]), float(d["voxel_pitch_mm"]),
                      tuple(d["origin_mm"]))


def _preset_gain(name_or_path):
    return presets.PRESET_GAINS.get(name_or_path)


def _write_manifest(out_path, command, args, elapsed_s, inputs, outputs):
    snapshot = {k: v for k, v in vars(args).items()
                if k not in ("func", "config") and not k.startswith("_")}
    manifest = {
        "tool": "helixct",
        "version": helixct.__version__,
        "command": command,
        "args": snapshot,
        "inputs": list(inputs),
        "outputs": list(outputs),
        "elapsed_s": elapsed_s,
    }
    blob = json.dumps(manifest, indent=1, sort_keys=True).encode()
    mio._write_atomic(str(out_path) + ".manifest.json", blob)


# --- subcommands ------------------------------------------------------------------

def cmd_phantom(args) -> int:
    t0 = time.time()
    if args.file:
        ph = load_phantom(args.file)
    elif args.name:
        try:
            ph = get_phantom(args.name)
        except KeyError:
            raise UsageError(f"unknown phantom {args.name!r}; available: "
                             + ", ".join(sorted(standard_phantoms())))
    else:
        raise UsageError("need --name or --file")
    dims = tuple(int(d) for d in _parse_triple(args.dims, float))
    if any(d <= 0 for d in dims):
        raise UsageError(f"bad dims {dims}")
    if args.origin_mm == "auto":
        origin = tuple(-(d - 1) / 2.0 * args.pitch_mm for d in dims)
    else:
        origin = _parse_triple(args.origin_mm)
    vol = voxelize(ph, dims, args.pitch_mm, origin, supersample=args.supersample)
    mio.write_volume(args.out, vol)
    _write_manifest(args.out, "phantom", args, time.time() - t0,
                    [args.file] if args.file else [], [args.out])
    return 0


def cmd_simulate(args) -> int:
    t0 = time.time()
    geometry = _resolve_geometry(args.geometry)
    if args.phantom_file:
        ph = load_phantom(args.phantom_file)
    elif args.phantom_name:
        try:
            ph = get_phantom(args.phantom_name)
        except KeyError:
            raise UsageError(f"unknown phantom {args.phantom_name!r}")
    else:
        raise UsageError("need --phantom-name or --phantom-file")
    sino = ops.analytic_sinogram(ph, geometry, supersample_uv=args.supersample_uv)
    i0_delivered = args.i0 * args.dose
    if args.noise_free:
        out_sino = ops.Sinogram(sino.data, ops.Space.LOG_ATTENUATION, geometry,
                                i0_photons=i0_delivered)
    else:
        dose = selfsup.DoseModel(args.i0, args.dose, args.seed)
        out_sino = selfsup.add_poisson_noise(sino, dose)
    mio.write_sinogram(args.out, out_sino)
    elapsed = time.time() - t0
    _write_manifest(args.out, "simulate", args, elapsed,
                    [args.phantom_file] if args.phantom_file else [], [args.out])
    print(f"elapsed_s={elapsed:.3f}")
    return 0


def cmd_wfbp(args) -> int:
    t0 = time.time()
    sino = mio.read_sinogram(args.sinogram)
    vspec = _resolve_volume_spec(args.volume_spec)
    geometry = sino.geometry
    cfg_dict = _load_json(args.recon_config) if args.recon_config else {}
    if args.params:
        taps, gain = mio.read_params(args.params)
        ramp = ops.RampFilter(taps)
    else:
        ramp = ops.ramp_init(geometry.detector_cols, geometry.pixel_pitch_u_mm)
        gain = _preset_gain(args.volume_spec)
    if args.gain is not None:
        gain = args.gain
    if "gain" in cfg_dict:
        gain = float(cfg_dict["gain"])
    if gain is None:
        raise UsageError("no gain available: pass --gain, --params, config, "
                         "or a preset volume spec")
    config = recon.WfbpConfig(ramp=ramp, gain=gain,
                              taper_q=float(cfg_dict.get("taper_q", ops.Q_TAPER_DEFAULT)),
                              use_mip=bool(cfg_dict.get("use_mip", True)))
    try:
        vol = recon.wfbp_reconstruct(sino, vspec, config)
    except recon.SpaceError as e:
        raise UsageError(str(e))
    mio.write_volume(args.out, vol)
    elapsed = time.time() - t0
    _write_manifest(args.out, "wfbp", args, elapsed, [args.sinogram], [args.out])
    print(f"elapsed_s={elapsed:.3f}")
    return 0


def cmd_irtv(args) -> int:
    t0 = time.time()
    sino = mio.read_sinogram(args.sinogram)
    vspec = _resolve_volume_spec(args.volume_spec)
    geometry = sino.geometry
    cfg_dict = _load_json(args.recon_config) if args.recon_config else {}
    gain = cfg_dict.get("gain", _preset_gain(args.volume_spec))
    if gain is None:
        raise UsageError("no gain available: pass config or a preset volume spec")
    defaults = presets.PRESET_IRTV.get(args.volume_spec, {})
    lr = float(cfg_dict.get("lr", args.lr if args.lr is not None
                            else defaults.get("lr", 1e-3)))
    tv = float(cfg_dict.get("tv_strength", args.tv_strength if args.tv_strength is not None
                            else defaults.get("tv_strength", 1.0)))
    n_updates = int(cfg_dict.get("n_updates", args.n_updates))
    ramp = ops.ramp_init(geometry.detector_cols, geometry.pixel_pitch_u_mm)
    wcfg = recon.WfbpConfig(ramp=ramp, gain=float(gain))
    icfg = recon.IrtvConfig(tv_strength=tv, n_updates=n_updates,
                            adam=recon.AdamConfig(lr=lr),
                            rng_seed=args.seed)
    try:
        vol, trace = recon.irtv_reconstruct(sino, vspec, wcfg, icfg)
    except recon.SpaceError as e:
        raise UsageError(str(e))
    mio.write_volume(args.out, vol)
    if args.trace_out:
        with open(args.trace_out, "w") as f:
            f.write("update,data_term,tv_term,total\n")
            for row in trace:
                f.write(f"{row[0]},{row[1]:.10e},{row[2]:.10e},{row[3]:.10e}\n")
    elapsed = time.time() - t0
    _write_manifest(args.out, "irtv", args, elapsed, [args.sinogram],
                    [args.out] + ([args.trace_out] if args.trace_out else []))
    print(f"elapsed_s={elapsed:.3f}")
    return 0


def cmd_calibrate(args) -> int:
    t0 = time.time()
    scan_paths = [p for p in args.scans.split(",") if p]
    if not scan_paths:
        raise UsageError("--scans needs at least one sinogram path")
    vspec = _resolve_volume_spec(args.volume_spec)
    sinos = [mio.read_sinogram(p) for p in scan_paths]
    geometry = sinos[0].geometry
    for p, s in zip(scan_paths[1:], sinos[1:]):
        if s.geometry != geometry:
            raise UsageError(f"scan {p} has a different geometry")
    i0_full = args.i0 if args.i0 is not None else (sinos[0].i0_photons or 1e5)
    scans = [selfsup.prepare_scan(s, vspec, i0_full=i0_full, dose_in=args.dose_in,
                                  dose_target=args.dose_target,
                                  clean_targets=args.clean_targets,
                                  noise_free=args.noise_free,
                                  rng_seed=args.seed + 1000 * k)
             for k, s in enumerate(sinos)]
    gain0 = args.init_gain if args.init_gain is not None else _preset_gain(args.volume_spec)
    if gain0 is None:
        raise UsageError("no initial gain: pass --init-gain or a preset volume spec")
    ramp = ops.ramp_init(geometry.detector_cols, geometry.pixel_pitch_u_mm)
    params = selfsup.LearnableParams(ramp.taps, gain0)
    if args.perturb_taps:
        params = params.perturbed_taps(args.perturb_taps, args.seed + 77)
    config = selfsup.TrainConfig(
        steps=args.steps, targets_per_step=args.targets_per_step,
        slab_voxels=args.slab_voxels, dose_in=args.dose_in,
        dose_target=args.dose_target, clean_targets=args.clean_targets,
        noise_free=args.noise_free, exclude_targets=not args.no_exclude,
        loss=selfsup.LossConfig(space=selfsup.LossSpace(args.loss)),
        augment=not args.no_augment,
        adam=recon.AdamConfig(lr=args.lr), tap_lr_scale=args.tap_lr_scale,
        gain_lr_scale=args.gain_lr_scale, rng_seed=args.seed,
        supersample_targets=args.supersample_targets)
    if args.steps == 0:
        trained, curve = params.ema_snapshot(), []
    else:
        trained, curve = selfsup.train_calibration(scans, geometry, params, config)
    mio.write_params(args.out_params, trained.taps, trained.gain,
                     extra={"steps": args.steps, "loss": args.loss,
                            "dose_in": args.dose_in, "dose_target": args.dose_target,
                            "seed": args.seed})
    if args.curve:
        with open(args.curve, "w") as f:
            f.write("step,loss\n")
            for step, loss in curve:
                f.write(f"{step},{loss:.10e}\n")
    elapsed = time.time() - t0
    _write_manifest(args.out_params, "calibrate", args, elapsed, scan_paths,
                    [args.out_params] + ([args.curve] if args.curve else []))
    print(f"elapsed_s={elapsed:.3f}")
    return 0


def _fmt_metric(x) -> str:
    if x == 0:
        return "0"
    if x == float("inf"):
        return "inf"
    return f"{x:.6g}"


def cmd_eval(args) -> int:
    vol = mio.read_volume(args.volume)
    ref = mio.read_volume(args.reference)
    spec = mio.HuSpec(window_hu=args.window_hu)
    try:
        rmse, psnr = mio.rmse_psnr(vol, ref, spec)
    except ValueError as e:
        raise UsageError(str(e))
    print(f"rmse_hu={_fmt_metric(rmse)} psnr_db={_fmt_metric(psnr)}")
    return 0


def cmd_slice(args) -> int:
    vol = mio.read_volume(args.volume)
    try:
        mio.export_slice(vol, args.axis, args.index, args.window, args.level,
                         args.out)
    except IndexError as e:
        raise UsageError(str(e))
    _write_manifest(args.out, "slice", args, 0.0, [args.volume], [args.out])
    return 0


def cmd_replay(args) -> int:
    manifest = _load_json(args.manifest)
    command = manifest["command"]
    if command not in _COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    func, _ = _COMMANDS[command]
    replay_args = argparse.Namespace(**manifest["args"])
    return func(replay_args)


# --- argument wiring --------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--threads", type=int, default=None,
                    help="cap worker threads for the compiled kernels")
    sp.add_argument("--config", default=None,
                    help="JSON file of flag defaults (explicit flags win)")


def build_parser() -> _Parser:
    parser = _Parser(prog="helixct",
                     description="helical cone-beam CT simulation and "
                                 "reconstruction toolkit")
    parser.add_argument("--version", action="version",
                        version=f"helixct {helixct.__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("phantom", help="voxelize a phantom to a volume file")
    p.add_argument("--name", default=None)
    p.add_argument("--file", default=None, help="phantom JSON file")
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--pitch-mm", type=float, default=2.0)
    p.add_argument("--origin-mm", default="auto")
    p.add_argument("--supersample", type=int, default=4)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="simulate a helical scan of a phantom")
    p.add_argument("--phantom-name", default=None)
    p.add_argument("--phantom-file", default=None)
    p.add_argument("--geometry", default="desk64",
                   help="preset name or geometry JSON file")
    p.add_argument("--dose", type=float, default=1.0)
    p.add_argument("--i0", type=float, default=1e5,
                   help="full-dose photons per unattenuated pixel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-free", action="store_true")
    p.add_argument("--supersample-uv", type=int, default=4, choices=(1, 4))
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("wfbp", help="weighted filtered backprojection")
    p.add_argument("--sinogram", required=True)
    p.add_argument("--volume-spec", default="desk64",
                   help="preset name or volume-spec JSON file")
    p.add_argument("--recon-config", default=None, help="JSON of wfbp settings")
    p.add_argument("--gain", type=float, default=None)
    p.add_argument("--params", default=None, help="trained parameter file")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_wfbp)

    p = sub.add_parser("irtv", help="TV-regularized iterative reconstruction")
    p.add_argument("--sinogram", required=True)
    p.add_argument("--volume-spec", default="desk64")
    p.add_argument("--recon-config", default=None, help="JSON of irtv settings")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--tv-strength", type=float, default=None)
    p.add_argument("--n-updates", type=int, default=210)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace-out", default=None, help="objective trace CSV")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_irtv)

    p = sub.add_parser("calibrate", help="self-supervised parameter calibration")
    p.add_argument("--scans", required=True,
                   help="comma-separated clean sinogram files")
    p.add_argument("--volume-spec", default="desk64")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--targets-per-step", type=int, default=12)
    p.add_argument("--slab-voxels", type=int, default=8)
    p.add_argument("--dose-in", type=float, default=0.1)
    p.add_argument("--dose-target", type=float, default=1.0)
    p.add_argument("--i0", type=float, default=None,
                   help="full-dose photons (default: sinogram sidecar)")
    p.add_argument("--no-exclude", action="store_true",
                   help="do not hold targets out of the input set")
    p.add_argument("--loss", choices=("photon", "log"), default="photon")
    p.add_argument("--clean-targets", action="store_true")
    p.add_argument("--noise-free", action="store_true")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--tap-lr-scale", type=float, default=3.0)
    p.add_argument("--gain-lr-scale", type=float, default=50.0)
    p.add_argument("--supersample-targets", type=int, default=4, choices=(1, 4),
                   help="subpixel rays per target pixel (1 disables the "
                        "validity-mask erosion; use on very thin slabs)")
    p.add_argument("--init-gain", type=float, default=None)
    p.add_argument("--perturb-taps", type=float, default=0.0,
                   help="relative tap perturbation applied to the init")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-params", required=True)
    p.add_argument("--curve", default=None, help="loss curve CSV")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="RMSE/PSNR between two volumes")
    p.add_argument("--volume", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--window-hu", type=float, default=2000.0)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("slice", help="export a windowed slice as 16-bit PGM")
    p.add_argument("--volume", required=True)
    p.add_argument("--axis", choices=("axial", "coronal", "sagittal"),
                   default="axial")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--window", type=float, default=2000.0)
    p.add_argument("--level", type=float, default=0.0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    _add_common(p)
    p.set_defaults(func=cmd_replay)

    parser.subcommands = dict(sub.choices)
    return parser


_COMMANDS = {
    "phantom": (cmd_phantom, None),
    "simulate": (cmd_simulate, None),
    "wfbp": (cmd_wfbp, None),
    "irtv": (cmd_irtv, None),
    "calibrate": (cmd_calibrate, None),
    "eval": (cmd_eval, None),
    "slice": (cmd_slice, None),
    "replay": (cmd_replay, None),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_help(sys.stderr)
            return 1
        if getattr(args, "config", None):
            defaults = _load_json(args.config)
            sub = parser.subcommands[args.command]
            valid = {a.dest for a in sub._actions}
            unknown = set(defaults) - valid
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            # defaults land on the subparser so explicit flags still win
            sub.set_defaults(**defaults)
            args = parser.parse_args(argv)
        if getattr(args, "threads", None):
            from helixct import _backend
            _backend.set_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (recon.DivergenceError, selfsup.CalibrationError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except mio.FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 3
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except json.JSONDecodeError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
