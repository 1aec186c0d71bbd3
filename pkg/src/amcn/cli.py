"""Batch command line: ``amcn <command> ...``.

Every command writes its outputs plus one ``key=value`` manifest, and exits
0 on success, 2 on usage errors, 3 on data or format errors and 4 on numeric
failures. Failures print a single ``amcn-error`` line to stderr and remove
whatever outputs the run had already written.
"""
from __future__ import annotations

import argparse
import dataclasses
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .evaluate import InsufficientDataError, METRIC_COLUMNS, degradation_rmse, evaluate_image, evaluate_stations
from .gda import NoStationsError, calibrate, write_residuals
from .grid import (GeoGrid, GridIOError, GridStack, ExtentError, make_coordinate_channels, read_grid,
                   read_stations, write_grid, write_stations)
from .model import AmcnConfig, ModelFormatError, downscale, load_model, model_bytes, save_model
from .preprocess import ANCILLARY_CHANNELS, DegenerateEdgeError, ZeroVarianceError, derive_indices
from .synth import RAW_BANDS, Scene, raw_fields, synth_scene
from .train import TrainConfig, build_training_set, new_model, train, write_history

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_SUFFIX = ".manifest"

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_MODEL_KEYS = {"base_channels", "rdb_layers", "rdb_growth", "n_levels", "kernel"}
_GRADCHECK_KEYS = {"base_channels", "rdb_layers", "rdb_growth", "n_levels", "scale_factor", "batch", "patch",
                   "seed", "tolerance", "max_elements", "per_param_min", "floor"}


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- plumbing

class Run:
    """Tracks declared outputs so a failed command can clean up after itself."""

    def __init__(self, command, args):
        self.command = command
        self.args = args
        self.outputs = []
        self.inputs = []
        self.config = {}
        self.seed = None
        self.t0 = time.perf_counter()

    def output(self, path):
        path = Path(path)
        self.outputs.append(path)
        return path

    def cleanup(self):
        for p in reversed(self.outputs):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()

    def write_manifest(self, path):
        path = self.output(path)
        lines = [f"command={self.command}", f"version={__version__}",
                 f"seed={'' if self.seed is None else self.seed}"]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        lines += [f"input={p}" for p in self.inputs]
        lines += [f"output={p}" for p in self.outputs[:-1]]
        lines.append(f"wall_time_s={time.perf_counter() - self.t0:.3f}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config_file(path):
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def merged_config(args, allowed):
    """Config file values overridden by any flag the user actually passed."""
    cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for key in allowed:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _check_grid(path, grid):
    back = read_grid(path)
    a = back.channels if isinstance(back, GridStack) else (back,)
    b = grid.channels if isinstance(grid, GridStack) else (grid,)
    if len(a) != len(b) or any(x.values.tobytes() != y.values.tobytes() for x, y in zip(a, b)):
        raise GridIOError(f"{path}: written grid does not read back identically")


def save_grid(run, grid, path):
    path = run.output(path)
    write_grid(grid, path)
    _check_grid(path, grid)
    return path


def scene_dirs(root):
    dirs = sorted(p for p in Path(root).iterdir() if p.is_dir() and (p / "hr.agrid").exists())
    if not dirs:
        raise FileNotFoundError(f"{root}: no scene directories found")
    return dirs


def load_scene(d):
    d = Path(d)
    anc = read_grid(d / "ancillary.agrid")
    if not isinstance(anc, GridStack):
        raise GridIOError(f"{d / 'ancillary.agrid'}: expected a multi-channel stack")
    return Scene(read_grid(d / "hr.agrid"), read_grid(d / "lr.agrid"), anc, read_stations(d / "stations.csv"))


# ---------------------------------------------------------------- commands

def cmd_synth(args, run):
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    run.seed = args.seed
    run.config = dict(rows=args.rows, cols=args.cols, scale=args.scale, scenes=args.scenes,
                      stations=args.stations)
    out = Path(args.out)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    if created:
        run.output(out)
    for i in range(args.scenes):
        seed = args.seed + i
        d = out / f"scene_{seed:06d}"
        d.mkdir(exist_ok=True)
        run.output(d)
        sc = synth_scene(seed, args.rows, args.cols, args.scale, n_stations=args.stations)
        _, bands, _ = raw_fields(seed, args.rows, args.cols)
        raw = GridStack.from_grids([sc.hr.with_values(bands[b], name=b) for b in RAW_BANDS], RAW_BANDS)
        save_grid(run, sc.hr, d / "hr.agrid")
        save_grid(run, sc.lr, d / "lr.agrid")
        save_grid(run, sc.ancillary, d / "ancillary.agrid")
        save_grid(run, raw, d / "raw.agrid")
        write_stations(sc.stations, run.output(d / "stations.csv"))
    run.write_manifest(out / "manifest.txt")


def cmd_preprocess(args, run):
    run.inputs.append(args.input)
    raw = read_grid(args.input)
    if not isinstance(raw, GridStack):
        raise GridIOError(f"{args.input}: expected a multi-channel raw band stack")
    missing = [b for b in RAW_BANDS if b not in raw.channel_names]
    if missing:
        raise GridIOError(f"{args.input}: missing bands {', '.join(missing)}")
    indices, edges = derive_indices(raw, n_bins=args.bins)
    lon, lat = make_coordinate_channels(raw.template)
    chans = {"lon": lon, "lat": lat, "dem": raw["dem"]}
    chans.update({n: indices[n] for n in indices.channel_names})
    stack = GridStack.from_grids([chans[n] for n in ANCILLARY_CHANNELS], ANCILLARY_CHANNELS)
    run.config = dict(bins=args.bins, wet_edge=f"{edges.wet_intercept!r},{edges.wet_slope!r}",
                      dry_edge=f"{edges.dry_intercept!r},{edges.dry_slope!r}")
    save_grid(run, stack, args.out)
    run.write_manifest(args.out + MANIFEST_SUFFIX)


def cmd_train(args, run):
    cfg = merged_config(args, _TRAIN_KEYS | _MODEL_KEYS)
    if args.no_gca:
        cfg["use_gca"] = False
    if args.no_mfca:
        cfg["use_mfca"] = False
    if args.no_degradation_loss:
        cfg["use_degradation_loss"] = False
    try:
        tc = TrainConfig.from_mapping(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    model_keys = {k: cfg[k] for k in _MODEL_KEYS if k in cfg}
    mc = None
    if model_keys:
        mc = AmcnConfig.from_mapping({"base_channels": 16, "rdb_growth": 8, **model_keys,
                                      "scale_factor": tc.scale})
    run.seed = tc.seed
    run.config = {**dataclasses.asdict(tc), **model_keys}
    dirs = scene_dirs(args.data)
    run.inputs.extend(str(d) for d in dirs)
    patches, stats = build_training_set([load_scene(d) for d in dirs], tc)
    model = new_model(stats, tc, mc)
    model, history = train(model, patches, tc)
    out = run.output(args.out_model)
    save_model(model, out)
    if load_model(out).config != model.config or model_bytes(load_model(out)) != model_bytes(model):
        raise ModelFormatError(f"{out}: model file does not read back identically")
    write_history(history, run.output(args.loss_csv or args.out_model + ".loss.csv"))
    run.write_manifest(args.out_model + MANIFEST_SUFFIX)


def cmd_downscale(args, run):
    run.inputs += [args.model, args.lr_precip, args.ancillary]
    model = load_model(args.model)
    lr = read_grid(args.lr_precip)
    anc = read_grid(args.ancillary)
    if not isinstance(lr, GeoGrid) or not isinstance(anc, GridStack):
        raise GridIOError("expected a single-channel precipitation grid and a multi-channel ancillary stack")
    if tuple(anc.channel_names) != ANCILLARY_CHANNELS:
        raise GridIOError(f"ancillary channels {anc.channel_names} are not {ANCILLARY_CHANNELS}")
    pred = downscale(model, lr, anc)
    if not np.all(np.isfinite(pred.values[~pred.mask])):
        raise NumericFailure("downscaled field contains non-finite values")
    run.config = dict(scale=model.config.scale_factor)
    save_grid(run, pred, args.out)
    run.write_manifest(args.out + MANIFEST_SUFFIX)


def cmd_calibrate(args, run):
    run.inputs += [args.input, args.stations]
    grid = read_grid(args.input)
    if not isinstance(grid, GeoGrid):
        raise GridIOError(f"{args.input}: expected a single-channel grid")
    result = calibrate(grid, read_stations(args.stations), args.power, args.max_neighbors)
    run.config = dict(power=args.power, max_neighbors=args.max_neighbors, skipped_stations=result.skipped,
                      used_stations=len(result.residuals))
    save_grid(run, result.calibrated, args.out)
    write_residuals(result.residuals, run.output(args.residuals or args.out + ".residuals.csv"))
    run.write_manifest(args.out + MANIFEST_SUFFIX)


def cmd_eval(args, run):
    if (args.truth is None) == (args.stations is None):
        raise UsageError("eval needs exactly one of --truth or --stations")
    run.inputs.append(args.pred)
    pred = read_grid(args.pred)
    if not isinstance(pred, GeoGrid):
        raise GridIOError(f"{args.pred}: expected a single-channel grid")
    if args.truth is not None:
        run.inputs.append(args.truth)
        kind, m = "image", evaluate_image(pred, read_grid(args.truth))
    else:
        run.inputs.append(args.stations)
        kind, m = "stations", evaluate_stations(pred, read_stations(args.stations))
    rows = [(kind, *(repr(float(v)) for v in m.row()[:3]), str(m.n))]
    if args.lr is not None:
        run.inputs.append(args.lr)
        rows.append(("degradation", "", "", repr(degradation_rmse(pred, read_grid(args.lr))), ""))
    out = run.output(args.out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(("kind",) + METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    run.write_manifest(args.out + MANIFEST_SUFFIX)


def cmd_gradcheck(args, run):
    from .verify import network_gradcheck, tiny_config
    cfg = merged_config(args, _GRADCHECK_KEYS)
    try:
        model_cfg = tiny_config(**{k: int(cfg[k]) for k in ("base_channels", "rdb_layers", "rdb_growth",
                                                            "n_levels", "scale_factor") if k in cfg})
        kwargs = dict(batch=int(cfg.get("batch", 2)), patch=int(cfg.get("patch", 16)),
                      seed=int(cfg.get("seed", 0)), tolerance=float(cfg.get("tolerance", 1e-4)),
                      max_elements=int(cfg.get("max_elements", 2000)),
                      per_param_min=int(cfg.get("per_param_min", 8)), floor=float(cfg.get("floor", 1e-6)))
    except ValueError as exc:
        raise UsageError(f"bad gradcheck config: {exc}") from exc
    run.seed = kwargs["seed"]
    run.config = {**dataclasses.asdict(model_cfg), **kwargs}
    report = network_gradcheck(model_cfg, **kwargs)
    text = "\n".join(report.lines()) + "\n"
    if args.out:
        run.output(args.out).write_text(text, encoding="utf-8")
        run.write_manifest(args.out + MANIFEST_SUFFIX)
    sys.stdout.write(text)
    if not report.passed:
        raise NumericFailure(f"gradcheck max relative error {report.max_rel_error:.3e} exceeds "
                             f"{report.tolerance:.1e}")


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="amcn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"amcn {__version__}")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS/OpenMP threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rows", type=int, default=64)
    s.add_argument("--cols", type=int, default=64)
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--scenes", type=int, default=1)
    s.add_argument("--stations", type=int, default=24)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="raw bands to the canonical ancillary stack")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=20, help="EVI bins for the TVDI edge fit")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model on a directory of scenes")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out-model", required=True)
    s.add_argument("--loss-csv")
    for name, kind in (("epochs", int), ("lr0", float), ("lr_halving_period", int), ("batch_size", int),
                       ("patch", int), ("stride", int), ("scale", int), ("seed", int), ("eps", float),
                       ("base_channels", int), ("rdb_layers", int), ("rdb_growth", int), ("n_levels", int)):
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    s.add_argument("--no-gca", action="store_true")
    s.add_argument("--no-mfca", action="store_true")
    s.add_argument("--no-degradation-loss", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("downscale", help="run a trained model on a coarse field")
    s.add_argument("--model", required=True)
    s.add_argument("--lr-precip", required=True)
    s.add_argument("--ancillary", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_downscale)

    s = sub.add_parser("calibrate", help="station residual correction")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--stations", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--residuals")
    s.add_argument("--power", type=float, default=2.0)
    s.add_argument("--max-neighbors", type=int, default=12)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("eval", help="metrics against a truth grid or stations")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth")
    s.add_argument("--stations")
    s.add_argument("--lr", help="coarse input; adds the degradation-consistency RMSE row")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full network")
    s.add_argument("--config")
    s.add_argument("--out")
    for name, kind in (("seed", int), ("tolerance", float), ("max_elements", int)):
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    s.set_defaults(func=cmd_gradcheck)
    return p


_DATA_ERRORS = (GridIOError, ModelFormatError, ExtentError, InsufficientDataError, NoStationsError,
                DegenerateEdgeError, ZeroVarianceError, OSError, ValueError, KeyError)
_NUMERIC_ERRORS = (NumericFailure, FloatingPointError)


def _fail(code, kind, message, stream):
    message = " ".join(str(message).split()).replace('"', "'")
    stream.write(f'amcn-error code={code} kind={kind} message="{message}"\n')
    return code


def main(argv=None, stderr=None):
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc, stderr)
    if args.threads < 1:
        return _fail(EXIT_USAGE, "usage", "--threads must be >= 1", stderr)
    run = Run(args.command, args)
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            args.func(args, run)
    except UsageError as exc:
        run.cleanup()
        return _fail(EXIT_USAGE, "usage", exc, stderr)
    except _NUMERIC_ERRORS as exc:
        run.cleanup()
        return _fail(EXIT_NUMERIC, type(exc).__name__, exc, stderr)
    except _DATA_ERRORS as exc:
        run.cleanup()
        return _fail(EXIT_DATA, type(exc).__name__, exc, stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
