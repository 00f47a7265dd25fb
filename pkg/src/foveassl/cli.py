"""Command-line entry point: ``foveassl <command> [--key value ...]``.

Exit codes: 0 success, 1 user error (bad config, flags or paths), 2 internal failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import pipeline, plotting, synth
from .config import SEED_ENV, ConfigError, RunConfig
from .evaluation import EvalError, write_sensitivity_csv
from .geometry import GazePoint, GeometryError, gaze_histogram
from .ingest import IngestError, load_gaze_csv
from .optim import Schedule, dump_schedule, scaled_lr
from .shards import ShardError, ShardManifest, read_shards

log = logging.getLogger("foveassl")

USER_ERRORS = (ConfigError, EvalError, GeometryError, ShardError, FileNotFoundError,
               NotADirectoryError, PermissionError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (sectioned key = value)")
    p.add_argument("--preset", choices=("paper", "desk"), default="paper",
                   help="defaults to start from before the config file and flags")
    g = p.add_argument_group("run config")
    for f in dataclasses.fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="VALUE",
                       default=argparse.SUPPRESS)


def resolve_config(args, environ=None) -> RunConfig:
    """Preset, then config file, then ``FVSS_SEED``, then explicit flags."""
    cfg = RunConfig.desk() if args.preset == "desk" else RunConfig()
    if args.config:
        cfg = RunConfig.read(args.config, base=cfg)
    cfg = cfg.with_env(environ)
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    if flags:
        cfg = cfg.with_strings(flags)
    return cfg


# -- commands -------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = resolve_config(args)
    out = pipeline.prepare_run_dir(cfg, cfg.out_dir)
    try:
        res = pipeline.run_ingest(cfg, out)
    except IngestError as exc:
        if isinstance(exc.__cause__, OSError):
            raise
        raise ConfigError(str(exc)) from exc
    s = res.stats
    print(f"{s.records} records in {len(res.manifest.shards)} shards; skipped {s.skipped} "
          f"(decode {s.decode_failures}, short clip {s.short_clip_frames}, "
          f"missing gaze {s.missing_gaze_frames})")
    print(out / pipeline.MANIFEST)
    return 0


def _manifest(cfg: RunConfig) -> ShardManifest:
    if not cfg.manifest:
        raise ConfigError("--manifest is required")
    return ShardManifest.read(cfg.manifest)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = _manifest(cfg)
    out = pipeline.prepare_run_dir(cfg, cfg.out_dir)
    result = pipeline.run_train(cfg, manifest, out, progress=True)
    plotting.plot_loss(out / pipeline.LOSS_CSV, out / "loss.png")
    h = result.history
    print(f"{len(h)} steps, final loss {h[-1].loss_value:.4f}" if h else "0 steps")
    print(out / pipeline.CHECKPOINT)
    return 0


def _datasets(text: str | None) -> list[str]:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ckpt = cfg.checkpoint or str(Path(cfg.out_dir) / pipeline.CHECKPOINT)
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint {ckpt} not found")
    featurize, enc_cfg = pipeline.featurizer_from_checkpoint(ckpt)
    if enc_cfg.input_size != cfg.input_size:
        cfg = cfg.replace(input_size=enc_cfg.input_size)
    out = pipeline.prepare_run_dir(cfg, cfg.out_dir)
    sets = pipeline.eval_sets(cfg, _datasets(args.datasets))
    reports, summaries = pipeline.run_eval(cfg, featurize, sets, out)
    for r in reports:
        print(f"{r.dataset:24s} {r.group.value:13s} top1 {r.top1:7.3f}")
    for s in summaries:
        print(f"{'group ' + s.group.value:38s} avg  {s.average:7.3f}")
    if args.sensitivity:
        rep = pipeline.run_sensitivity(cfg, featurize, args.setting or Path(ckpt).stem)
        write_sensitivity_csv([rep], out / pipeline.SENSITIVITY_CSV)
        plotting.plot_sensitivity(out / pipeline.SENSITIVITY_CSV, out / "sensitivity.png")
        print(f"sensitivity: delta_bg {rep.delta_background:.3f} delta_obj {rep.delta_object:.3f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    values = _datasets(args.values)
    out = pipeline.prepare_run_dir(cfg, cfg.out_dir)
    result = pipeline.sweep(cfg, args.axis, values, out, _datasets(args.datasets))
    if any(c.outcome for c in result.cells):
        plotting.plot_sweep(out / pipeline.SWEEP_CSV, out / "sweep.png")
    for value, group, imp in result.improvements():
        print(f"{args.axis}={value:8s} {group:13s} {imp:+.3f}")
    failed = [c for c in result.cells if c.outcome is None]
    for c in failed:
        print(f"{args.axis}={c.value} failed: {c.error}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    values = {}
    for f in dataclasses.fields(synth.SyntheticSceneSpec):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if SEED_ENV in os.environ and args.seed is None:
        values["seed"] = int(os.environ[SEED_ENV])
    try:
        spec = synth.SyntheticSceneSpec(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dirs = synth.write_world(spec, args.out_dir)
    print(f"{len(dirs)} videos written to {args.out_dir}")
    return 0


def cmd_schedule_dump(args) -> int:
    cfg = resolve_config(args)
    if cfg.steps < 1:
        raise ConfigError("--steps must be at least 1")
    sched = Schedule.create(scaled_lr(cfg.base_lr, cfg.batch_size), cfg.steps, cfg.warmup_fraction)
    out = pipeline.prepare_run_dir(cfg, cfg.out_dir)
    dump_schedule(sched, out / "schedule.csv")
    plotting.plot_schedule(out / "schedule.csv", out / "schedule.png")
    print(f"peak lr {sched.peak_lr:g}, warmup {sched.warmup_steps} of {sched.total_steps} steps")
    return 0


def _gaze_resolution(args, cfg: RunConfig) -> int:
    """Frame size of the gaze data: explicit flag, else what the data says, else the config."""
    if hasattr(args, "cfg_resolution"):
        return cfg.resolution
    if cfg.manifest:
        echo = Path(cfg.manifest).parent / pipeline.CONFIG_ECHO
        if echo.exists():
            return RunConfig.read(echo).resolution
    elif cfg.data_dir and (Path(cfg.data_dir) / "scene.json").exists():
        return pipeline.load_scene(cfg).frame_size
    return cfg.resolution


def cmd_gaze_heatmap(args) -> int:
    cfg = resolve_config(args)
    if cfg.manifest:
        gazes = [GazePoint(r.gaze_x, r.gaze_y) for r in read_shards(ShardManifest.read(cfg.manifest))]
    elif cfg.data_dir:
        root = Path(cfg.data_dir)
        files = sorted(root.glob("*/gaze.csv")) or sorted(root.glob("gaze.csv"))
        if not files:
            raise ConfigError(f"no gaze.csv files under {root}")
        gazes = [g for f in files for g in load_gaze_csv(f).values()]
    else:
        raise ConfigError("give --manifest or --data-dir")
    hist = gaze_histogram(gazes, args.bin_size, _gaze_resolution(args, cfg))
    out = pipeline.prepare_run_dir(cfg, cfg.out_dir)
    hist.to_csv(out / "gaze_histogram.csv")
    plotting.plot_gaze_heatmap(hist, out / "gaze_heatmap.png")
    off = hist.offset
    where = f"({off[0]:.2f}, {off[1]:.2f})" if off else "n/a"
    print(f"{hist.total} gaze points; mean offset from centre {where}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="foveassl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            _add_config_flags(sp)
        sp.set_defaults(func=func)
        return sp

    add("ingest", cmd_ingest, "build gaze-cropped shards from frame directories or videos")
    add("train", cmd_train, "train an encoder on a shard manifest")
    sp = add("eval", cmd_eval, "linear-probe a checkpoint on evaluation datasets")
    sp.add_argument("--datasets", default="", help="comma-separated names or folders")
    sp.add_argument("--sensitivity", action="store_true", help="also run the background/object test")
    sp.add_argument("--setting", default="", help="label for the sensitivity row")
    sp = add("sweep", cmd_sweep, "one full run per value of crop, delta_t or gaze_mode")
    sp.add_argument("--axis", required=True, choices=sorted(pipeline.SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated; the first is the baseline")
    sp.add_argument("--datasets", default=",".join(pipeline.INSTANCE_SETS))
    sp = add("synth", cmd_synth, "write synthetic egocentric videos with ground truth", config=False)
    sp.add_argument("--out-dir", required=True)
    for f in dataclasses.fields(synth.SyntheticSceneSpec):
        if f.type in ("int", "float", int, float):
            sp.add_argument("--" + f.name.replace("_", "-"), dest=f.name,
                            type=int if f.type in ("int", int) else float, default=None)
    add("schedule-dump", cmd_schedule_dump, "write the learning-rate schedule as CSV")
    sp = add("gaze-heatmap", cmd_gaze_heatmap, "histogram gaze positions from shards or gaze.csv files")
    sp.add_argument("--bin-size", type=int, default=27)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"foveassl: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"foveassl: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"foveassl: internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
