"""End-to-end runs: ingest, train, probe and summarize, plus sweeps over them."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import checkpoint, synth
from .config import ConfigError, RunConfig
from .contrastive import Encoder
from .evaluation import (DATASETS, SYNTH_DATASETS, DatasetSpec, EvalError, GroupSummary,
                         ProbeReport, SensitivityReport, evaluate_dataset, frozen_featurizer,
                         sensitivity_analysis, summarize_groups, write_groups_csv,
                         write_reports_csv)
from .ingest import FrameDirectorySource, GazeMode, GazeSource, IngestResult, StubSaliency, \
    VideoFileSource, Video, build_shards
from .shards import ReadStats, ShardManifest, read_shards
from .train import PairDataset, TrainResult, train, write_loss_csv, write_replay_log

log = logging.getLogger(__name__)

CONFIG_ECHO = "config.ini"
MANIFEST = "manifest.tsv"
CHECKPOINT = "checkpoint.fvck"
LOSS_CSV = "loss.csv"
REPLAY_LOG = "replay.log"
REPORTS_CSV = "reports.csv"
GROUPS_CSV = "groups.csv"
SENSITIVITY_CSV = "sensitivity.csv"
SWEEP_CSV = "sweep.csv"

SWEEP_AXES = {"crop": "crop", "delta_t": "delta_t", "gaze_mode": "gaze_mode"}


def prepare_run_dir(cfg: RunConfig, out_dir) -> Path:
    """Create the run directory and echo the resolved config into it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_ECHO)
    return out


# -- ingest ---------------------------------------------------------------------

def gaze_source(cfg: RunConfig) -> GazeSource:
    mode = cfg.gaze_source_mode()
    return GazeSource(mode, StubSaliency() if mode is GazeMode.PREDICTOR else None)


def open_videos(cfg: RunConfig) -> Iterable[Video]:
    if not cfg.data_dir:
        raise ConfigError("data_dir is not set")
    root = Path(cfg.data_dir)
    if not root.exists():
        raise ConfigError(f"data_dir {root} does not exist")
    if cfg.source == "video":
        paths = [root] if root.is_file() else sorted(
            p for p in root.iterdir() if p.suffix.lower() in (".mp4", ".avi", ".mov", ".mkv"))
        return VideoFileSource(paths, cfg.resolution, cfg.fps)
    return FrameDirectorySource(root, cfg.resolution)


def run_ingest(cfg: RunConfig, out_dir, videos: Iterable[Video] | None = None) -> IngestResult:
    out = Path(out_dir)
    res = build_shards(open_videos(cfg) if videos is None else videos, gaze_source(cfg),
                       cfg.crop_spec(), out, cfg.records_per_shard, cfg.workers, MANIFEST)
    log.info("ingest: %d clips, %d records, %d frames skipped",
             res.stats.clips, res.stats.records, res.stats.skipped)
    return res


def load_dataset(cfg: RunConfig, manifest: ShardManifest) -> PairDataset:
    stats = ReadStats()
    records = list(read_shards(manifest, stats))
    if stats.crc_mismatches or stats.truncated:
        log.warning("dropped %d corrupt and %d truncated records", stats.crc_mismatches, stats.truncated)
    return PairDataset(records, cfg.crop_spec())


# -- train ----------------------------------------------------------------------

def run_train(cfg: RunConfig, manifest: ShardManifest, out_dir, seed: int | None = None,
              progress: bool = False) -> TrainResult:
    out = Path(out_dir)
    ds = load_dataset(cfg, manifest)
    result = train(ds, cfg.train_config(seed), progress=progress)
    checkpoint.save(out / CHECKPOINT, result.encoder.config, result.state)
    write_loss_csv(result.history, out / LOSS_CSV)
    write_replay_log(result.seeds, out / REPLAY_LOG)
    return result


# -- evaluation sets ------------------------------------------------------------

SYNTH_BUILDERS = {
    "synth-category": synth.category_like,
    "synth-easy": synth.easy_like,
    "synth-fine": synth.fine_like,
    "synth-toybox": synth.toybox_like,
    "synth-coil": synth.coil_like,
    "synth-core50": synth.core50_like,
    "synth-scene": synth.scene_like,
}
INSTANCE_SETS = ("synth-core50", "synth-coil", "synth-toybox")


def load_scene(cfg: RunConfig) -> synth.SyntheticSceneSpec:
    """The scene spec written next to synthetic videos, or the default one."""
    if cfg.data_dir:
        p = Path(cfg.data_dir) / "scene.json"
        if p.exists():
            d = json.loads(p.read_text())
            d["object_radius"] = tuple(d["object_radius"])
            return synth.SyntheticSceneSpec(**d)
    return synth.SyntheticSceneSpec(frame_size=cfg.resolution)


def load_image_folder(root, spec: DatasetSpec) -> synth.ProbeData:
    """Images laid out as ``root/<split>/<class>/*`` or ``root/<class>/*``.

    With ``train``/``test`` subdirectories the split is taken from them. An
    optional ``backgrounds.csv`` (``file,background``) supplies background ids.
    Unreadable files become ``None`` so feature extraction can count them.
    """
    from PIL import Image

    root = Path(root)
    splits = [("train", True), ("test", False)] if (root / "train").is_dir() else [(".", None)]
    classes = sorted({c.name for s, _ in splits for c in (root / s).iterdir() if c.is_dir()})
    bg_table = {}
    if (root / "backgrounds.csv").exists():
        with open(root / "backgrounds.csv", newline="") as fh:
            bg_table = {row["file"]: int(row["background"]) for row in csv.DictReader(fh)}
    images, labels, split, bgs = [], [], [], []
    for s, is_train in splits:
        for ci, c in enumerate(classes):
            d = root / s / c
            if not d.is_dir():
                continue
            for p in sorted(d.iterdir()):
                try:
                    with Image.open(p) as im:
                        images.append(np.asarray(im.convert("RGB")))
                except (OSError, ValueError):
                    images.append(None)
                labels.append(ci)
                split.append(is_train)
                bgs.append(bg_table.get(str(p.relative_to(root)), -1))
    obj = np.empty(len(images), dtype=object)
    obj[:] = images
    return synth.ProbeData(spec.name, obj, np.array(labels),
                           np.array(bgs) if bg_table else None,
                           np.array(split, dtype=bool) if splits[0][1] is not None else None)


def eval_sets(cfg: RunConfig, names: Sequence[str]) -> list[tuple[DatasetSpec, synth.ProbeData]]:
    """Resolve dataset names: synthetic analogs by name, anything else as a folder path."""
    out = []
    world = None
    for name in names:
        if name in SYNTH_DATASETS:
            world = world or synth.World(load_scene(cfg))
            out.append((SYNTH_DATASETS[name], SYNTH_BUILDERS[name](world, seed=cfg.seed)))
            continue
        p = Path(name)
        if not p.is_dir():
            raise ConfigError(f"unknown dataset {name!r}")
        if p.name not in DATASETS:
            raise ConfigError(f"dataset folder {p.name!r} does not name a known dataset")
        spec = DATASETS[p.name]
        out.append((spec, load_image_folder(p, spec)))
    return out


def run_eval(cfg: RunConfig, featurize, sets, out_dir=None) -> tuple[list[ProbeReport], list[GroupSummary]]:
    settings = cfg.probe_settings()
    reports = [evaluate_dataset(featurize, spec, data, settings)[0] for spec, data in sets]
    summaries = summarize_groups(reports)
    if out_dir is not None:
        write_reports_csv(reports, Path(out_dir) / REPORTS_CSV)
        write_groups_csv(summaries, Path(out_dir) / GROUPS_CSV)
    return reports, summaries


def run_sensitivity(cfg: RunConfig, featurize, setting: str, data: synth.ProbeData | None = None,
                    world: synth.World | None = None) -> SensitivityReport:
    """Train a probe on the normal images, then score it on each removal variant."""
    if data is None:
        data = synth.sensitivity_like(world or synth.World(load_scene(cfg)), seed=cfg.seed)
    spec = DatasetSpec("synth-in9", SYNTH_DATASETS["synth-category"].group)
    _, probe = evaluate_dataset(featurize, spec, data, cfg.probe_settings())
    test = ~np.asarray(data.split, dtype=bool)
    variants = {k: v[test] for k, v in data.variants.items()}
    return sensitivity_analysis(featurize, probe, data.images[test], data.labels[test], variants,
                                cfg.input_size, setting)


# -- full runs and sweeps -------------------------------------------------------

@dataclass
class RunOutcome:
    reports: list[ProbeReport]
    summaries: list[GroupSummary]
    train: TrainResult | None = None

    def group_averages(self) -> dict[str, float]:
        return {s.group.value: s.average for s in self.summaries}


def run_pipeline(cfg: RunConfig, out_dir, datasets: Sequence[str] = INSTANCE_SETS,
                 videos: Callable[[], Iterable[Video]] | None = None, seed: int | None = None,
                 sets=None) -> RunOutcome:
    """ingest -> train -> probe -> summarize in one run directory."""
    out = prepare_run_dir(cfg, out_dir)
    res = run_ingest(cfg, out, videos() if videos else None)
    tr = run_train(cfg, res.manifest, out, seed)
    featurize = frozen_featurizer(tr.encoder, tr.state.theta_q)
    reports, summaries = run_eval(cfg, featurize, sets if sets is not None else eval_sets(cfg, datasets), out)
    return RunOutcome(reports, summaries, tr)


@dataclass
class SweepCell:
    value: str
    outcome: RunOutcome | None = None
    error: str = ""


@dataclass
class SweepResult:
    axis: str
    cells: list[SweepCell] = field(default_factory=list)

    def improvements(self) -> list[tuple[str, str, float]]:
        """(value, group, improvement over the first value); NaN marks failed cells."""
        base = self.cells[0].outcome.group_averages() if self.cells and self.cells[0].outcome else None
        rows = []
        groups = sorted(base) if base else []
        for cell in self.cells:
            avgs = cell.outcome.group_averages() if cell.outcome else {}
            if not groups:
                rows.append((cell.value, "", math.nan))
            for g in groups:
                if base is None or g not in avgs:
                    rows.append((cell.value, g, math.nan))
                else:
                    rows.append((cell.value, g, avgs[g] - base[g]))
        return rows

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "value", "group", "improvement"])
            for value, group, imp in self.improvements():
                w.writerow([self.axis, value, group, "failed" if math.isnan(imp) else f"{imp:.3f}"])


def sweep(cfg: RunConfig, axis: str, values: Sequence[str], out_dir,
          datasets: Sequence[str] = INSTANCE_SETS,
          videos: Callable[[], Iterable[Video]] | None = None) -> SweepResult:
    """One full run per value; the first value is the baseline.

    A failing cell is recorded and the sweep moves on.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sets = eval_sets(cfg, datasets)
    result = SweepResult(axis)
    for v in values:
        try:
            cell_cfg = cfg.with_strings({SWEEP_AXES[axis]: str(v)})
            outcome = run_pipeline(cell_cfg, out / f"{axis}={v}", videos=videos, sets=sets)
            result.cells.append(SweepCell(str(v), outcome))
        except (ConfigError, EvalError, ValueError, OSError) as exc:
            log.warning("sweep cell %s=%s failed: %s", axis, v, exc)
            result.cells.append(SweepCell(str(v), None, str(exc)))
    result.write(out / SWEEP_CSV)
    return result


def featurizer_from_checkpoint(path):
    config, state = checkpoint.load(path)
    return frozen_featurizer(Encoder(config), state.theta_q), config
