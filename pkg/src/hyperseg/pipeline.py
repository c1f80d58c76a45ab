"""Experiment specs, evaluation and run matrices shared by the CLI and tests."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bandselect import BandStrategy, select_bands
from .hypercube import DatasetManifest, LabelMask, load_manifest, save_mask
from .metrics import ConfusionMatrix, MetricReport, accumulate, compute, report_csv, report_row
from .models import BACKBONE_LABEL, DECODER_LABEL, Model, ModelSpec, build, predict
from .training import TrainConfig, TrainingConfigError, load_split, train


class ChannelMismatchError(TrainingConfigError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    id: str
    arch: str
    bands: str
    manifest: str
    out_dir: str
    train: TrainConfig = field(default_factory=TrainConfig)
    widths: tuple[int, ...] = ()
    depth: int = 3

    def to_dict(self) -> dict:
        return {
            "id": self.id, "arch": self.arch, "bands": self.bands, "manifest": self.manifest,
            "out_dir": self.out_dir, "train": self.train.to_dict(), "widths": list(self.widths), "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentSpec":
        def resolve(p):
            return str(base / p) if base is not None and not Path(p).is_absolute() else str(p)

        return cls(
            id=str(d["id"]), arch=d["arch"], bands=d.get("bands", "all"), manifest=resolve(d["manifest"]),
            out_dir=resolve(d.get("out_dir", d["id"])), train=TrainConfig.from_dict(d.get("train", {})),
            widths=tuple(d.get("widths", ())), depth=int(d.get("depth", 3)),
        )


@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    report: MetricReport
    predictions: list[tuple[str, np.ndarray]]


def evaluate(model: Model, manifest: DatasetManifest, bands: BandStrategy, split: str = "test",
             include_background: bool = False) -> Evaluation:
    indices = select_bands(manifest.grid, bands)
    if len(indices) != model.spec.in_channels:
        raise ChannelMismatchError(
            f"band strategy {bands} selects {len(indices)} bands but the checkpoint expects {model.spec.in_channels}"
        )
    samples = load_split(manifest, split, indices, model.params["head.weight"].dtype)
    if not samples:
        raise ValueError(f"manifest has no {split!r} entries")
    cm = ConfusionMatrix.empty(manifest.class_names)
    preds = []
    for x, y, entry in samples:
        pred = predict(model, x[0].transpose(1, 2, 0))
        cm = accumulate(cm, pred, y)
        preds.append((Path(entry.cube).stem, pred))
    return Evaluation(cm, compute(cm, include_background), preds)


def write_evaluation(ev: Evaluation, out_dir, experiment: str, bands: int, decoder: str) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "predictions").mkdir(parents=True, exist_ok=True)
    names = ev.confusion.class_names
    for stem, pred in ev.predictions:
        save_mask(LabelMask(pred, names), out_dir / "predictions" / f"{stem}_pred.png")
    (out_dir / "confusion.csv").write_text(ev.confusion.to_csv())
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(report_csv([report_row(experiment, bands, BACKBONE_LABEL, decoder, ev.report)]))
    return metrics_path


def run_experiment(exp: ExperimentSpec, include_background: bool = False) -> tuple[list[str], Evaluation]:
    """Train, checkpoint and evaluate one experiment; returns its report row."""
    manifest = load_manifest(exp.manifest)
    strategy = BandStrategy.parse(exp.bands)
    indices = select_bands(manifest.grid, strategy)
    spec = ModelSpec(exp.arch, len(indices), len(manifest.class_names), exp.widths, exp.depth)
    model = build(spec, exp.train.seed)
    result = train(model, manifest, strategy, exp.train, exp.out_dir, {"experiment": exp.id})
    ev = evaluate(result.model, manifest, strategy, "test", include_background)
    write_evaluation(ev, exp.out_dir, exp.id, len(indices), DECODER_LABEL[spec.arch])
    row = report_row(exp.id, len(indices), BACKBONE_LABEL, DECODER_LABEL[spec.arch], ev.report)
    return row, ev


def _run_for_pool(args):
    exp, include_background = args
    row, ev = run_experiment(exp, include_background)
    return row, ev.confusion


def run_matrix(experiments: list[ExperimentSpec], output_csv, include_background: bool = False,
               jobs: int = 1) -> dict[str, tuple[list[str], ConfusionMatrix]]:
    """Run every experiment and write one CSV row per experiment, ordered by id."""
    ids = [e.id for e in experiments]
    if len(set(ids)) != len(ids):
        raise ValueError(f"experiment ids must be unique, got {ids}")
    args = [(e, include_background) for e in experiments]
    if jobs > 1 and len(experiments) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_for_pool, args))
    else:
        outcomes = [_run_for_pool(a) for a in args]
    results = dict(zip(ids, outcomes))
    rows = [results[i][0] for i in sorted(results)]
    output_csv = Path(output_csv)
    output_csv.parent.mkdir(parents=True, exist_ok=True)
    output_csv.write_text(report_csv(rows))
    return results


def load_matrix_spec(path) -> tuple[list[ExperimentSpec], dict]:
    """Read a matrix document: ``{"defaults": {...}, "experiments": [{...}, ...]}``.

    Each experiment inherits keys from ``defaults`` (``train`` merges key by key).
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    defaults = doc.get("defaults", {})
    experiments = []
    for e in doc.get("experiments", []):
        merged = {**defaults, **e, "train": {**defaults.get("train", {}), **e.get("train", {})}}
        experiments.append(ExperimentSpec.from_dict(merged, path.parent))
    return experiments, {k: v for k, v in doc.items() if k != "experiments"}


def with_seed(exp: ExperimentSpec, seed: int) -> ExperimentSpec:
    return replace(exp, train=replace(exp.train, seed=seed))
