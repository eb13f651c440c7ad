"""End-to-end experiment stages: data, DDPM, mixup outliers, classifier, evaluation, report."""

from __future__ import annotations

import csv
import glob
import hashlib
import json
import logging
import os
import time
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import ExperimentConfig, class_pairs
from .datagen import (LabeledDataset, circle_means, gaussian_mixture_id, gaussian_noise_ood,
                      held_out_cluster_ood, inflated_bounds, read_csv, train_val_split,
                      uniform_noise_ood, write_csv)
from .diffusion import (Denoiser, DenoiserConfig, DiffusionSchedule, TrainedDenoiser, make_schedule,
                        mixup_dataset, train_denoiser)
from .evaluation import (EvalRecord, EvalReport, aupr, auroc, closed_set_accuracy, read_report_csv,
                         roc_curve, threshold_at_tpr, write_report_csv, write_roc_csv)
from .losses import KINDS, MetricHead
from .nn import ConfigError, Mlp, Rng, load_checkpoint, save_checkpoint
from .scores import compute_scores, default_score, fit_gaussian_stats
from .training import TrainConfig, TrainedClassifier, train_classifier

log = logging.getLogger(__name__)

OOD_SUITES = ("gaussian_noise", "uniform_noise", "held_out_cluster")

# fixed sub-stream per stage so stages can be re-run independently
STREAM_DATA, STREAM_DDPM, STREAM_GEN, STREAM_TRAIN = 0, 1, 2, 3


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class Benchmark:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    ood_sets: dict


def build_benchmark(cfg: ExperimentConfig) -> Benchmark:
    """Gaussian-mixture ID classes on a circle plus the three synthetic OOD suites."""
    d = cfg.data
    rng = Rng(cfg.seed).split(STREAM_DATA)
    means = circle_means(d.n_classes, d.radius, d.dims)
    full = gaussian_mixture_id(d.n_classes, means, d.sigma, d.n_per_class, rng.split(0), "id")
    train, val = train_val_split(full, d.val_fraction, rng.split(1))
    test = gaussian_mixture_id(d.n_classes, means, d.sigma, d.n_test_per_class, rng.split(2), "id_test")
    centre = means.mean(axis=0)
    angle = np.pi / d.n_classes
    far = np.zeros(d.dims)
    far[:2] = d.holdout_radius * np.cos(angle), d.holdout_radius * np.sin(angle)
    ood = {
        "gaussian_noise": gaussian_noise_ood(centre, d.gaussian_sigma, d.n_ood, rng.split(3)),
        "uniform_noise": uniform_noise_ood(inflated_bounds(full.features, d.uniform_inflate),
                                           d.n_ood, rng.split(4)),
        "held_out_cluster": held_out_cluster_ood(far, d.sigma, d.n_ood, rng.split(5), id_means=means),
    }
    return Benchmark(LabeledDataset(train.features, train.labels, "id_train"),
                     LabeledDataset(val.features, val.labels, "id_val"), test, ood)


def write_benchmark(bench: Benchmark, directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for ds in (bench.train, bench.val, bench.test):
        paths.append(os.path.join(directory, f"{ds.name}.csv"))
        write_csv(ds, paths[-1])
    for name, ds in bench.ood_sets.items():
        paths.append(os.path.join(directory, f"ood_{name}.csv"))
        write_csv(ds, paths[-1])
    return paths


def _need(path):
    if not os.path.exists(path):
        raise MissingArtifact(f"{path} not found")
    return path


def read_benchmark(directory) -> Benchmark:
    train = read_csv(_need(os.path.join(directory, "id_train.csv")), "id_train")
    val = read_csv(_need(os.path.join(directory, "id_val.csv")), "id_val")
    test = read_csv(_need(os.path.join(directory, "id_test.csv")), "id_test")
    ood = {}
    for path in sorted(glob.glob(os.path.join(directory, "ood_*.csv"))):
        name = os.path.basename(path)[4:-4]
        ood[name] = read_csv(path, name)
    return Benchmark(train, val, test, ood)


# --- diffusion -------------------------------------------------------------

def schedule_from(cfg: ExperimentConfig) -> DiffusionSchedule:
    return make_schedule(cfg.ddpm.T, cfg.ddpm.beta_start, cfg.ddpm.beta_end)


def fit_ddpm(cfg: ExperimentConfig, train: LabeledDataset) -> TrainedDenoiser:
    dc = DenoiserConfig(hidden=tuple(cfg.ddpm.hidden), steps=cfg.ddpm.steps, batch=cfg.ddpm.batch,
                        lr=cfg.ddpm.lr)
    return train_denoiser(train, schedule_from(cfg), dc, Rng(cfg.seed).split(STREAM_DDPM),
                          n_classes=cfg.data.n_classes)


def save_denoiser(path, den: Denoiser, schedule: DiffusionSchedule, cfg: ExperimentConfig) -> None:
    meta = {"kind": "ddpm", "n_classes": den.n_classes, "data_dim": den.data_dim, "T": den.T,
            "beta_start": cfg.ddpm.beta_start, "beta_end": cfg.ddpm.beta_end}
    save_checkpoint(path, den.net, {"shift": den.shift, "scale": den.scale}, meta)


def load_denoiser(path) -> tuple[Denoiser, DiffusionSchedule]:
    net, extras, meta = load_checkpoint(_need(path))
    if meta.get("kind") != "ddpm":
        raise ConfigError(f"{path} is not a denoiser checkpoint")
    den = Denoiser(net, meta["n_classes"], meta["data_dim"], meta["T"], extras["shift"], extras["scale"])
    return den, make_schedule(meta["T"], meta["beta_start"], meta["beta_end"])


def n_outliers(cfg: ExperimentConfig, n_train: int) -> int:
    return cfg.oe.n_ood or max(1, n_train // 4)


def generate_ood(cfg: ExperimentConfig, den: Denoiser, schedule: DiffusionSchedule, n: int,
                 pairs=None) -> LabeledDataset:
    pairs = pairs if pairs is not None else class_pairs(cfg)
    return mixup_dataset(den, schedule, n, Rng(cfg.seed).split(STREAM_GEN), pairs,
                         cfg.oe.mixup_weight)


# --- classifier ------------------------------------------------------------

def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(hidden=tuple(cfg.model.hidden), feature_dim=cfg.model.feature_dim,
                       epochs=cfg.train.epochs, batch=cfg.train.batch, lr=cfg.train.lr,
                       momentum=cfg.train.momentum, oe_lambda=cfg.oe.lam)


def fit_classifier(cfg: ExperimentConfig, train: LabeledDataset, ood: LabeledDataset | None = None
                   ) -> TrainedClassifier:
    if cfg.oe.enabled and ood is None:
        raise MissingArtifact("oe.enabled is set but no outlier set was given")
    return train_classifier(train, cfg.loss.kind, train_config(cfg), Rng(cfg.seed).split(STREAM_TRAIN),
                            ood=ood if cfg.oe.enabled else None, m=cfg.loss.m, s=cfg.loss.s,
                            s_learnable=cfg.loss.s_learnable, n_classes=cfg.data.n_classes)


def save_classifier(path, model: Mlp, head: MetricHead, oe: bool, seed: int) -> None:
    meta = {"kind": "classifier", "head_kind": head.kind, "m": head.m, "s": head.s,
            "s_learnable": head.s_learnable, "oe": oe, "seed": seed}
    save_checkpoint(path, model, {"head.W": head.W, "head.b": head.b}, meta)


def load_classifier(path):
    """Returns (model, head, meta)."""
    model, extras, meta = load_checkpoint(_need(path))
    if meta.get("kind") != "classifier":
        raise ConfigError(f"{path} is not a classifier checkpoint")
    head = MetricHead(meta["head_kind"], extras["head.W"], extras["head.b"], meta["s"], meta["m"],
                      meta["s_learnable"])
    return model, head, meta


def write_curve(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for epoch, loss in history:
            w.writerow([epoch, f"{loss:.12g}"])


# --- evaluation ------------------------------------------------------------

def evaluate(cfg: ExperimentConfig, model: Mlp, head: MetricHead, bench: Benchmark, oe: bool,
             out_dir=None, score_kinds=None) -> EvalReport:
    """One record per (OOD set, score kind). With ``out_dir`` also writes
    report.csv and one ROC csv per record."""
    if model.input_dim != bench.test.dim:
        raise ConfigError(f"checkpoint expects {model.input_dim}-d inputs, data are {bench.test.dim}-d")
    if not bench.ood_sets:
        raise MissingArtifact("no OOD sets to evaluate")
    score_kinds = tuple(score_kinds or cfg.eval.scores)
    z_train, z_val, z_test = model(bench.train.features), model(bench.val.features), model(bench.test.features)
    stats = fit_gaussian_stats(z_train, bench.train.labels) if "mahalanobis" in score_kinds else None
    acc = closed_set_accuracy(model, head, bench.test)
    records = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for kind in score_kinds:
        def score(z):
            return compute_scores(kind, z, head, stats, cfg.eval.temperature)
        s_val, s_id = score(z_val), score(z_test)
        tau = threshold_at_tpr(s_val, cfg.eval.tpr)
        tpr_val = float(np.mean(s_val >= tau))
        for name, ds in bench.ood_sets.items():
            s_ood = score(model(ds.features))
            records.append(EvalRecord(name, head.kind, kind, oe, cfg.seed, auroc(s_id, s_ood),
                                      aupr(s_id, s_ood, "ID"), aupr(s_id, s_ood, "OOD"), tau,
                                      tpr_val, acc))
            if out_dir:
                write_roc_csv(*roc_curve(s_id, s_ood), os.path.join(out_dir, f"roc_{name}_{kind}.csv"))
    report = EvalReport(records)
    if out_dir:
        write_report_csv(report, os.path.join(out_dir, "report.csv"))
    return report


# --- aggregation -----------------------------------------------------------

def find_reports(results_dir) -> list[str]:
    return sorted(glob.glob(os.path.join(results_dir, "**", "report.csv"), recursive=True))


def aggregate(reports: list[EvalReport]):
    """Average over seeds and pair baseline with OE runs.

    Returns (rows, complete) where each row holds the baseline and OE metric
    triples and their OE-minus-baseline deltas for one (ood_set, loss, score).
    """
    groups = defaultdict(list)
    for rep in reports:
        for r in rep.records:
            groups[(r.ood_set, r.loss_kind, r.score_kind, r.oe)].append(r)
    keys = sorted({k[:3] for k in groups})
    rows, complete = [], True
    metrics = ("auroc", "aupr_in", "aupr_out", "closed_set_accuracy")
    for key in keys:
        row = {"ood_set": key[0], "loss_kind": key[1], "score_kind": key[2]}
        for oe, tag in ((False, "base"), (True, "oe")):
            recs = groups.get(key + (oe,), [])
            row[f"n_{tag}"] = len(recs)
            for m in metrics:
                row[f"{m}_{tag}"] = float(np.mean([getattr(r, m) for r in recs])) if recs else None
        ok = row["n_base"] > 0 and row["n_oe"] > 0
        complete &= ok
        row["status"] = "complete" if ok else "incomplete"
        for m in metrics:
            row[f"delta_{m}"] = row[f"{m}_oe"] - row[f"{m}_base"] if ok else None
        rows.append(row)
    return rows, complete


AGG_FIELDS = (["ood_set", "loss_kind", "score_kind", "n_base", "n_oe"]
              + [f"{m}_{t}" for t in ("base", "oe") for m in ("auroc", "aupr_in", "aupr_out", "closed_set_accuracy")]
              + [f"delta_{m}" for m in ("auroc", "aupr_in", "aupr_out", "closed_set_accuracy")] + ["status"])


def _cell(v):
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))


def write_aggregate(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_FIELDS)
        for row in rows:
            w.writerow([_cell(row[f]) for f in AGG_FIELDS])


def write_table(rows, path) -> None:
    """Rows = OOD sets, columns = loss kinds, cells = AUROC/AUPR-In/AUPR-Out, in
    three blocks (without OE, with OE, difference); uses each head's detection score."""
    primary = {k: ("msp" if k == "softmax" else "maxcos") for k in KINDS}
    by = {(r["ood_set"], r["loss_kind"]): r for r in rows if r["score_kind"] == primary.get(r["loss_kind"])}
    losses = [k for k in KINDS if any(key[1] == k for key in by)]
    sets = sorted({key[0] for key in by})

    def triple(r, tag):
        vals = [r.get(f"{m}_{tag}") for m in ("auroc", "aupr_in", "aupr_out")]
        return "" if any(v is None for v in vals) else "/".join(f"{round(v, 3) + 0.0:+.3f}" if tag.startswith("delta") else f"{v:.3f}" for v in vals)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "ood_set"] + losses)
        for block, tag in (("without_oe", "base"), ("with_oe", "oe"), ("difference", "delta")):
            for s in sets:
                cells = []
                for k in losses:
                    r = by.get((s, k))
                    if r is None:
                        cells.append("")
                    elif tag == "delta":
                        cells.append(triple({f"{m}_delta": r[f"delta_{m}"] for m in ("auroc", "aupr_in", "aupr_out")}, "delta"))
                    else:
                        cells.append(triple(r, tag))
                w.writerow([block, s] + cells)


def report(results_dir, out_path=None):
    """Aggregate every report.csv under ``results_dir``; returns (rows, complete)."""
    paths = find_reports(results_dir)
    if not paths:
        raise MissingArtifact(f"no report.csv files under {results_dir}")
    rows, complete = aggregate([read_report_csv(p) for p in paths])
    out_path = out_path or os.path.join(results_dir, "aggregate.csv")
    write_aggregate(rows, out_path)
    write_table(rows, os.path.splitext(out_path)[0] + "_table.csv")
    return rows, complete


# --- manifests ---------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, cfg: ExperimentConfig, outputs, started: float, command: str) -> str:
    """RunManifest: config snapshot, version, wall-clock and output digests, written
    atomically to manifest-{command}.json so stages sharing a directory keep their own."""
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_text(),
        "wall_clock_s": round(time.time() - started, 3),
        "outputs": {os.path.relpath(p, out_dir): file_digest(p) for p in outputs},
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"manifest-{command}.json")
    with open(path + ".tmp", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(path + ".tmp", path)
    return path


def run_pipeline(cfg: ExperimentConfig, out_dir, kinds=None, oe_modes=(False, True)) -> list[EvalReport]:
    """data -> ddpm -> mixup outliers -> classifier(s) -> evaluation, all under ``out_dir``."""
    started = time.time()
    bench = build_benchmark(cfg)
    outputs = write_benchmark(bench, os.path.join(out_dir, "data"))
    mix = None
    if any(oe_modes):
        trained = fit_ddpm(cfg, bench.train)
        save_denoiser(os.path.join(out_dir, "ddpm.ckpt"), trained.denoiser, schedule_from(cfg), cfg)
        mix = generate_ood(cfg, trained.denoiser, schedule_from(cfg), n_outliers(cfg, len(bench.train)))
        outputs.append(os.path.join(out_dir, "ood_mixup.csv"))
        write_csv(mix, outputs[-1])
    reports = []
    for kind in kinds or (cfg.loss.kind,):
        for oe in oe_modes:
            run_cfg = cfg.replace(**{"loss.kind": kind, "oe.enabled": oe})
            tc = fit_classifier(run_cfg, bench.train, mix)
            run_dir = os.path.join(out_dir, f"{kind}_{'oe' if oe else 'base'}")
            os.makedirs(run_dir, exist_ok=True)
            save_classifier(os.path.join(run_dir, "classifier.ckpt"), tc.model, tc.head, oe, cfg.seed)
            write_curve(tc.history, os.path.join(run_dir, "curve.csv"))
            reports.append(evaluate(run_cfg, tc.model, tc.head, bench, oe, run_dir))
            outputs += [os.path.join(run_dir, "report.csv"), os.path.join(run_dir, "classifier.ckpt")]
    write_manifest(out_dir, cfg, outputs, started, "run_pipeline")
    return reports
