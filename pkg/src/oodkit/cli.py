"""Command-line experiment runner.

    python -m oodkit make-data  --config exp.cfg --out data/
    python -m oodkit train-ddpm --config exp.cfg --data data/ --out runs/ddpm.ckpt
    python -m oodkit gen-ood    --ddpm runs/ddpm.ckpt --n 450 --out data/mixup.csv
    python -m oodkit train      --config exp.cfg --data data/ [--ood data/mixup.csv] --out runs/x/classifier.ckpt
    python -m oodkit eval       --checkpoint runs/x/classifier.ckpt --data data/ --out runs/x
    python -m oodkit report     runs/

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import experiment as ex
from .config import load_config
from .datagen import read_csv, write_csv
from .nn import ConfigError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

log = logging.getLogger("oodkit")


def _config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    for key, attr in (("loss.kind", "loss"), ("oe.file", "ood")):
        if getattr(args, attr, None):
            overrides.append(f"{key}={getattr(args, attr)}")
    if getattr(args, "ood", None):
        overrides.append("oe.enabled=true")
    if getattr(args, "temperature", None) is not None:
        overrides.append(f"eval.temperature={args.temperature}")
    if getattr(args, "score", None):
        overrides.append("eval.scores=" + ",".join(args.score))
    return load_config(args.config, overrides)


def cmd_make_data(args):
    cfg = _config(args)
    started = time.time()
    out = args.out or cfg.paths.data
    paths = ex.write_benchmark(ex.build_benchmark(cfg), out)
    ex.write_manifest(out, cfg, paths, started, "make-data")
    print(f"wrote {len(paths)} datasets to {out}")


def cmd_train_ddpm(args):
    cfg = _config(args)
    started = time.time()
    bench = ex.read_benchmark(args.data or cfg.paths.data)
    trained = ex.fit_ddpm(cfg, bench.train)
    out = args.out or os.path.join(cfg.paths.out, "ddpm.ckpt")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    ex.save_denoiser(out, trained.denoiser, ex.schedule_from(cfg), cfg)
    ex.write_manifest(os.path.dirname(out) or ".", cfg, [out], started, "train-ddpm")
    print(f"denoiser held-out mse {trained.initial_loss:.4f} -> {trained.final_loss:.4f}; saved {out}")


def _parse_classes(text):
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--classes expects A,B, got {text!r}") from None
    if a == b:
        raise ConfigError("--classes needs two different classes")
    return a, b


def cmd_gen_ood(args):
    cfg = _config(args)
    started = time.time()
    den, schedule = ex.load_denoiser(args.ddpm)
    if den.n_classes != cfg.data.n_classes:
        cfg = cfg.replace(**{"data.n_classes": den.n_classes})
    pairs = [_parse_classes(c) for c in args.classes] if args.classes else None
    for a, b in pairs or ():
        if not (0 <= a < den.n_classes and 0 <= b < den.n_classes):
            raise ConfigError(f"class pair {a},{b} outside 0..{den.n_classes - 1}")
    if args.n is not None:
        n = args.n
    else:
        bench = ex.read_benchmark(args.data or cfg.paths.data)
        n = ex.n_outliers(cfg, len(bench.train))
    mix = ex.generate_ood(cfg, den, schedule, n, pairs)
    out = args.out or os.path.join(cfg.paths.data, "mixup.csv")
    write_csv(mix, out)
    ex.write_manifest(os.path.dirname(out) or ".", cfg, [out], started, "gen-ood")
    print(f"wrote {len(mix)} label-mixup outliers to {out}")


def cmd_train(args):
    cfg = _config(args)
    started = time.time()
    bench = ex.read_benchmark(args.data or cfg.paths.data)
    ood = None
    if cfg.oe.enabled:
        if not cfg.oe.file:
            raise ex.MissingArtifact("oe.enabled needs an outlier file (--ood or oe.file)")
        ood = read_csv(ex._need(cfg.oe.file), "mixup")
    tc = ex.fit_classifier(cfg, bench.train, ood)
    tag = f"{cfg.loss.kind}_{'oe' if cfg.oe.enabled else 'base'}"
    out = args.out or os.path.join(cfg.paths.out, tag, "classifier.ckpt")
    out_dir = os.path.dirname(out) or "."
    os.makedirs(out_dir, exist_ok=True)
    ex.save_classifier(out, tc.model, tc.head, cfg.oe.enabled, cfg.seed)
    curve = os.path.join(out_dir, "curve.csv")
    ex.write_curve(tc.history, curve)
    ex.write_manifest(out_dir, cfg, [out, curve], started, "train")
    print(f"{tag}: loss {tc.history[0][1]:.4f} -> {tc.history[-1][1]:.4f}; saved {out}")


def cmd_eval(args):
    cfg = _config(args)
    started = time.time()
    model, head, meta = ex.load_classifier(args.checkpoint)
    cfg = cfg.replace(**{"seed": meta["seed"], "loss.kind": head.kind})
    bench = ex.read_benchmark(args.data or cfg.paths.data)
    if args.ood_sets:
        bench.ood_sets = {}
        for path in args.ood_sets:
            ds = read_csv(ex._need(path))
            bench.ood_sets[ds.name] = ds
    out = args.out or os.path.dirname(args.checkpoint) or "."
    rep = ex.evaluate(cfg, model, head, bench, bool(meta["oe"]), out)
    ex.write_manifest(out, cfg, [os.path.join(out, "report.csv")], started, "eval")
    for r in rep.records:
        print(f"{r.ood_set:>18} {r.score_kind:>12}  auroc {r.auroc:.3f}  aupr-in {r.aupr_in:.3f}"
              f"  aupr-out {r.aupr_out:.3f}")
    print(f"closed-set accuracy {rep.records[0].closed_set_accuracy:.4f}")


def cmd_report(args):
    rows, complete = ex.report(args.results_dir, args.out)
    print(f"aggregated {len(rows)} rows from {args.results_dir}")
    if not complete:
        missing = [f"{r['ood_set']}/{r['loss_kind']}/{r['score_kind']}" for r in rows if r["status"] != "complete"]
        print("incomplete (no baseline/OE counterpart): " + ", ".join(missing), file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oodkit", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat 'section.key = value' file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("make-data", help="generate ID splits and OOD suites as CSV"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_make_data)

    p = common(sub.add_parser("train-ddpm", help="train the class-conditional denoiser"))
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_ddpm)

    p = common(sub.add_parser("gen-ood", help="sample label-mixup outliers"))
    p.add_argument("--ddpm", required=True)
    p.add_argument("--classes", action="append", metavar="A,B", help="class pair; repeat for several")
    p.add_argument("--n", type=int)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_ood)

    p = common(sub.add_parser("train", help="train a classifier, optionally with outlier exposure"))
    p.add_argument("--data")
    p.add_argument("--loss", help="loss kind (overrides loss.kind)")
    p.add_argument("--ood", help="outlier CSV; enables outlier exposure")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score ID test data against OOD sets"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--ood", dest="ood_sets", action="append", metavar="CSV")
    p.add_argument("--score", action="append", choices=["msp", "energy", "mahalanobis", "maxcos"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="join baseline and OE evaluation reports")
    p.add_argument("results_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
