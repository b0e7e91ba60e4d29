"""Command-line entry point.

Subcommands: `corpus generate`, `gan train`, `gan sample`, `anomaly train`,
`experiment run`, `report render`. Configuration lives in one JSON file
with a `preset` field (`smoke` for CI-scale runs, `paper` for the full
grid); every derived seed comes from `master_seed` via the named-stream
hash split in `seeds.py`, so a run directory is reproducible from its
run.json alone.

Exit codes: 0 success, 2 configuration error, 3 refusal to overwrite,
4 partial cell failures.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .corpus import (CorpusError, CorpusSpec, DefectParams, LabelClass, Manifest,
                     NoiseParams, generate_corpus, load_manifest)
from .evaluate import (BUDGETS, ExperimentRunner, ExperimentSpec, MetricsReport,
                       build_table, format_table_txt, render_table)
from .seeds import derive_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_REFUSED = 3
EXIT_PARTIAL = 4


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

PRESET_CORPUS = {
    "smoke": {"counts": {"good": 200, "double_print": 60, "interrupted_print": 60},
              "image_size": 32},
    "paper": {"counts": {"good": 1000, "double_print": 150, "interrupted_print": 150},
              "image_size": 64},
}

# (model, augmentation) rows of the results grid
PRESET_ROWS = {
    "smoke": [
        ("baseline_mlp", "none"), ("gbt", "none"), ("anomaly", "none"),
        ("baseline_mlp", "random"), ("baseline_mlp", "smote"), ("baseline_mlp", "adasyn"),
        ("cnn", "none"), ("cnn_weighted", "none"),
    ],
    "paper": [
        ("baseline_mlp", "none"), ("gbt", "none"), ("anomaly", "none"),
        ("baseline_mlp", "random"), ("baseline_mlp", "smote"), ("baseline_mlp", "adasyn"),
        ("baseline_mlp", "gan"), ("cnn", "none"), ("cnn_weighted", "none"),
    ],
}

PRESET_RETENTIONS = {"smoke": [1.0, 0.25], "paper": [1.0, 0.75, 0.5, 0.25]}


def load_run_config(path: Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    preset = raw.get("preset", "smoke")
    if preset not in BUDGETS:
        raise ConfigError(f"unknown value for key 'preset': {preset!r}")
    cfg = {
        "preset": preset,
        "master_seed": raw.get("master_seed", 0),
        "output_root": raw.get("output_root"),
        "backend": raw.get("backend", "hermetic"),
        "workers": raw.get("workers", 1),
        "corpus": {**PRESET_CORPUS[preset], **raw.get("corpus", {})},
        "rows": [tuple(r) for r in raw.get("rows", PRESET_ROWS[preset])],
        "retentions": raw.get("retentions", PRESET_RETENTIONS[preset]),
        "tasks": raw.get("tasks", ["binary", "multiclass"]),
    }
    if not isinstance(cfg["master_seed"], int):
        raise ConfigError(f"key 'master_seed' must be an integer, got {cfg['master_seed']!r}")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError(f"key 'workers' must be a positive integer, got {cfg['workers']!r}")
    try:
        cfg["corpus_spec_dict"] = cfg["corpus"]
        _corpus_spec(cfg).validate()
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad 'corpus' section: {e}")
    return cfg


def _corpus_spec(cfg: dict) -> CorpusSpec:
    c = cfg["corpus"]
    kwargs = {}
    if "defect_params" in c:
        kwargs["defect_params"] = DefectParams(**{k: tuple(v) for k, v in c["defect_params"].items()})
    if "noise" in c:
        kwargs["noise"] = NoiseParams(**c["noise"])
    return CorpusSpec(
        counts={LabelClass(k): int(v) for k, v in c["counts"].items()},
        image_size=int(c["image_size"]),
        seed=c.get("seed", derive_seed(cfg["master_seed"], "corpus")),
        **kwargs,
    )


def _resolve_corpus(cfg: dict, out_root: Path) -> Manifest:
    corpus_dir = out_root / "corpus"
    manifest_path = corpus_dir / "manifest.json"
    spec = _corpus_spec(cfg)
    if manifest_path.exists():
        manifest = load_manifest(manifest_path)
        if manifest.corpus_spec == spec:
            return manifest
    return generate_corpus(spec, corpus_dir)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_corpus_generate(args) -> int:
    try:
        cfg = load_run_config(args.config)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    if (out_dir / "manifest.json").exists() and not args.force:
        print(f"refusing to overwrite existing corpus in {out_dir} (use --force)", file=sys.stderr)
        return EXIT_REFUSED
    spec = _corpus_spec(cfg)
    if args.seed is not None:
        import dataclasses

        spec = dataclasses.replace(spec, seed=args.seed)
    manifest = generate_corpus(spec, out_dir)
    counts = manifest.class_counts()
    print(f"wrote {len(manifest.samples)} samples to {out_dir}")
    for c in LabelClass:
        print(f"  {c.value}: {counts[c]}")
    return EXIT_OK


def cmd_experiment_run(args) -> int:
    try:
        cfg = load_run_config(args.config)
        if args.preset:
            # re-resolve preset-dependent defaults under the override
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
            raw["preset"] = args.preset
            tmp = Path(args.config).with_suffix(".tmp-preset.json")
            tmp.write_text(json.dumps(raw), encoding="utf-8")
            try:
                cfg = load_run_config(tmp)
            finally:
                tmp.unlink()
        if args.seed is not None:
            cfg["master_seed"] = args.seed
        if args.workers is not None:
            cfg["workers"] = args.workers
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out_root = Path(args.out or cfg["output_root"] or "runs/latest")
    if (out_root / "results.csv").exists() and not args.force:
        print(f"refusing to overwrite existing run in {out_root} (use --force)", file=sys.stderr)
        return EXIT_REFUSED
    out_root.mkdir(parents=True, exist_ok=True)

    manifest = _resolve_corpus(cfg, out_root)
    runner = ExperimentRunner(manifest, out_root / "work")

    rows = cfg["rows"]
    if args.only:
        rows = [r for r in rows if r[0] == args.only]
    retentions = [args.retention] if args.retention is not None else cfg["retentions"]

    cells = []
    for model, augmentation in rows:
        for task in cfg["tasks"]:
            for retention in retentions:
                if model == "anomaly" and task != "binary":
                    continue  # rendered as '-' in the grid, like the source layout
                cells.append(ExperimentSpec(
                    model=model, augmentation=augmentation, retention=retention,
                    task=task, master_seed=cfg["master_seed"],
                    backend=cfg["backend"], preset=cfg["preset"]))

    reports: list[MetricsReport] = []
    failures = []

    def run_cell(spec: ExperimentSpec):
        label = f"[{spec.row_label()}/{spec.task}/r{spec.retention}]"
        try:
            rep = runner.run_experiment(spec)
            print(f"{label} mean AUC {rep.mean_auc:.4f} ({rep.runtime_s:.1f}s)")
            return spec, rep, None
        except Exception as e:  # record per-cell, keep the grid going
            print(f"{label} FAILED: {e}")
            return spec, None, traceback.format_exc()

    if cfg["workers"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["workers"]) as pool:
            outcomes = list(pool.map(run_cell, cells))
    else:
        outcomes = [run_cell(c) for c in cells]
    for spec, rep, err in outcomes:
        if rep is not None:
            reports.append(rep)
        else:
            failures.append({"cell": spec.to_dict(), "error": err})

    if reports:
        render_table(reports, out_root)
        print((out_root / "table.txt").read_text(encoding="utf-8"))
    run_doc = {
        "version": __version__,
        "config": {k: v for k, v in cfg.items() if k != "corpus_spec_dict"},
        "corpus_spec": manifest.corpus_spec.to_dict(),
        "cells_attempted": len(cells),
        "cells": [
            {"spec": r.spec.to_dict(), "mean_auc": r.mean_auc,
             "per_fold_auc": r.per_fold_auc, "runtime_s": r.runtime_s}
            for r in reports
        ],
        "failures": failures,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_root / "run.json").write_text(json.dumps(run_doc, indent=2) + "\n", encoding="utf-8")
    print(f"attempted {len(cells)} cells, {len(failures)} failed")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_gan_train(args) -> int:
    from . import generative

    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        manifest = load_manifest(Path(raw["corpus_manifest"]))
        label = LabelClass(raw["class"])
        gan_kwargs = dict(raw.get("gan", {}))
        config = generative.GanConfig(label=label, image_size=manifest.corpus_spec.image_size,
                                      **gan_kwargs)
    except (OSError, KeyError, ValueError, TypeError, CorpusError) as e:
        print(f"error: bad gan config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    images = [manifest.load_image(s) for s in manifest.samples if s.label is label]
    resume = None
    if args.resume:
        resume = generative.load_checkpoint(Path(args.resume))
        print(f"resuming from iteration {resume.iteration}")
    try:
        ckpt = generative.train_gan(images, config, resume=resume)
    except generative.GenerativeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{label.value}.lgan"
    generative.save_checkpoint(ckpt, path)
    print(f"wrote {path} at iteration {ckpt.iteration}")
    print("fid history:")
    for it, fid in ckpt.fid_history:
        print(f"  iter {it:>6}: {fid:.3f}")
    return EXIT_OK


def cmd_gan_sample(args) -> int:
    from PIL import Image

    from . import generative

    try:
        ckpt = generative.load_checkpoint(Path(args.checkpoint))
    except (OSError, generative.GenerativeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    images = generative.sample(ckpt, args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        Image.fromarray(img, mode="L").save(out / f"{args.seed}_{i:05d}.png")
    print(f"wrote {len(images)} samples to {out}")
    return EXIT_OK


def cmd_anomaly_train(args) -> int:
    from . import anomaly as anomaly_mod

    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        manifest = load_manifest(Path(raw["corpus_manifest"]))
        cfg = anomaly_mod.AnomalyConfig(
            image_size=manifest.corpus_spec.image_size,
            defect_params=manifest.corpus_spec.defect_params,
            **raw.get("anomaly", {}))
    except (OSError, KeyError, ValueError, TypeError, CorpusError) as e:
        print(f"error: bad anomaly config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    good = [s for s in manifest.samples if s.label is LabelClass.GOOD]
    images = [manifest.load_image(s) for s in good]
    try:
        model = anomaly_mod.train_unsupervised(images, cfg, labels=[s.label for s in good])
    except anomaly_mod.AnomalyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "anomaly.anom"
    anomaly_mod.save_model(model, path)
    print(f"wrote {path}")
    print("reconstruction loss per epoch: "
          + ", ".join(f"{v:.5f}" for v in model.epoch_losses))
    return EXIT_OK


def cmd_report_render(args) -> int:
    """Rebuild table.txt from an existing results.csv."""
    path = Path(args.results)
    if not path.exists():
        print(f"error: {path} not found", file=sys.stderr)
        return EXIT_CONFIG
    import csv as csv_mod
    from collections import defaultdict

    per_cell = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for row in csv_mod.DictReader(fh):
            key = (row["model"], row["augmentation"], row["task"], float(row["retention"]))
            per_cell[key].append(float(row["auc"]))
    reports = []
    for (model, augmentation, task, retention), aucs in per_cell.items():
        spec = ExperimentSpec(model=model, augmentation=augmentation,
                              retention=retention, task=task, master_seed=0)
        reports.append(MetricsReport(spec=spec, per_fold_auc=aucs,
                                     mean_auc=float(sum(aucs) / len(aucs))))
    table = build_table(reports)
    text = format_table_txt(table)
    out = Path(args.out) if args.out else path.parent / "table.txt"
    out.write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inspectlab",
                                description="Imbalanced visual-inspection benchmark pipeline")
    sub = p.add_subparsers(dest="group", required=True)

    corpus = sub.add_parser("corpus").add_subparsers(dest="cmd", required=True)
    gen = corpus.add_parser("generate", help="render the synthetic corpus")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_corpus_generate)

    gan = sub.add_parser("gan").add_subparsers(dest="cmd", required=True)
    gt = gan.add_parser("train", help="train a per-class generator")
    gt.add_argument("--config", required=True)
    gt.add_argument("--out", required=True)
    gt.add_argument("--resume", help="checkpoint to continue from")
    gt.set_defaults(func=cmd_gan_train)
    gs = gan.add_parser("sample", help="sample images from a checkpoint")
    gs.add_argument("--checkpoint", required=True)
    gs.add_argument("--n", type=int, default=16)
    gs.add_argument("--seed", type=int, default=0)
    gs.add_argument("--out", required=True)
    gs.set_defaults(func=cmd_gan_sample)

    anom = sub.add_parser("anomaly").add_subparsers(dest="cmd", required=True)
    at = anom.add_parser("train", help="train the unsupervised detector")
    at.add_argument("--config", required=True)
    at.add_argument("--out", required=True)
    at.set_defaults(func=cmd_anomaly_train)

    exp = sub.add_parser("experiment").add_subparsers(dest="cmd", required=True)
    er = exp.add_parser("run", help="run the experiment grid")
    er.add_argument("--config", required=True)
    er.add_argument("--out")
    er.add_argument("--preset", choices=list(BUDGETS))
    er.add_argument("--seed", type=int)
    er.add_argument("--workers", type=int)
    er.add_argument("--only", help="restrict to one model")
    er.add_argument("--retention", type=float)
    er.add_argument("--force", action="store_true")
    er.set_defaults(func=cmd_experiment_run)

    rep = sub.add_parser("report").add_subparsers(dest="cmd", required=True)
    rr = rep.add_parser("render", help="rebuild table.txt from results.csv")
    rr.add_argument("--results", required=True)
    rr.add_argument("--out")
    rr.set_defaults(func=cmd_report_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
