"""Experiment harness: stratified ten-fold evaluation with per-fold
augmentation, defective-retention sweeps, and results-grid rendering.

Per fold: the training split is retention-subsampled (defective classes
only), augmented (feature-space oversampling after extraction, GAN
oversampling at image level before extraction), feature selection is refit
on the augmented training rows, the model is trained, and the untouched
test fold is scored. Binary scoring collapses the multiclass output to
1 - P(good), so one trained model serves both tasks of a cell.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import anomaly as anomaly_mod
from . import classify, generative, resample
from .corpus import LabelClass, Manifest, subsample_defective
from .features import FeatureMatrix, apply_mask, extract_embeddings, select_top_k
from .metrics import (FoldPlan, auc_binary, auc_multiclass_ovr_weighted,
                      stratified_kfold)
from .seeds import derive_seed

MODELS = ("baseline_mlp", "gbt", "cnn", "cnn_weighted", "anomaly")
AUGMENTATIONS = ("none", "random", "smote", "adasyn", "gan")
RETENTIONS = (1.0, 0.75, 0.5, 0.25)
TASKS = ("binary", "multiclass")


class EvaluateError(Exception):
    pass


@dataclass(frozen=True)
class TrainBudget:
    """Per-preset training effort; model shapes stay fixed."""

    mlp_epochs: int
    cnn_epochs: int
    anomaly_epochs: int
    gan_iterations: int


BUDGETS = {
    "smoke": TrainBudget(mlp_epochs=20, cnn_epochs=3, anomaly_epochs=1, gan_iterations=250),
    "paper": TrainBudget(mlp_epochs=50, cnn_epochs=10, anomaly_epochs=5, gan_iterations=20000),
}


@dataclass(frozen=True)
class ExperimentSpec:
    model: str
    augmentation: str
    retention: float
    task: str
    master_seed: int
    backend: str = "hermetic"
    preset: str = "smoke"
    folds: int = 10

    def validate(self) -> None:
        if self.model not in MODELS:
            raise EvaluateError(f"unknown model {self.model!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise EvaluateError(f"unknown augmentation {self.augmentation!r}")
        if self.task not in TASKS:
            raise EvaluateError(f"unknown task {self.task!r}")
        if self.model == "anomaly" and (self.task != "binary" or self.augmentation != "none"):
            raise EvaluateError("anomaly model is only valid with task=binary, augmentation=none")
        if self.model in ("cnn", "cnn_weighted") and self.augmentation != "none":
            raise EvaluateError("the CNN rows train on the un-augmented image set")

    def row_label(self) -> str:
        return self.model if self.augmentation == "none" else f"{self.model}+{self.augmentation}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricsReport:
    spec: ExperimentSpec
    per_fold_auc: list[float]
    mean_auc: float
    per_class_auc: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    fid: generative.FidReport | None = None
    roc_scores: np.ndarray | None = None  # pooled binary scores across folds
    roc_labels: np.ndarray | None = None


class ExperimentRunner:
    """Runs experiment cells against one corpus, caching fold-level work.

    Caches: full-corpus embeddings per backend, per-(cell, fold) test
    predictions (shared between the binary and multiclass task of a cell),
    and anomaly scores keyed without retention (the detector only sees Good
    images, so retention cannot change it).
    """

    def __init__(self, manifest: Manifest, work_dir: Path):
        self.manifest = manifest
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self._embed_cache: dict[str, dict[str, np.ndarray]] = {}
        self._fold_cache: dict = {}
        self._gan_fid: dict = {}

    # -- embeddings -------------------------------------------------------

    def _embeddings(self, backend: str) -> dict[str, np.ndarray]:
        if backend not in self._embed_cache:
            fm = self._load_or_extract(backend)
            self._embed_cache[backend] = dict(zip(fm.row_ids, fm.values))
        return self._embed_cache[backend]

    def _load_or_extract(self, backend: str) -> FeatureMatrix:
        """Full-corpus extraction, cached on disk under $INSPECTLAB_CACHE."""
        import hashlib
        import os

        from .features import load_feature_matrix, save_feature_matrix

        cache_root = os.environ.get("INSPECTLAB_CACHE")
        cache_path = None
        if cache_root:
            h = hashlib.sha256()
            h.update(backend.encode())
            for s in self.manifest.samples:
                h.update(s.id.encode())
                h.update(self.manifest.image_path(s).read_bytes())
            cache_path = Path(cache_root) / f"embed_{h.hexdigest()[:24]}.fmat"
            if cache_path.exists():
                return load_feature_matrix(cache_path)
        fm = extract_embeddings(list(self.manifest.samples), self.manifest, backend)
        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            save_feature_matrix(fm, cache_path)
        return fm

    def _matrix_for(self, samples, backend: str) -> FeatureMatrix:
        cache = self._embeddings(backend)
        values = np.stack([cache[s.id] for s in samples])
        return FeatureMatrix(values=values, row_ids=tuple(s.id for s in samples))

    # -- public surface ---------------------------------------------------

    def run_experiment(self, spec: ExperimentSpec) -> MetricsReport:
        spec.validate()
        started = time.monotonic()
        samples = list(self.manifest.samples)
        ids = [s.id for s in samples]
        labels = np.array([s.label.value for s in samples])
        plan = stratified_kfold(ids, labels, k=spec.folds,
                                seed=derive_seed(spec.master_seed, "folds"))
        per_fold = []
        per_class_folds: dict = {}
        roc_scores, roc_labels = [], []
        for fold in range(spec.folds):
            probs, test_labels, classes = self._fold_outputs(spec, plan, fold)
            positives = np.array([LabelClass(l).is_defective for l in test_labels])
            if spec.model == "anomaly":
                scores = probs  # raw anomaly scores
                per_fold.append(auc_binary(scores, positives))
                roc_scores.append(scores)
            elif spec.task == "binary":
                scores = 1.0 - probs[:, classes.index(LabelClass.GOOD.value)]
                per_fold.append(auc_binary(scores, positives))
                roc_scores.append(scores)
            else:
                weighted, per_class = auc_multiclass_ovr_weighted(probs, test_labels, classes)
                per_fold.append(weighted)
                for c, v in per_class.items():
                    per_class_folds.setdefault(c, []).append(v)
            roc_labels.append(positives)
        report = MetricsReport(
            spec=spec,
            per_fold_auc=[float(v) for v in per_fold],
            mean_auc=float(np.mean(per_fold)),
            per_class_auc={c: float(np.mean(v)) for c, v in per_class_folds.items()},
            runtime_s=time.monotonic() - started,
        )
        if spec.task == "binary":
            report.roc_scores = np.concatenate(roc_scores)
            report.roc_labels = np.concatenate(roc_labels)
        if spec.augmentation == "gan":
            report.fid = self._aggregate_gan_fid(spec)
        return report

    # -- fold machinery ---------------------------------------------------

    def _fold_outputs(self, spec: ExperimentSpec, plan: FoldPlan, fold: int):
        key = (spec.model, spec.augmentation,
               None if spec.model == "anomaly" else spec.retention,
               spec.master_seed, spec.backend, spec.preset, fold)
        if key in self._fold_cache:
            return self._fold_cache[key]

        samples = list(self.manifest.samples)
        test = [s for s in samples if plan.assignments[s.id] == fold]
        train = [s for s in samples if plan.assignments[s.id] != fold]
        test_ids = {s.id for s in test}
        train_manifest = dataclasses.replace(self.manifest, samples=tuple(train))
        retained = subsample_defective(
            train_manifest, spec.retention,
            seed=derive_seed(spec.master_seed, "retention", fold))
        budget = BUDGETS[spec.preset]
        train_seed = derive_seed(spec.master_seed, "train", spec.model, spec.augmentation, fold)
        test_labels = [s.label.value for s in test]

        if spec.model == "anomaly":
            good = [s for s in retained.samples if s.label is LabelClass.GOOD]
            imgs = [self.manifest.load_image(s) for s in good]
            cfg = anomaly_mod.AnomalyConfig(
                image_size=self.manifest.corpus_spec.image_size,
                epochs=budget.anomaly_epochs,
                defect_params=self.manifest.corpus_spec.defect_params,
                seed=derive_seed(spec.master_seed, "train", "anomaly", fold),
            )
            model = anomaly_mod.train_unsupervised(imgs, cfg, labels=[s.label for s in good])
            scores = anomaly_mod.score_many(model, [self.manifest.load_image(s) for s in test])
            out = (scores, test_labels, None)
            self._fold_cache[key] = out
            return out

        if spec.model in ("cnn", "cnn_weighted"):
            train_imgs = [self.manifest.load_image(s) for s in retained.samples]
            y = np.array([s.label.value for s in retained.samples])
            self._assert_hygiene(test_ids, [s.id for s in retained.samples], spec, fold)
            weights = classify.inverse_frequency_weights(y) if spec.model == "cnn_weighted" else None
            cfg = classify.CnnConfig(epochs=budget.cnn_epochs, class_weights=weights, seed=train_seed)
            model = classify.train_cnn(train_imgs, y, cfg)
            probs = classify.predict_proba(model, [self.manifest.load_image(s) for s in test])
            out = (probs, test_labels, list(model.classes))
            self._fold_cache[key] = out
            return out

        # feature-space models (baseline_mlp, gbt)
        if spec.augmentation == "gan":
            aug_manifest = self._gan_augment(spec, retained, fold, budget)
            self._assert_hygiene(test_ids, [s.id for s in aug_manifest.samples], spec, fold)
            real = [s for s in aug_manifest.samples if s.id in {r.id for r in retained.samples}]
            synth = [s for s in aug_manifest.samples if s.id not in {r.id for r in retained.samples}]
            X_real = self._matrix_for(real, spec.backend)
            synth_imgs = [aug_manifest.load_image(s) for s in synth]
            from .features import embed_images

            if synth:
                X_synth = embed_images(synth_imgs, [s.id for s in synth], spec.backend)
                X_aug = np.vstack([X_real.values, X_synth.values])
            else:
                X_aug = X_real.values
            y_aug = np.array([s.label.value for s in real + synth])
            row_ids = tuple(s.id for s in real + synth)
        else:
            self._assert_hygiene(test_ids, [s.id for s in retained.samples], spec, fold)
            X_train = self._matrix_for(retained.samples, spec.backend)
            y_train = np.array([s.label.value for s in retained.samples])
            if spec.augmentation == "none":
                X_aug, y_aug = X_train.values, y_train
                row_ids = X_train.row_ids
            else:
                strat = resample.STRATEGIES[spec.augmentation]
                aug_seed = derive_seed(spec.master_seed, "augment", spec.augmentation, fold)
                X_aug, y_aug, rows, _plan = strat(X_train.values, y_train, seed=aug_seed)
                row_ids = X_train.row_ids + tuple(f"synthetic-{i:06d}" for i in range(len(rows)))

        fm_aug = FeatureMatrix(values=np.asarray(X_aug, dtype=np.float32), row_ids=row_ids)
        mask = select_top_k(fm_aug, y_aug)
        X_fit = apply_mask(fm_aug, mask).values
        X_test = apply_mask(self._matrix_for(test, spec.backend), mask).values

        if spec.model == "baseline_mlp":
            cfg = classify.MlpConfig(epochs=budget.mlp_epochs, seed=train_seed)
            model = classify.train_mlp(X_fit, y_aug, cfg)
        else:
            cfg = classify.GbtConfig(seed=train_seed)
            model = classify.train_gbt(X_fit, y_aug, cfg)
        probs = classify.predict_proba(model, X_test)
        out = (probs, test_labels, list(model.classes))
        self._fold_cache[key] = out
        return out

    def _assert_hygiene(self, test_ids: set, train_ids, spec: ExperimentSpec, fold: int) -> None:
        leaked = test_ids.intersection(train_ids)
        if leaked:
            raise EvaluateError(
                f"test leak in fold {fold} of {spec.row_label()}: {sorted(leaked)[:5]}")

    def _gan_augment(self, spec: ExperimentSpec, retained: Manifest, fold: int,
                     budget: TrainBudget) -> Manifest:
        counts = {c: n for c, n in retained.class_counts().items() if n > 0}
        majority = max(counts.values())
        checkpoints = {}
        for label, n in counts.items():
            if n >= majority:
                continue
            class_imgs = [self.manifest.load_image(s) for s in retained.samples
                          if s.label is label]
            cfg = generative.GanConfig(
                label=label,
                image_size=self.manifest.corpus_spec.image_size,
                iterations=budget.gan_iterations,
                seed=derive_seed(spec.master_seed, "gan", label.value, fold, spec.retention),
            )
            ckpt = generative.train_gan(class_imgs, cfg)
            checkpoints[label] = ckpt
            fid_key = (spec.master_seed, spec.retention, label.value)
            self._gan_fid.setdefault(fid_key, []).append(
                (ckpt.fid_history[-1][1], len(class_imgs)))
        fold_dir = self.work_dir / f"seed{spec.master_seed}_r{spec.retention}_fold{fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        return generative.gan_oversample(
            retained, checkpoints,
            seed=derive_seed(spec.master_seed, "gan-sample", fold, spec.retention),
            work_dir=fold_dir)

    def _aggregate_gan_fid(self, spec: ExperimentSpec) -> generative.FidReport:
        per_class = {}
        n_real = n_synth = 0
        for (seed, retention, label), entries in self._gan_fid.items():
            if seed != spec.master_seed or retention != spec.retention:
                continue
            per_class[label] = float(np.mean([v for v, _ in entries]))
            n_real += sum(n for _, n in entries)
        value = float(np.mean(list(per_class.values()))) if per_class else float("nan")
        return generative.FidReport(value=value, n_real=n_real, n_synth=n_real,
                                    embedding_backend=spec.backend, per_class=per_class)


# ---------------------------------------------------------------------------
# Results rendering
# ---------------------------------------------------------------------------


@dataclass
class ResultsTable:
    rows: list[str]  # row labels (model or model+augmentation)
    columns: list[tuple[str, float]]  # (task, retention)
    cells: dict  # (row, task, retention) -> mean AUC or None
    best: set  # (row, task, retention) cells marked best per column


def build_table(reports: list[MetricsReport]) -> ResultsTable:
    rows, seen_cells = [], {}
    for rep in reports:
        row = rep.spec.row_label()
        cell = (row, rep.spec.task, rep.spec.retention)
        if cell in seen_cells:
            raise EvaluateError(f"duplicate cell {cell}")
        seen_cells[cell] = rep.mean_auc
        if row not in rows:
            rows.append(row)
    retentions = sorted({rep.spec.retention for rep in reports}, reverse=True)
    columns = [(task, r) for task in TASKS for r in retentions
               if any(rep.spec.task == task for rep in reports)]
    best = set()
    for task, r in columns:
        col = {row: seen_cells.get((row, task, r)) for row in rows}
        present = {k: v for k, v in col.items() if v is not None}
        if present:
            top = max(present.values())
            # a single best cell per column; first row wins exact ties
            for row in rows:
                if present.get(row) == top:
                    best.add((row, task, r))
                    break
    return ResultsTable(rows=rows, columns=columns, cells=seen_cells, best=best)


def write_results_csv(reports: list[MetricsReport], path: Path) -> None:
    """Long-format per-fold results; byte-stable given deterministic runs."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("model,augmentation,task,retention,fold,auc\n")
        for rep in reports:
            s = rep.spec
            for fold, auc in enumerate(rep.per_fold_auc):
                fh.write(f"{s.model},{s.augmentation},{s.task},{s.retention},{fold},{auc!r}\n")


def format_table_txt(table: ResultsTable) -> str:
    label_w = max([len(r) for r in table.rows] + [len("model")]) + 2
    header1 = " " * label_w
    header2 = "model".ljust(label_w)
    for task, r in table.columns:
        header1 += f"{task:>12}"
        header2 += f"{int(r * 100):>11}%"
    lines = [header1, header2, "-" * len(header2)]
    for row in table.rows:
        line = row.ljust(label_w)
        for task, r in table.columns:
            v = table.cells.get((row, task, r))
            if v is None:
                line += f"{'-':>12}"
            else:
                mark = "*" if (row, task, r) in table.best else " "
                line += f"{v:>11.4f}{mark}"
        lines.append(line)
    lines.append("")
    lines.append("* best value in column")
    return "\n".join(lines) + "\n"


def _plot_roc(report: MetricsReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scores, labels = report.roc_scores, report.roc_labels
    order = np.argsort(-scores, kind="stable")
    tps = np.cumsum(labels[order])
    fps = np.cumsum(~labels[order])
    tpr = np.concatenate([[0.0], tps / max(tps[-1], 1)])
    fpr = np.concatenate([[0.0], fps / max(fps[-1], 1)])
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr)
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"{report.spec.row_label()} r={report.spec.retention} AUC={report.mean_auc:.4f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_fid(reports: list[MetricsReport], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with_fid = [r for r in reports if r.fid is not None and r.fid.per_class]
    if not with_fid:
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    classes = sorted({c for r in with_fid for c in r.fid.per_class})
    width = 0.8 / len(with_fid)
    seen = set()
    plotted = []
    for r in with_fid:
        key = (r.spec.master_seed, r.spec.retention)
        if key in seen:
            continue
        seen.add(key)
        plotted.append(r)
    for i, r in enumerate(plotted):
        xs = np.arange(len(classes)) + i * width
        ax.bar(xs, [r.fid.per_class.get(c, 0.0) for c in classes], width,
               label=f"r={r.spec.retention}")
    ax.set_xticks(np.arange(len(classes)) + 0.4 - width / 2)
    ax.set_xticklabels(classes, rotation=15)
    ax.set_ylabel("FID (per class)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render_table(reports: list[MetricsReport], out_dir: Path) -> ResultsTable:
    """Render the grid plus CSV, plain-text table, ROC and FID plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = build_table(reports)
    write_results_csv(reports, out_dir / "results.csv")
    (out_dir / "table.txt").write_text(format_table_txt(table), encoding="utf-8")
    for rep in reports:
        if rep.roc_scores is not None:
            name = f"roc_{rep.spec.row_label()}_r{int(rep.spec.retention * 100)}.png"
            _plot_roc(rep, out_dir / name)
    _plot_fid(reports, out_dir / "fid.png")
    return table
