import numpy as np
import pytest

from inspectlab.evaluate import (EvaluateError, ExperimentRunner, ExperimentSpec,
                                 MetricsReport, build_table, format_table_txt,
                                 render_table, write_results_csv)


@pytest.fixture(scope="module")
def runner(small_corpus, tmp_path_factory):
    return ExperimentRunner(small_corpus, tmp_path_factory.mktemp("work"))


def make_spec(**kwargs):
    base = dict(model="baseline_mlp", augmentation="none", retention=1.0,
                task="binary", master_seed=1)
    base.update(kwargs)
    return ExperimentSpec(**base)


class TestSpecValidation:
    def test_anomaly_constraints(self):
        with pytest.raises(EvaluateError):
            make_spec(model="anomaly", task="multiclass").validate()
        with pytest.raises(EvaluateError):
            make_spec(model="anomaly", augmentation="smote").validate()
        make_spec(model="anomaly").validate()

    def test_cnn_rows_unaugmented(self):
        with pytest.raises(EvaluateError):
            make_spec(model="cnn", augmentation="random").validate()

    def test_unknown_names(self):
        with pytest.raises(EvaluateError):
            make_spec(model="svm").validate()
        with pytest.raises(EvaluateError):
            make_spec(augmentation="mixup").validate()
        with pytest.raises(EvaluateError):
            make_spec(task="regression").validate()

    def test_row_label(self):
        assert make_spec().row_label() == "baseline_mlp"
        assert make_spec(augmentation="smote").row_label() == "baseline_mlp+smote"


class TestRunExperiment:
    def test_baseline_protocol_well_formed(self, runner):
        rep = runner.run_experiment(make_spec())
        assert len(rep.per_fold_auc) == 10
        assert all(0.0 <= v <= 1.0 for v in rep.per_fold_auc)
        assert rep.mean_auc == pytest.approx(np.mean(rep.per_fold_auc), abs=1e-12)
        assert rep.roc_scores is not None and len(rep.roc_scores) == 100

    def test_determinism_across_runners(self, small_corpus, tmp_path):
        r1 = ExperimentRunner(small_corpus, tmp_path / "w1")
        r2 = ExperimentRunner(small_corpus, tmp_path / "w2")
        spec = make_spec(augmentation="smote", retention=0.5)
        a = r1.run_experiment(spec)
        b = r2.run_experiment(spec)
        assert a.per_fold_auc == b.per_fold_auc

    def test_multiclass_reports_per_class(self, runner):
        rep = runner.run_experiment(make_spec(task="multiclass"))
        assert set(rep.per_class_auc) == {"good", "double_print", "interrupted_print"}
        assert all(0.0 <= v <= 1.0 for v in rep.per_class_auc.values())

    def test_binary_and_multiclass_share_training(self, runner):
        spec_b = make_spec(augmentation="random", retention=0.5)
        before = dict(runner._fold_cache)
        runner.run_experiment(spec_b)
        mid = len(runner._fold_cache) - len(before)
        runner.run_experiment(make_spec(augmentation="random", retention=0.5,
                                        task="multiclass"))
        assert len(runner._fold_cache) - len(before) == mid  # no retraining

    def test_anomaly_identical_across_retentions(self, runner):
        reports = [runner.run_experiment(make_spec(model="anomaly", retention=r))
                   for r in (1.0, 0.75, 0.5, 0.25)]
        for rep in reports[1:]:
            assert rep.per_fold_auc == reports[0].per_fold_auc

    def test_hygiene_guard_raises_on_leak(self, runner):
        with pytest.raises(EvaluateError, match="test leak"):
            runner._assert_hygiene({"good-00001"}, ["good-00001", "good-00002"],
                                   make_spec(), fold=3)


def fake_report(model="baseline_mlp", augmentation="none", task="binary",
                retention=1.0, mean=0.9):
    spec = ExperimentSpec(model=model, augmentation=augmentation, retention=retention,
                          task=task, master_seed=0)
    per_fold = [mean] * 10
    return MetricsReport(spec=spec, per_fold_auc=per_fold, mean_auc=mean)


class TestResultsTable:
    def grid_reports(self):
        reports = []
        rows = [("baseline_mlp", "none"), ("gbt", "none"), ("baseline_mlp", "smote")]
        for i, (model, aug) in enumerate(rows):
            for task in ("binary", "multiclass"):
                for r in (1.0, 0.75, 0.5, 0.25):
                    reports.append(fake_report(model, aug, task, r,
                                               mean=0.8 + 0.01 * i + 0.001 * r))
        return reports

    def test_one_best_per_column(self):
        table = build_table(self.grid_reports())
        assert len(table.rows) == 3
        assert len(table.columns) == 8
        for task, r in table.columns:
            marked = [c for c in table.best if c[1] == task and c[2] == r]
            assert len(marked) == 1

    def test_tie_marks_first_row(self):
        reports = [fake_report("baseline_mlp", mean=0.9), fake_report("gbt", mean=0.9)]
        table = build_table(reports)
        assert ("baseline_mlp", "binary", 1.0) in table.best
        assert ("gbt", "binary", 1.0) not in table.best

    def test_single_report_degenerate(self):
        table = build_table([fake_report()])
        assert table.rows == ["baseline_mlp"]
        assert table.best == {("baseline_mlp", "binary", 1.0)}

    def test_duplicate_cell_rejected(self):
        with pytest.raises(EvaluateError):
            build_table([fake_report(), fake_report()])

    def test_csv_round_trip_at_4_decimals(self, tmp_path):
        import csv
        reports = self.grid_reports()
        path = tmp_path / "results.csv"
        write_results_csv(reports, path)
        by_cell = {}
        with open(path) as fh:
            for row in csv.DictReader(fh):
                key = (row["model"], row["augmentation"], row["task"],
                       float(row["retention"]))
                by_cell.setdefault(key, []).append(float(row["auc"]))
        for rep in reports:
            s = rep.spec
            aucs = by_cell[(s.model, s.augmentation, s.task, s.retention)]
            assert np.mean(aucs) == pytest.approx(rep.mean_auc, abs=5e-5)

    def test_format_marks_best_and_missing(self):
        reports = [fake_report(mean=0.91), fake_report(model="gbt", mean=0.95),
                   fake_report(model="gbt", task="multiclass", mean=0.93)]
        text = format_table_txt(build_table(reports))
        lines = text.split("\n")
        gbt_line = next(l for l in lines if l.startswith("gbt"))
        assert "0.9500*" in gbt_line
        mlp_line = next(l for l in lines if l.startswith("baseline_mlp"))
        assert "-" in mlp_line  # missing multiclass cell

    def test_render_table_writes_artifacts(self, tmp_path):
        rng = np.random.default_rng(0)
        rep = fake_report(mean=0.9)
        rep.roc_scores = rng.random(40)
        rep.roc_labels = rng.random(40) < 0.4
        render_table([rep], tmp_path)
        assert (tmp_path / "results.csv").exists()
        assert (tmp_path / "table.txt").exists()
        assert any(p.suffix == ".png" for p in tmp_path.iterdir())
