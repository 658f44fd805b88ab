import numpy as np
import pytest

from hcal.cli import main, read_compare_csv, read_config_file
from hcal.dataset import LogitDataset, save_dataset, softmax_rows
from hcal.diagram import render_reliability_svg
from hcal.maps import load_map
from hcal.metrics import MetricReport, ece, reliability_data
from hcal.synthetic import make_calibrated_task, make_overconfident_task


@pytest.fixture(scope="module")
def small_task(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    task = make_overconfident_task(
        n_train=400, n_test=300, n_classes=4, temperature=0.5, seed=0
    )
    train_path = root / "train.csv"
    test_path = root / "test.csv"
    save_dataset(task.train, train_path, format="csv")
    save_dataset(task.test, test_path, format="csv")
    return train_path, test_path


FAST_FLAGS = [
    "--max-epochs", "40",
    "--window", "50",
]


class TestTrain:
    def test_happy_path_writes_artifacts(self, small_task, tmp_path, capsys):
        train_path, _ = small_task
        model = tmp_path / "model.hcal"
        rc = main([
            "train", str(train_path), str(model),
            "--family", "ensemble_temp", "--m", "4",
            "--selector-metric", "ece_ew", *FAST_FLAGS,
        ])
        assert rc == 0
        assert model.exists()
        assert (tmp_path / "model.hcal.history.csv").exists()
        assert (tmp_path / "model.hcal.meta.txt").exists()
        out = capsys.readouterr().out
        assert "best: ensemble_temp" in out

    def test_brier_single_temperature_baseline(self, small_task, tmp_path):
        train_path, _ = small_task
        model = tmp_path / "ts.hcal"
        rc = main([
            "train", str(train_path), str(model),
            "--loss", "brier", "--family", "ensemble_temp", "--m", "1",
            "--selector-metric", "ece_ew", "--max-epochs", "60",
        ])
        assert rc == 0
        loaded = load_map(model)
        assert loaded.family == "ensemble_temp"
        assert loaded.n_params == 2
        # overconfident task: the learned temperature relaxes the logits
        assert np.exp(loaded.params[0]) > 1.0

    def test_epsilon_flag_plumbs_through(self, small_task, tmp_path):
        train_path, _ = small_task
        model = tmp_path / "m.hcal"
        rc = main([
            "train", str(train_path), str(model),
            "--family", "ensemble_temp", "--m", "1",
            "--epsilon", "0.9",  # dead zone: loss identically zero
            "--selector-metric", "ece_ew", "--max-epochs", "5", "--window", "50",
        ])
        assert rc == 0
        loaded = load_map(model)
        np.testing.assert_array_equal(loaded.params, np.zeros(2))

    def test_missing_input_fails_with_message(self, tmp_path, capsys):
        rc = main(["train", str(tmp_path / "nope.csv"), str(tmp_path / "m.hcal")])
        assert rc == 1
        assert "nope.csv" in capsys.readouterr().err


class TestEval:
    def test_identity_model_equals_uncal(self, small_task, tmp_path, capsys):
        train_path, test_path = small_task
        model = tmp_path / "id.hcal"
        main([
            "train", str(train_path), str(model),
            "--family", "ensemble_temp", "--m", "1",
            "--selector-metric", "ece_ew", "--max-epochs", "0",
        ])
        capsys.readouterr()  # drop the train output
        rc = main(["eval", str(model), str(test_path), "--metrics", "ece_ew,ks"])
        assert rc == 0
        out_model = capsys.readouterr().out
        rc = main(["eval", "uncal", str(test_path), "--metrics", "ece_ew,ks"])
        assert rc == 0
        out_uncal = capsys.readouterr().out
        assert out_model == out_uncal

    def test_metric_selection_exact_rows(self, small_task, tmp_path, capsys):
        _, test_path = small_task
        rc = main([
            "eval", "uncal", str(test_path),
            "--metrics", "ece_ew,cwece_a,skce",
            "--out", str(tmp_path / "r.csv"),
        ])
        assert rc == 0
        report = MetricReport.from_csv(tmp_path / "r.csv")
        assert list(report.values) == ["ece_ew", "cwece_a", "skce"]

    def test_csv_values_match_direct_computation(self, small_task, tmp_path):
        _, test_path = small_task
        out = tmp_path / "direct.csv"
        main(["eval", "uncal", str(test_path), "--metrics", "ece_ew", "--out", str(out)])
        report = MetricReport.from_csv(out)
        task = make_overconfident_task(
            n_train=400, n_test=300, n_classes=4, temperature=0.5, seed=0
        )
        expected = ece(softmax_rows(task.test.logits), task.test.labels)
        assert report.values["ece_ew"] == pytest.approx(expected, rel=1e-12)

    def test_class_count_mismatch_detected(self, small_task, tmp_path, capsys):
        train_path, _ = small_task
        model = tmp_path / "m4.hcal"
        main([
            "train", str(train_path), str(model),
            "--family", "ensemble_temp", "--m", "1",
            "--selector-metric", "ece_ew", "--max-epochs", "0",
        ])
        other = tmp_path / "six.csv"
        rng = np.random.default_rng(0)
        save_dataset(
            LogitDataset(rng.normal(size=(20, 6)), rng.integers(0, 6, 20)),
            other, format="csv",
        )
        rc = main(["eval", str(model), str(other)])
        assert rc == 1
        assert "class-count mismatch" in capsys.readouterr().err

    def test_unknown_metric_fails(self, small_task, capsys):
        _, test_path = small_task
        rc = main(["eval", "uncal", str(test_path), "--metrics", "bogus"])
        assert rc == 1
        assert "bogus" in capsys.readouterr().err


class TestDiagram:
    def test_byte_deterministic(self, small_task, tmp_path):
        _, test_path = small_task
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        assert main(["diagram", "uncal", str(test_path), str(a)]) == 0
        assert main(["diagram", "uncal", str(test_path), str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_perfect_predictions_on_diagonal(self, tmp_path):
        labels = np.arange(30) % 3
        probs = np.full((30, 3), 1e-9)
        probs[np.arange(30), labels] = 1 - 2e-9
        logits = np.log(probs)
        ds = LogitDataset(logits, labels)
        path = tmp_path / "p.csv"
        save_dataset(ds, path, format="csv")
        svg = tmp_path / "p.svg"
        assert main(["diagram", "uncal", str(path), str(svg)]) == 0
        stats = reliability_data(softmax_rows(ds.logits), labels)
        occupied = stats.counts > 0
        assert np.all(stats.accuracy[occupied] == 1.0)
        assert svg.read_text(encoding="utf-8").startswith("<svg")

    def test_gap_shrinks_after_calibration(self, tmp_path):
        # needs a test set large enough that every bin is meaningfully
        # populated, otherwise one-sample bins dominate the max gap
        task = make_overconfident_task(
            n_train=1000, n_test=4000, n_classes=4, temperature=0.5, seed=0
        )
        train_path = tmp_path / "train.csv"
        test_path = tmp_path / "test.csv"
        save_dataset(task.train, train_path, format="csv")
        save_dataset(task.test, test_path, format="csv")
        model = tmp_path / "cal.hcal"
        main([
            "train", str(train_path), str(model),
            "--loss", "nll", "--family", "ensemble_temp", "--m", "1",
            "--selector-metric", "ece_ew", "--monitor-metric", "nll",
            "--max-epochs", "300",
        ])
        before = reliability_data(softmax_rows(task.test.logits), task.test.labels)
        cal = load_map(model)
        after = reliability_data(cal.forward(task.test.logits).probs, task.test.labels)

        def max_gap(stats):
            mask = stats.counts > 0
            return float(np.abs(stats.accuracy[mask] - stats.mean_confidence[mask]).max())

        assert max_gap(after) < max_gap(before)
        # the SVG command accepts the trained model too
        assert main(["diagram", str(model), str(test_path), str(tmp_path / "after.svg")]) == 0


class TestCompare:
    def test_uncal_only_relative_one(self, small_task, tmp_path, capsys):
        train_path, test_path = small_task
        out = tmp_path / "cmp.csv"
        rc = main([
            "compare", str(train_path), str(test_path),
            "--calibrators", "uncal",
            "--metrics", "ece_ew,ks,mmce",
            "--out", str(out),
        ])
        assert rc == 0
        rows = read_compare_csv(out)
        assert len(rows) == 3
        assert all(rel == pytest.approx(1.0) for _, _, _, rel in rows)

    def test_calibrators_beat_uncal_and_csv_round_trips(self, small_task, tmp_path, capsys):
        train_path, test_path = small_task
        out = tmp_path / "cmp.csv"
        rc = main([
            "compare", str(train_path), str(test_path),
            "--calibrators", "uncal,hcal,nll_ts",
            "--family", "ensemble_temp", "--m", "4",
            "--selector-metric", "ece_ew",
            "--metrics", "ece_ew",
            *FAST_FLAGS,
        ])
        assert rc == 0
        # no --out: the printed table carries the values
        table = capsys.readouterr().out
        assert "rel_to_uncal" in table

        rc = main([
            "compare", str(train_path), str(test_path),
            "--calibrators", "uncal,hcal",
            "--family", "ensemble_temp", "--m", "4",
            "--selector-metric", "ece_ew",
            "--metrics", "ece_ew", "--out", str(out),
            *FAST_FLAGS,
        ])
        assert rc == 0
        rows = read_compare_csv(out)
        by_cal = {name: value for name, mid, value, _ in rows}
        assert by_cal["hcal"] < by_cal["uncal"]
        rel = {name: rel for name, _, _, rel in rows}
        assert rel["hcal"] == pytest.approx(by_cal["hcal"] / by_cal["uncal"])

    def test_unknown_calibrator_rejected(self, small_task, capsys):
        train_path, test_path = small_task
        rc = main([
            "compare", str(train_path), str(test_path), "--calibrators", "magic",
        ])
        assert rc == 1
        assert "magic" in capsys.readouterr().err


class TestConfigFile:
    def test_precedence_defaults_file_flags(self, small_task, tmp_path):
        train_path, _ = small_task
        conf = tmp_path / "run.conf"
        conf.write_text(
            "# comment line\n"
            "window = 30\n"
            "epsilon = 0.25\n"
            "family = ensemble_temp\n"
            "m = 1\n"
            "max_epochs = 3\n"
            "selector_metric = ece_ew\n",
            encoding="utf-8",
        )
        parsed = read_config_file(conf)
        assert parsed["window"] == 30
        assert parsed["epsilon"] == 0.25

        model = tmp_path / "m.hcal"
        # flag overrides the file's epsilon; file overrides built-in window
        rc = main([
            "train", str(train_path), str(model),
            "--config", str(conf), "--epsilon", "0.9",
        ])
        assert rc == 0

    def test_unknown_key_rejected(self, tmp_path):
        conf = tmp_path / "bad.conf"
        conf.write_text("wibble = 3\n", encoding="utf-8")
        with pytest.raises(ValueError, match="wibble"):
            read_config_file(conf)

    def test_malformed_line_rejected(self, tmp_path):
        conf = tmp_path / "bad.conf"
        conf.write_text("windows 30\n", encoding="utf-8")
        with pytest.raises(ValueError, match="key = value"):
            read_config_file(conf)


class TestDiagramUnit:
    def test_svg_contains_bars_and_guides(self, rng):
        probs = rng.dirichlet(np.ones(3), size=50)
        labels = rng.integers(0, 3, 50)
        svg = render_reliability_svg(reliability_data(probs, labels), title="t")
        assert svg.count("<rect") > 2
        assert "stroke-dasharray" in svg
        assert svg.rstrip().endswith("</svg>")
