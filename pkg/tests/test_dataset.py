import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcal.dataset import (
    DatasetFormatError,
    LogitDataset,
    check_prob_matrix,
    load_dataset,
    save_dataset,
    softmax_rows,
    split_dataset,
)


class TestLogitDataset:
    def test_valid_construction(self):
        ds = LogitDataset(np.zeros((3, 2)), np.array([0, 1, 0]))
        assert ds.n_samples == 3
        assert ds.n_classes == 2

    def test_rejects_nan(self):
        logits = np.zeros((3, 2))
        logits[1, 0] = np.nan
        with pytest.raises(ValueError, match="row 1"):
            LogitDataset(logits, np.array([0, 1, 0]))

    def test_rejects_out_of_range_label(self):
        with pytest.raises(ValueError, match="label out of range at row 2"):
            LogitDataset(np.zeros((3, 3)), np.array([0, 1, 5]))

    def test_rejects_single_class(self):
        with pytest.raises(ValueError, match="2 classes"):
            LogitDataset(np.zeros((3, 1)), np.array([0, 0, 0]))


class TestCsvLoading:
    def test_minimal_file(self, tiny_csv):
        ds = load_dataset(tiny_csv)
        assert ds.n_samples == 3
        assert ds.n_classes == 2
        assert list(ds.labels) == [0, 1, 0]

    def test_label_out_of_range_reports_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "logit_0,logit_1,logit_2,label\n0,0,0,1\n0,0,0,5\n", encoding="utf-8"
        )
        with pytest.raises(DatasetFormatError, match="label out of range at row 1"):
            load_dataset(path)

    def test_wrong_column_count_reports_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("logit_0,logit_1,label\n0,0,0\n1,2\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="row 1"):
            load_dataset(path)

    def test_non_finite_reports_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("logit_0,logit_1,label\nnan,0,0\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="row 0"):
            load_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="empty"):
            load_dataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope.csv")


class TestBinaryFormat:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        logits = rng.normal(size=(64, 7)).astype(np.float32).astype(np.float64)
        labels = rng.integers(0, 7, size=64)
        ds = LogitDataset(logits, labels)
        path = tmp_path / "data.bin"
        save_dataset(ds, path, format="binary")
        loaded = load_dataset(path, format="binary")
        assert np.array_equal(loaded.logits, ds.logits)
        assert np.array_equal(loaded.labels, ds.labels)
        # a second save produces identical bytes
        path2 = tmp_path / "data2.bin"
        save_dataset(loaded, path2, format="binary")
        assert path.read_bytes() == path2.read_bytes()

    def test_header_layout(self, tmp_path):
        ds = LogitDataset(np.zeros((2, 3)), np.array([0, 2]))
        path = tmp_path / "data.bin"
        save_dataset(ds, path, format="binary")
        raw = path.read_bytes()
        assert raw[:4] == b"HCAL"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 3
        assert len(raw) == 16 + 4 * 6 + 4 * 2

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"JUNK" + bytes(12))
        with pytest.raises(DatasetFormatError, match="magic"):
            load_dataset(path, format="binary")

    def test_truncated(self, tmp_path, rng):
        ds = LogitDataset(rng.normal(size=(4, 2)), rng.integers(0, 2, 4))
        path = tmp_path / "data.bin"
        save_dataset(ds, path, format="binary")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DatasetFormatError, match="bytes"):
            load_dataset(path, format="binary")

    def test_csv_round_trip_values(self, tmp_path, rng):
        ds = LogitDataset(rng.normal(size=(10, 3)), rng.integers(0, 3, 10))
        path = tmp_path / "data.csv"
        save_dataset(ds, path, format="csv")
        loaded = load_dataset(path)
        assert np.array_equal(loaded.logits, ds.logits)
        assert np.array_equal(loaded.labels, ds.labels)

    def test_benchmark_export_shape(self, tmp_path, rng):
        # the shape of a standard ten-class benchmark test export
        ds = LogitDataset(
            rng.normal(size=(10000, 10)).astype(np.float32).astype(np.float64),
            rng.integers(0, 10, 10000),
        )
        path = tmp_path / "bench.bin"
        save_dataset(ds, path, format="binary")
        loaded = load_dataset(path)
        assert (loaded.n_samples, loaded.n_classes) == (10000, 10)


class TestSoftmaxRows:
    def test_symmetric_row(self):
        out = softmax_rows(np.array([[0.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_extreme_logits_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-9)

    def test_closed_form(self):
        # softmax(ln 1, ln 3) = (1, 3) / 4
        out = softmax_rows(np.log(np.array([[1.0, 3.0]])))
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-12)

    @given(
        st.lists(
            st.lists(st.floats(-500, 500, allow_nan=False), min_size=2, max_size=6),
            min_size=1,
            max_size=20,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    @settings(max_examples=200, deadline=None)
    def test_output_is_valid_prob_matrix(self, rows):
        out = softmax_rows(np.array(rows, dtype=np.float64))
        check_prob_matrix(out)

    def test_prob_matrix_checker_rejects_bad_rows(self):
        with pytest.raises(ValueError, match="sum"):
            check_prob_matrix(np.array([[0.5, 0.4]]))
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            check_prob_matrix(np.array([[1.2, -0.2]]))


class TestSplitDataset:
    def test_even_split_sizes(self, rng):
        ds = LogitDataset(rng.normal(size=(10, 3)), rng.integers(0, 3, 10))
        a, b = split_dataset(ds, 0.5, seed=7)
        assert (a.n_samples, b.n_samples) == (5, 5)

    def test_floor_rule(self, rng):
        ds = LogitDataset(rng.normal(size=(3, 2)), rng.integers(0, 2, 3))
        a, b = split_dataset(ds, 0.9, seed=0)
        assert (a.n_samples, b.n_samples) == (2, 1)  # floor(3 * 0.9) = 2

    def test_deterministic(self, rng):
        ds = LogitDataset(rng.normal(size=(20, 4)), rng.integers(0, 4, 20))
        a1, b1 = split_dataset(ds, 0.3, seed=99)
        a2, b2 = split_dataset(ds, 0.3, seed=99)
        assert np.array_equal(a1.logits, a2.logits)
        assert np.array_equal(b1.labels, b2.labels)

    def test_degenerate_fraction_rejected(self, rng):
        ds = LogitDataset(rng.normal(size=(3, 2)), rng.integers(0, 2, 3))
        with pytest.raises(ValueError, match="empty side"):
            split_dataset(ds, 0.01, seed=0)

    @given(n=st.integers(2, 60), seed=st.integers(0, 2**31), frac_pct=st.integers(5, 95))
    @settings(max_examples=100, deadline=None)
    def test_partition_is_disjoint_and_exhaustive(self, n, seed, frac_pct):
        fraction = frac_pct / 100
        if not 1 <= math.floor(n * fraction) <= n - 1:
            return
        gen = np.random.default_rng(seed)
        ds = LogitDataset(gen.normal(size=(n, 3)), gen.integers(0, 3, n))
        a, b = split_dataset(ds, fraction, seed=seed)
        assert a.n_samples + b.n_samples == n
        rows = {tuple(r) for r in ds.logits}
        rows_out = [tuple(r) for r in np.vstack([a.logits, b.logits])]
        # union as multisets: same count and every row accounted for
        assert len(rows_out) == n
        assert set(rows_out) == rows
