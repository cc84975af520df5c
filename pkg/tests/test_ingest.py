import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmae.errors import ConfigError, DataFormatError
from stmae.ingest import (
    DatasetManifest,
    ManifestEntry,
    RoiTimeSeries,
    SynthSpec,
    load_manifest,
    load_timeseries,
    sample_segment,
    save_timeseries,
    split_folds,
    synth_dataset,
)


class TestLoadTimeseries:
    def test_basic_parse(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("1,2,3\n4,5,6\n")
        ts = load_timeseries(f)
        assert ts.N == 2 and ts.T_max == 3
        np.testing.assert_array_equal(ts.P, [[1, 2, 3], [4, 5, 6]])

    def test_ragged_rows_name_the_row(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("1,2,3\n4,5,6,7\n")
        with pytest.raises(DataFormatError, match="row 2"):
            load_timeseries(f)

    def test_non_numeric_cell_names_row_and_col(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("1,2,3\n4,x,6\n")
        with pytest.raises(DataFormatError, match="row 2, column 2"):
            load_timeseries(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="not found"):
            load_timeseries(tmp_path / "nope.csv")

    def test_non_finite_rejected(self, tmp_path):
        f = tmp_path / "a.csv"
        f.write_text("1,2,inf\n4,5,6\n")
        with pytest.raises(DataFormatError, match="non-finite"):
            load_timeseries(f)

    def test_roundtrip_byte_identical(self, tmp_path):
        # write-then-read oracle: canonical formatting is a fixed point
        rng = np.random.default_rng(7)
        for trial in range(5):
            ts = RoiTimeSeries(f"s{trial}", rng.standard_normal((4, 9)) * 10**trial)
            f1 = tmp_path / f"t{trial}a.csv"
            f2 = tmp_path / f"t{trial}b.csv"
            save_timeseries(ts, f1)
            save_timeseries(load_timeseries(f1), f2)
            assert f1.read_bytes() == f2.read_bytes()


class TestSynthDataset:
    def test_deterministic_files(self, tmp_path):
        m1 = synth_dataset(10, 8, 120, seed=0, out_dir=tmp_path / "a")
        m2 = synth_dataset(10, 8, 120, seed=0, out_dir=tmp_path / "b")
        for e1, e2 in zip(m1.entries, m2.entries):
            b1 = (tmp_path / "a" / e1.path).read_bytes()
            b2 = (tmp_path / "b" / e2.path).read_bytes()
            assert b1 == b2
        assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == \
               (tmp_path / "b" / "manifest.jsonl").read_bytes()

    def test_class_balance(self, tmp_path):
        m = synth_dataset(11, 8, 120, seed=3, out_dir=tmp_path)
        classes = [e.labels["class"] for e in m.entries]
        assert abs(classes.count(0) - classes.count(1)) <= 1

    def test_manifest_roundtrip(self, tmp_path):
        m = synth_dataset(4, 8, 120, seed=1, out_dir=tmp_path)
        loaded = load_manifest(tmp_path / "manifest.jsonl")
        assert loaded.subject_ids() == m.subject_ids()
        ts = loaded.load_series(loaded.entries[0])
        assert ts.N == 8 and ts.T_max == 120

    def test_community_count_validated(self, tmp_path):
        with pytest.raises(ConfigError, match="community count"):
            synth_dataset(4, 4, 120, seed=0, spec=SynthSpec(n_communities=8),
                          out_dir=tmp_path)

    def test_zero_contrast_labels_uninformative(self, tmp_path):
        # Monte-Carlo: class-conditional mean static FC should coincide
        from stmae.dynfc import pearson_fc

        spec = SynthSpec(class_contrast=0.0)
        m = synth_dataset(240, 16, 1500, seed=11, spec=spec, out_dir=tmp_path)
        sums = {0: np.zeros((16, 16)), 1: np.zeros((16, 16))}
        counts = {0: 0, 1: 0}
        for e in m.entries:
            ts = m.load_series(e)
            y = e.labels["class"]
            sums[y] += pearson_fc(ts.P)
            counts[y] += 1
        diff = np.abs(sums[0] / counts[0] - sums[1] / counts[1]).max()
        assert diff < 0.02

    def test_contrast_makes_task_learnable(self, tmp_path):
        # brute-force baseline: logistic regression on static mean-FC upper
        # triangle must separate classes well at the default contrast
        from sklearn.linear_model import LogisticRegression

        from stmae.dynfc import pearson_fc
        from stmae.metrics import auroc

        m = synth_dataset(200, 64, 200, seed=5, out_dir=tmp_path)
        iu = np.triu_indices(64, k=1)
        X, y = [], []
        for e in m.entries:
            ts = m.load_series(e)
            X.append(pearson_fc(ts.P)[iu])
            y.append(e.labels["class"])
        X, y = np.array(X), np.array(y)
        clf = LogisticRegression(max_iter=2000).fit(X[:120], y[:120])
        scores = clf.decision_function(X[120:])
        assert auroc(scores, y[120:]) > 0.8


class TestSplitFolds:
    def _manifest(self, classes):
        entries = [ManifestEntry(f"s{i}", f"s{i}.csv", {"class": c})
                   for i, c in enumerate(classes)]
        return DatasetManifest(entries)

    def test_balanced_binary_exact(self):
        m = self._manifest([0] * 5 + [1] * 5)
        split = split_folds(m, k=5, seed=0)
        for f in range(5):
            ids = split.test_ids(f)
            classes = [m.entries[int(s[1:])].labels["class"] for s in ids]
            assert sorted(classes) == [0, 1]

    def test_pigeonhole_sizes(self):
        m = self._manifest([0, 1, 0, 1, 0, 1, 0, 1, 0])
        split = split_folds(m, k=2, seed=0)
        sizes = sorted(len(split.test_ids(f)) for f in range(2))
        assert sizes == [4, 5]

    def test_deterministic(self):
        m = self._manifest([0, 1] * 6)
        assert split_folds(m, 3, seed=9).assignments == split_folds(m, 3, seed=9).assignments

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            split_folds(self._manifest([0, 1]), k=3, seed=0)

    @given(n=st.integers(4, 40), k=st.integers(2, 4), seed=st.integers(0, 10))
    @settings(max_examples=30, deadline=None)
    def test_partition_properties(self, n, k, seed):
        if k > n:
            return
        m = self._manifest([i % 2 for i in range(n)])
        split = split_folds(m, k, seed)
        all_ids = sorted(sum((split.test_ids(f) for f in range(k)), []))
        assert all_ids == sorted(m.subject_ids())  # union = everything, disjoint


class TestSampleSegment:
    def test_full_length_offset_zero(self):
        ts = RoiTimeSeries("s", np.arange(12.0).reshape(3, 4))
        seg, s = sample_segment(ts, 4, np.random.default_rng(0))
        assert s == 0
        np.testing.assert_array_equal(seg.P, ts.P)

    def test_two_offset_frequencies(self):
        ts = RoiTimeSeries("s", np.arange(20.0).reshape(2, 10))
        rng = np.random.default_rng(42)
        offsets = [sample_segment(ts, 9, rng)[1] for _ in range(1000)]
        freq0 = offsets.count(0) / 1000
        assert set(offsets) == {0, 1}
        assert abs(freq0 - 0.5) < 0.05

    def test_slice_matches_reported_offset(self):
        ts = RoiTimeSeries("s", np.random.default_rng(1).standard_normal((3, 30)))
        rng = np.random.default_rng(2)
        for _ in range(20):
            seg, s = sample_segment(ts, 7, rng)
            np.testing.assert_array_equal(seg.P, ts.P[:, s:s + 7])

    def test_too_long_instructs_caller(self):
        ts = RoiTimeSeries("s", np.zeros((2, 5)))
        with pytest.raises(ConfigError, match="pad.*or skip"):
            sample_segment(ts, 6, np.random.default_rng(0))
