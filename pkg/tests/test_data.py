import numpy as np
import pytest

from delores import data, dsp
from delores.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return data.synth_dataset(out, classes=4, per_class=5, seed=3, splits={"train": 3, "val": 1, "test": 1})


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestManifest:
    def test_happy_path(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", "path,label,split\na.wav,dog,train\nb.wav,cat,val\nc.wav,,test\n")
        m = data.load_manifest(p)
        assert len(m.records) == 3
        assert m.label_map == {"cat": 0, "dog": 1}
        assert m.records[2].label is None
        assert m.resolve(m.records[0]) == tmp_path / "a.wav"

    def test_duplicate_reports_line(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", "path,label,split\na.wav,x,train\nb.wav,x,train\na.wav,y,train\n")
        with pytest.raises(DataError, match=r"m.csv:4: duplicate"):
            data.load_manifest(p)

    def test_same_path_in_other_split_allowed(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", "path,label,split\na.wav,x,train\na.wav,x,test\n")
        assert len(data.load_manifest(p).records) == 2

    def test_unknown_split(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", "path,label,split\na.wav,x,dev\n")
        with pytest.raises(DataError, match=r":2: unknown split"):
            data.load_manifest(p)

    def test_missing_column(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", "path,split\na.wav,train\n")
        with pytest.raises(DataError, match="label"):
            data.load_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            data.load_manifest(tmp_path / "nope.csv")

    def test_write_round_trip(self, tmp_path, synth):
        synth.write(tmp_path / "copy.csv")
        m = data.load_manifest(tmp_path / "copy.csv")
        assert m.records == synth.records and m.label_map == synth.label_map

    def test_labels_of(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", "path,label,split\na.wav,dog,train\nb.wav,,train\n")
        m = data.load_manifest(p)
        assert m.labels_of(m.records[:1]).tolist() == [0]
        with pytest.raises(DataError, match="no label"):
            m.labels_of(m.records)


class TestSynth:
    def test_counts(self, tmp_path):
        m = data.synth_dataset(tmp_path, classes=4, per_class=50, seed=0)
        assert len(m.records) == 200 and m.num_classes == 4
        assert len(list(tmp_path.glob("*.wav"))) == 200
        assert data.load_manifest(tmp_path / "manifest.csv").records == m.records

    def test_split_allocation(self, synth):
        assert [len(synth.split(s)) for s in data.SPLITS] == [12, 4, 4]
        assert len(synth.split(None)) == 20

    def test_seeded(self, tmp_path):
        a = data.synth_dataset(tmp_path / "a", classes=2, per_class=3, seed=9)
        b = data.synth_dataset(tmp_path / "b", classes=2, per_class=3, seed=9)
        for ra, rb in zip(a.records, b.records):
            assert a.resolve(ra).read_bytes() == b.resolve(rb).read_bytes()

    def test_classes_separable(self, synth):
        store = data.FeatureStore(synth)
        peak = {}
        for r in synth.split("train"):
            peak.setdefault(r.label, []).append(int(np.argmax(store.get(r).mean(axis=1))))
        assert set(peak["class00"]).isdisjoint(peak["class03"])

    def test_base_frequencies(self):
        assert [data.class_frequency(k) for k in (0, 2, 4)] == [200.0, 400.0, 800.0]

    def test_invalid(self, tmp_path):
        with pytest.raises(ConfigError):
            data.synth_dataset(tmp_path, classes=1)
        with pytest.raises(ConfigError):
            data.synth_dataset(tmp_path, classes=2, per_class=4, splits={"train": 3})
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataError):
            data.synth_dataset(blocker / "sub", classes=2, per_class=1)

    def test_snr(self):
        rng = np.random.default_rng(0)
        x = data.synth_clip(0, rng)
        assert x.shape == (16000,) and np.abs(x).max() == pytest.approx(0.5)


class TestBatchIter:
    def ten(self, tmp_path):
        return data.synth_dataset(tmp_path, classes=2, per_class=5, seed=1)

    def test_drop_last_in_pretrain(self, tmp_path):
        m = self.ten(tmp_path)
        sizes = [len(b.ids) for b in data.batch_iter(m, "train", 4, 96, "pretrain", np.random.default_rng(0))]
        assert sizes == [4, 4]

    def test_keep_last_in_supervised(self, tmp_path):
        m = self.ten(tmp_path)
        batches = list(data.batch_iter(m, "train", 4, 96, "supervised", np.random.default_rng(0)))
        assert [len(b.ids) for b in batches] == [4, 4, 2]
        assert batches[0].features.shape == (4, 1, 64, 96)
        assert batches[0].labels is not None and batches[0].labels.dtype == np.int64
        ids = [i for b in batches for i in b.ids]
        assert sorted(ids) == sorted(r.id for r in m.records) and len(set(ids)) == 10

    def test_pretrain_is_unlabeled_permutation(self, tmp_path):
        m = self.ten(tmp_path)
        for seed in range(3):
            batches = list(data.batch_iter(m, "train", 5, 96, "pretrain", np.random.default_rng(seed)))
            assert all(b.labels is None for b in batches)
            assert sorted(i for b in batches for i in b.ids) == sorted(r.id for r in m.records)

    def test_seeded_order(self, tmp_path):
        m = self.ten(tmp_path)
        store = data.FeatureStore(m)

        def run():
            return [(b.ids, b.features) for b in
                    data.batch_iter(m, "train", 4, 64, "pretrain", np.random.default_rng(7), store)]

        for (ia, fa), (ib, fb) in zip(run(), run()):
            assert ia == ib
            np.testing.assert_array_equal(fa, fb)

    def test_supervised_fixed_crop_and_pad(self, tmp_path):
        m = self.ten(tmp_path)
        store = data.FeatureStore(m)
        full = store.get(m.records[0])
        assert full.shape == (64, 94)
        b = next(data.batch_iter(m, "train", 1, 96, "supervised", np.random.default_rng(0), store))
        np.testing.assert_array_equal(b.features[0, 0, :, :94], full)
        assert np.all(b.features[0, 0, :, 94:] == np.float32(np.log(1e-10)))
        b = next(data.batch_iter(m, "train", 1, 48, "supervised", np.random.default_rng(0), store))
        np.testing.assert_array_equal(b.features[0, 0], full[:, :48])

    def test_errors(self, tmp_path):
        m = self.ten(tmp_path)
        with pytest.raises(DataError, match="empty"):
            next(data.batch_iter(m, "test", 4, 96, "pretrain", np.random.default_rng(0)))
        with pytest.raises(ConfigError):
            next(data.batch_iter(m, "train", 4, 96, "bogus", np.random.default_rng(0)))
        (tmp_path / m.records[0].path).write_bytes(b"junk")
        with pytest.raises(DataError, match=m.records[0].path):
            list(data.batch_iter(m, "train", 10, 96, "supervised", np.random.default_rng(0)))

    def test_worker_threads_do_not_change_results(self, tmp_path):
        m = self.ten(tmp_path)
        a = [b.features for b in data.batch_iter(m, "train", 4, 96, "pretrain", np.random.default_rng(2),
                                                 data.FeatureStore(m, workers=4))]
        b = [b.features for b in data.batch_iter(m, "train", 4, 96, "pretrain", np.random.default_rng(2),
                                                 data.FeatureStore(m, workers=0))]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestFeatures:
    def test_cache_round_trip(self, tmp_path, synth):
        cached = data.FeatureStore(synth, cache_dir=tmp_path / "cache")
        first = cached.get(synth.records[0])
        assert len(list((tmp_path / "cache").glob("*.dlmf"))) == 1
        again = data.FeatureStore(synth, cache_dir=tmp_path / "cache").get(synth.records[0])
        fresh = data.FeatureStore(synth).get(synth.records[0])
        np.testing.assert_array_equal(again, fresh)
        np.testing.assert_array_equal(first, fresh)

    def test_downstream_frames(self, synth):
        # 1 s clips give 94 frames, rounded to the nearest multiple of 16
        assert dsp.frame_count(16000) == 94
        assert data.downstream_frames(synth) == 96
