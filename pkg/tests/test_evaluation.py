import json

import numpy as np
import pytest

from delores import data, evaluation
from delores.errors import ConfigError, DataError
from delores.evaluation import EvalReport
from delores.model import ClassifierHead, ModelConfig
from delores.optim import AdamConfig

SMALL = ModelConfig(channels=4, hidden=16, proj_dim=32)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return data.synth_dataset(tmp_path_factory.mktemp("task"), classes=4, per_class=12, seed=2,
                              splits={"train": 6, "val": 3, "test": 3})


@pytest.fixture(scope="module")
def task(manifest):
    return evaluation.prepare(manifest)


def encoder(seed=0):
    return evaluation.random_encoder(SMALL, seed)


def arrays_of(enc):
    return {k: v.copy() for k, v in enc.params.arrays().items()}


class TestPrepare:
    def test_splits_and_shapes(self, task):
        assert task.frames == 96 and task.num_classes == 4
        assert {s: x.shape for s, x in task.inputs.items()} == {
            "train": (24, 1, 64, 96), "val": (12, 1, 64, 96), "test": (12, 1, 64, 96)}
        assert np.bincount(task.labels["test"]).tolist() == [3, 3, 3, 3]

    def test_normalized_with_train_stats(self, task):
        x = task.inputs["train"]
        # padding frames sit far below the data, so only check the real region
        real = x[..., :94]
        assert abs(real.mean()) < 0.1 and abs(real.std() - 1) < 0.1

    def test_unlabeled_rejected(self, manifest, tmp_path):
        recs = [data.Record(r.path, None if r.split == "val" else r.label, r.split) for r in manifest.records]
        m = data.Manifest(recs, manifest.label_map, manifest.root)
        with pytest.raises(DataError, match="unlabeled"):
            evaluation.prepare(m)

    def test_needs_train_split(self, manifest):
        m = data.Manifest(manifest.split("val"), manifest.label_map, manifest.root)
        with pytest.raises(DataError):
            evaluation.prepare(m)


class TestEvaluate:
    def test_constant_predictor(self, task):
        head = ClassifierHead(16, 4, zero=True)
        head.params["head.bias"].data[:] = [0, 0, 1, 0]
        assert evaluation.evaluate(encoder(), head, task.inputs["test"], task.labels["test"]) == 0.25

    def test_oracle(self):
        labels = np.array([0, 3, 1, 2, 2])
        logits = np.eye(4)[labels] * 5
        assert evaluation.accuracy(logits, labels) == 1.0

    def test_batch_size_invariant(self, task):
        enc = encoder()
        head = ClassifierHead(16, 4, rng=np.random.default_rng(0))
        accs = {bs: evaluation.evaluate(enc, head, task.inputs["test"], task.labels["test"], bs)
                for bs in (1, 7, 64)}
        assert len(set(accs.values())) == 1
        feats = [evaluation.embed(enc, task.inputs["val"], bs) for bs in (1, 7, 64)]
        for f in feats[1:]:
            np.testing.assert_allclose(f, feats[0], rtol=1e-5, atol=1e-6)

    def test_empty_split(self):
        with pytest.raises(DataError):
            evaluation.accuracy(np.zeros((0, 4)), np.zeros(0, int))
        with pytest.raises(DataError):
            evaluation.evaluate(encoder(), ClassifierHead(16, 4), np.zeros((0, 1, 64, 96), np.float32),
                                np.zeros(0, int))

    def test_head_mismatch(self, task):
        with pytest.raises(ConfigError):
            evaluation.linear_probe(encoder(), task, AdamConfig(max_epochs=1), head=ClassifierHead(16, 3))


class TestProtocols:
    def test_probe_leaves_encoder_untouched(self, task):
        enc = encoder()
        before = arrays_of(enc)
        feats = evaluation.embed(enc, task.inputs["train"])
        evaluation.linear_probe(enc, task, AdamConfig(max_epochs=5))
        for k, v in enc.params.arrays().items():
            assert v.tobytes() == before[k].tobytes(), k
        np.testing.assert_array_equal(evaluation.embed(enc, task.inputs["train"]), feats)

    def test_zero_epochs_is_untrained_baseline(self, task):
        for run in (evaluation.linear_probe, evaluation.finetune):
            r = run(encoder(), task, AdamConfig(max_epochs=0))
            assert r.accuracy["test"] == 0.25 and r.best_epoch == 0 and r.epochs_run == 0

    def test_probe_learns(self, task):
        r = evaluation.linear_probe(encoder(), task, AdamConfig(max_epochs=30), init="random")
        assert r.protocol == "linear" and r.init == "random"
        assert r.history[1]["train"] >= 0.25
        assert r.accuracy["val"] > 0.5
        assert len(r.history) == 31
        assert r.accuracy["val"] == max(h["val"] for h in r.history)

    def test_selection_restores_best_head(self, task):
        enc = encoder()
        head = ClassifierHead(16, 4, zero=True)
        r = evaluation.linear_probe(enc, task, AdamConfig(max_epochs=10), head=head)
        assert evaluation.evaluate(enc, head, task.inputs["val"], task.labels["val"]) == r.accuracy["val"]

    def test_finetune_trains_encoder(self, task):
        enc = encoder()
        before = arrays_of(enc)
        fine = evaluation.finetune(enc, task, AdamConfig(max_epochs=10))
        assert fine.protocol == "finetune"
        assert fine.accuracy["val"] == max(h["val"] for h in fine.history)
        changed = [k for k, v in enc.params.arrays().items() if not np.array_equal(v, before[k])]
        assert changed if fine.best_epoch > 0 else not changed

    def test_finetune_restores_best_encoder(self, task):
        enc = encoder()
        head = ClassifierHead(16, 4, zero=True)
        r = evaluation.finetune(enc, task, AdamConfig(max_epochs=4), head=head)
        assert evaluation.evaluate(enc, head, task.inputs["test"], task.labels["test"]) == r.accuracy["test"]

    def test_seeded(self, task):
        a = evaluation.finetune(encoder(), task, AdamConfig(max_epochs=2), seed=3)
        b = evaluation.finetune(encoder(), task, AdamConfig(max_epochs=2), seed=3)
        assert a.history == b.history


class TestReport:
    def report(self):
        return EvalReport("toy", "linear", "random", {"train": 1.0, "val": 0.5, "test": 0.25}, 3, 2)

    def test_json_round_trip(self, tmp_path):
        r = self.report()
        r.to_json(tmp_path / "r.json")
        d = json.loads((tmp_path / "r.json").read_text())
        assert d["protocol"] == "linear" and EvalReport.from_dict(d) == r

    def test_table(self):
        lines = self.report().table().splitlines()
        assert lines[0].split() == ["task", "protocol", "init", "train", "val", "test", "best_epoch"]
        assert lines[2].split() == ["toy", "linear", "random", "100.0", "50.0", "25.0", "2"]

    def test_accuracy_range(self):
        with pytest.raises(ValueError):
            EvalReport("t", "linear", "random", {"test": 1.5}, 1, 1)
