import csv

import numpy as np
import pytest

import cpnorm.train as T
from cpnorm.data import Dataset
from cpnorm.nn import LayerSpec, build_model
from cpnorm.train import LambdaRecorder, TrainConfig, evaluate, train, write_lambda_histogram, write_metrics


def tiny_model(seed=0):
    specs = [
        LayerSpec("flatten", "f"),
        LayerSpec("linear", "l1", in_features=16, out_features=8, normalization="cp", rank=3),
        LayerSpec("relu", "r"),
        LayerSpec("linear", "l2", in_features=8, out_features=3),
    ]
    return build_model(specs, (1, 4, 4), seed=seed)


def tiny_data(n=48, seed=0, split="train"):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, 1, 4, 4)).astype(np.float32), rng.integers(0, 3, n), split)


class TestTrain:
    def test_history_and_steps(self):
        m = tiny_model()
        res = train(m, tiny_data(), TrainConfig(epochs=2, batch_size=16), tiny_data(12, 1, "val"))
        assert [(r["epoch"], r["split"]) for r in res.history] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
        assert len(res.step_losses) == 6 and res.epochs_run == res.best_epoch == 2

    def test_early_stopping_restores_best(self, monkeypatch):
        scripted = iter([50.0, 60.0, 55.0, 40.0, 70.0])
        monkeypatch.setattr(T, "evaluate", lambda model, ds: (1.0, next(scripted)))
        m = tiny_model()
        snapshots = {}

        def on_epoch(epoch, model, rows):
            snapshots[epoch] = [a.copy() for _, a in model.parameters()]

        res = train(m, tiny_data(), TrainConfig(epochs=5, batch_size=16, patience=2),
                    tiny_data(12, 1, "val"), on_epoch=on_epoch)
        assert res.stopped_early and res.epochs_run == 4 and res.best_epoch == 2
        for a, (_, b) in zip(snapshots[2], m.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_evaluate_disables_dropout(self):
        m = tiny_model()
        ds = tiny_data(20, 2, "test")
        assert evaluate(m, ds) == evaluate(m, ds)
        loss, acc = evaluate(m, ds, batch_size=7)
        assert 0 <= acc <= 100 and loss > 0

    def test_lambda_recorder(self, tmp_path):
        rec = LambdaRecorder(every=2)
        m = tiny_model()
        train(m, tiny_data(), TrainConfig(epochs=1, batch_size=16), on_step=rec)
        rec.write(tmp_path / "l.csv", "l1")
        with open(tmp_path / "l.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "sigma", "lambda_0", "lambda_1", "lambda_2"]
        assert [r[0] for r in rows[1:]] == ["0", "2"]

    def test_metrics_file(self, tmp_path):
        write_metrics(tmp_path / "m.csv", [{"epoch": 1, "split": "test", "loss": 0.5, "accuracy": 90.0}])
        assert (tmp_path / "m.csv").read_text().splitlines() == ["epoch,split,loss,accuracy", "1,test,0.5,90.0"]

    def test_histogram(self, tmp_path):
        write_lambda_histogram(tmp_path / "h.csv", np.ones(5), np.linspace(-1, 2, 5), bins=4)
        with open(tmp_path / "h.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 5
        assert sum(int(r[-2]) for r in rows[1:]) == 5 and sum(int(r[-1]) for r in rows[1:]) == 5

    def test_unknown_optimizer(self):
        with pytest.raises(ValueError):
            train(tiny_model(), tiny_data(), TrainConfig(optimizer="nope"))
