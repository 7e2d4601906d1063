import numpy as np
import pandas as pd
import pytest

from analysis.probe import Probe, ProbeHyper, eval_probe, probe_accuracy_curve, probe_path, save_accuracy_curve, train_probe
from core.errors import ArgumentError, FormatError, TrainingError
from core.weights_io import save_weights
from traces.dataset import ProbeDataset

FAST = ProbeHyper(learning_rate=1e-2, max_steps=600, eval_every=25, val_size=100, patience=20)


def _separable(rng, n=400, d=8, layer=0):
    y = rng.integers(0, 2, size=n)
    x = rng.standard_normal((n, d)).astype(np.float32)
    x[:, 0] += np.where(y == 1, 2.5, -2.5)
    return ProbeDataset(x=x, y=y.astype(np.int64), layer=layer)


def test_probe_separates_separable_data(rng):
    probe = train_probe(_separable(rng), FAST)
    assert probe.W.shape == (2, 8)
    assert probe.val_accuracy > 0.95
    fresh = _separable(np.random.default_rng(99), n=1000)
    assert eval_probe(probe, fresh) > 0.95
    # the "this" row leans along the separating axis
    assert probe.valid_direction[0] > probe.invalid_direction[0]


def test_probe_needs_both_labels(rng):
    data = _separable(rng)
    only_valid = data.subset(np.flatnonzero(data.y == 1))
    with pytest.raises(TrainingError):
        train_probe(only_valid, FAST)


def test_shuffled_labels_give_chance_accuracy(rng):
    data = _separable(rng)
    data.y = rng.permutation(data.y)
    probe = train_probe(data, FAST)
    held_out = _separable(np.random.default_rng(7), n=4000)
    held_out.y = np.random.default_rng(8).integers(0, 2, size=4000)
    assert abs(eval_probe(probe, held_out) - 0.5) < 0.06


def test_eval_probe_rejects_empty():
    probe = Probe(layer=0, W=np.ones((2, 3), dtype=np.float32))
    empty = ProbeDataset(x=np.zeros((0, 3), dtype=np.float32), y=np.zeros(0, dtype=np.int64), layer=0)
    with pytest.raises(ArgumentError):
        eval_probe(probe, empty)


def test_probe_save_and_load(tmp_path, rng):
    probe = Probe(layer=3, W=rng.standard_normal((2, 8)).astype(np.float32), val_accuracy=0.75)
    path = probe_path(str(tmp_path), 3)
    probe.save(path, digest="abc")
    loaded = Probe.load(path)
    assert loaded.layer == 3
    assert loaded.val_accuracy == pytest.approx(0.75)
    assert np.array_equal(loaded.W, probe.W)


def test_probe_load_rejects_other_containers(tmp_path, tiny_model):
    path = str(tmp_path / "model.vsw")
    save_weights(tiny_model.weights, path)
    with pytest.raises(FormatError):
        Probe.load(path)


def test_accuracy_curve(tmp_path, rng):
    datasets = {0: _separable(rng, layer=0), 1: _separable(rng, layer=1)}
    probes, rows = probe_accuracy_curve(datasets, FAST)
    assert sorted(probes) == [0, 1]
    assert [r["layer"] for r in rows] == [0, 1]
    path = tmp_path / "accuracy.csv"
    save_accuracy_curve(rows, str(path))
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["layer", "examples", "valid_share", "val_accuracy"]
    assert (frame["val_accuracy"] > 0.9).all()
