import math

import numpy as np
import pandas as pd
import pytest

from core.errors import ArgumentError, DataError, LengthError
from core.model import ModelConfig, TransformerModel, init_weights
from countdown.corpus import build_corpus
from training.backprop import batch_loss, next_token_loss
from training.grad_check import grad_check, relative_error
from training.trainer import LossReport, TrainConfig, Trainer, marker_accuracy, save_history


@pytest.fixture(scope="module")
def grad_model():
    config = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_head=4, d_glu=16, vocab_size=12, max_seq_len=16)
    return TransformerModel(init_weights(config, seed=1))


@pytest.fixture(scope="module")
def small_corpus(tokenizer):
    return build_corpus(0, 12, tokenizer, n_failures_max=1)


def test_analytic_gradients_match_finite_differences(grad_model):
    tokens = [int(t) for t in np.random.default_rng(2).integers(0, 12, size=10)]
    report = grad_check(grad_model, tokens, coords_per_family=40)
    assert report.max_relative_error < 1e-4, report.per_family
    assert {"embed", "pos", "w_q", "w_k", "w_v", "w_o", "w_gate", "w_up", "w_out", "final_norm"} <= set(report.per_family)


def test_grad_check_with_masked_prompt(grad_model):
    tokens = [int(t) for t in np.random.default_rng(3).integers(0, 12, size=10)]
    report = grad_check(grad_model, tokens, coords_per_family=20, completion_start=5)
    assert report.max_relative_error < 1e-4


def test_grad_check_refuses_large_models(tiny_model):
    wide = TransformerModel(init_weights(ModelConfig(n_layers=1, d_model=32, n_heads=2, d_head=16,
                                                     d_glu=8, vocab_size=12, max_seq_len=8), seed=0))
    with pytest.raises(ArgumentError):
        grad_check(wide, [1, 2, 3])


def test_relative_error_uses_floor():
    assert relative_error(1e-6, 0.0) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_gradient_step_reduces_loss(tiny_model, transcript):
    model = TransformerModel(tiny_model.weights.copy())
    loss, grads = next_token_loss(model, transcript.tokens, transcript.prompt_len)
    for name, tensor in model.weights.items():
        tensor -= np.float32(1e-2) * grads[name]
    after, _ = next_token_loss(model, transcript.tokens, transcript.prompt_len)
    assert after < loss
    assert batch_loss(model, [(transcript.tokens, transcript.prompt_len)]) == pytest.approx(after, rel=1e-5)


def test_loss_needs_two_tokens(tiny_model):
    with pytest.raises(LengthError):
        next_token_loss(tiny_model, [1])


def test_default_optimiser_is_plain_sgd_with_weight_decay(tiny_config, tokenizer):
    config = TrainConfig()
    assert config.momentum == 0.0 and config.clip_norm == 0.0
    trainer = Trainer(tiny_config, config, tokenizer)
    weights = init_weights(tiny_config, seed=2)
    before = weights.copy()
    rng = np.random.default_rng(5)
    grads = {name: (10.0 * rng.standard_normal(t.shape)).astype(np.float32) for name, t in weights.items()}
    velocity = {name: np.ones_like(t) for name, t in weights.items()}
    trainer._apply(weights, grads, velocity)
    lr, wd = np.float32(config.learning_rate), np.float32(config.weight_decay)
    for name, tensor in weights.items():
        w, g = before[name], grads[name]
        expected = w - lr * g if name.endswith("norm") else w - lr * (g + wd * w)
        assert np.allclose(tensor, expected, rtol=1e-6, atol=1e-7), name


@pytest.mark.parametrize("overrides", [
    {"learning_rate": 0}, {"batch_size": 0}, {"momentum": 1.0}, {"weight_decay": -1}, {"clip_norm": -1.0},
])
def test_train_config_validation(overrides):
    with pytest.raises(ArgumentError):
        TrainConfig(**overrides).validate()


def test_train_config_from_section_ignores_unknown_and_null():
    config = TrainConfig.from_section({"max_steps": 7, "eval_every": None, "unrelated": 1})
    assert config.max_steps == 7
    assert config.eval_every == TrainConfig().eval_every


def test_trainer_rejects_empty_corpus(tiny_config, tokenizer):
    with pytest.raises(DataError):
        Trainer(tiny_config, TrainConfig(), tokenizer).train([], [])


def test_short_training_run(tiny_config, tokenizer, small_corpus):
    config = TrainConfig(max_steps=3, eval_every=1, batch_size=2, eval_generations=1, max_new_tokens=4)
    reports = []
    weights, history = Trainer(tiny_config, config, tokenizer).train(
        small_corpus.split("train"), small_corpus.split("val"), on_eval=reports.append
    )
    assert [r.step for r in history] == [1, 2, 3]
    assert reports == history
    assert all(math.isfinite(r.train_loss) and math.isfinite(r.val_loss) for r in history)
    assert all(0.0 <= r.format_accuracy <= 1.0 for r in history)
    assert not weights.equals(init_weights(tiny_config, config.seed))


def test_training_is_deterministic_across_thread_counts(tiny_config, tokenizer, small_corpus):
    config = TrainConfig(max_steps=2, eval_every=2, batch_size=4, eval_generations=0)
    single, _ = Trainer(tiny_config, config, tokenizer, threads=1).train(small_corpus.split("train"), [])
    pooled, _ = Trainer(tiny_config, config, tokenizer, threads=3).train(small_corpus.split("train"), [])
    assert single.equals(pooled)


def test_marker_accuracy_range(tiny_model, small_corpus):
    accuracy = marker_accuracy(tiny_model, small_corpus.split("train"))
    assert 0.0 <= accuracy <= 1.0


def test_save_history(tmp_path):
    history = [LossReport(1, 2.5, 2.6, 0.0, 0.5), LossReport(2, 2.0, 2.1, 0.25, 0.75)]
    path = tmp_path / "training_log.csv"
    save_history(history, str(path))
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["step", "train_loss", "val_loss", "format_accuracy", "marker_accuracy"]
    assert frame["step"].tolist() == [1, 2]
