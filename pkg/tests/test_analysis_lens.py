import numpy as np
import pandas as pd
import pytest

from analysis.lens import (
    aggregate_lens,
    default_steer_layers,
    logit_lens,
    marker_margin,
    steer_generate,
    steer_markers,
)
from core import numerics
from core.errors import ArgumentError, DataError
from core.model import ForwardOptions
from countdown import tokenizer as tok
from traces.capture import capture
from traces.trace import CaptureField


@pytest.fixture
def hidden_trace(tiny_model, transcript):
    return capture(tiny_model, transcript.tokens, [CaptureField.HIDDEN_STATES])


def test_final_layer_lens_matches_model_output(tiny_model, transcript, hidden_trace):
    logits, _ = tiny_model.forward(transcript.tokens)
    last = tiny_model.config.n_layers - 1
    for t in (0, transcript.t_valid[0], len(transcript.tokens) - 1):
        lens = logit_lens(tiny_model, hidden_trace, last, t)
        assert np.max(np.abs(lens - numerics.softmax_rows(logits[t:t + 1])[0])) < 1e-5
        assert lens.sum() == pytest.approx(1.0, abs=1e-5)


def test_lens_index_errors(tiny_model, hidden_trace, transcript):
    with pytest.raises(IndexError):
        logit_lens(tiny_model, hidden_trace, tiny_model.config.n_layers, 0)
    with pytest.raises(IndexError):
        logit_lens(tiny_model, hidden_trace, 0, len(transcript.tokens))


def test_lens_needs_hidden_states(tiny_model, transcript):
    glu_only = capture(tiny_model, transcript.tokens, [CaptureField.GLU_ACTIVATIONS])
    with pytest.raises(DataError):
        logit_lens(tiny_model, glu_only, 0, 0)


def test_aggregate_lens(tmp_path, tiny_model, tokenizer, hidden_trace, transcript):
    report = aggregate_lens(tiny_model, [hidden_trace, hidden_trace], [transcript.t_valid, []], top_k=3,
                            timestep_class="valid")
    assert report.samples == 1
    assert sorted(report.top) == list(range(tiny_model.config.n_layers))
    for layer, top in report.top.items():
        probs = [p for _, p in top]
        assert len(top) == 3
        assert probs == sorted(probs, reverse=True)
        expected = logit_lens(tiny_model, hidden_trace, layer, transcript.t_valid[0])
        assert top[0][1] == pytest.approx(float(expected.max()), rel=1e-5)
    path = tmp_path / "lens_valid.csv"
    report.save(str(path), tokenizer)
    frame = pd.read_csv(path, keep_default_na=False)
    assert list(frame.columns) == ["layer", "rank", "token_id", "token", "mean_probability"]
    assert len(frame) == 3 * tiny_model.config.n_layers


def test_aggregate_lens_errors(tiny_model, hidden_trace):
    with pytest.raises(DataError):
        aggregate_lens(tiny_model, [hidden_trace], [[]])
    with pytest.raises(DataError):
        aggregate_lens(tiny_model, [hidden_trace], [])


def test_default_steer_layers():
    assert default_steer_layers(6) == (4, 5)
    assert default_steer_layers(2) == (1,)
    assert default_steer_layers(1) == (0,)


def test_zero_alpha_steer_generate_is_plain_generation(tiny_model, transcript):
    prompt = transcript.tokens[: transcript.prompt_len]
    vector = np.ones(tiny_model.config.d_model, dtype=np.float32)
    assert steer_generate(tiny_model, prompt, vector, alpha=0.0, max_new=6) == tiny_model.generate(prompt, 6)


def test_steering_argument_errors(tiny_model, transcript):
    prompt = transcript.tokens[: transcript.prompt_len]
    with pytest.raises(ArgumentError):
        steer_generate(tiny_model, prompt, np.ones(3), max_new=2)
    with pytest.raises(ArgumentError):
        steer_generate(tiny_model, prompt, np.ones(tiny_model.config.d_model), layers=[], max_new=2)


def test_steering_only_touches_generated_positions(tiny_model, transcript):
    prompt = transcript.tokens[: transcript.prompt_len]
    vector = np.ones(tiny_model.config.d_model, dtype=np.float32)
    out = steer_generate(tiny_model, prompt, vector, alpha=50.0, max_new=3)
    assert out[: len(prompt)] == prompt
    assert len(out) == len(prompt) + 3


def test_steer_markers_along_unembedding_difference(tiny_model, tokenizer, transcript):
    embed = tiny_model.weights["embed"]
    direction = embed[:, tokenizer.token_id(tok.VALID_WORD)] - embed[:, tokenizer.token_id(tok.INVALID_WORD)]
    last = (tiny_model.config.n_layers - 1,)
    report = steer_markers(tiny_model, [transcript], tokenizer, direction, layers=last, alpha=1000.0)
    assert report.markers == len(transcript.t_invalid)
    assert all(m > 0 for m in report.margins_after)
    assert report.summary()["mean_margin_shift"] > 0

    backwards = steer_markers(tiny_model, [transcript], tokenizer, -direction, layers=last, alpha=1000.0,
                              toward_valid=False)
    assert backwards.markers == len(transcript.t_valid)
    assert all(m < 0 for m in backwards.margins_after)


def test_marker_margin(tiny_model, tokenizer, transcript):
    logits, _ = tiny_model.forward(transcript.tokens, ForwardOptions())
    row = logits[transcript.t_valid[0]]
    expected = row[tokenizer.token_id("this")] - row[tokenizer.token_id("not")]
    assert marker_margin(row, tokenizer) == pytest.approx(float(expected))
