import numpy as np
import pytest

from core.errors import ArgumentError, ArtifactIOError, FormatError, LengthError, ShapeError, VocabularyError
from core.model import ForwardOptions, HeadId, ModelConfig, Steering, TransformerModel, init_weights
from core.weights_io import load_weights, read_container, save_weights, weights_digest, write_container
from traces.trace import CaptureField


def _tokens(model, n=12, seed=0):
    return [int(t) for t in np.random.default_rng(seed).integers(0, model.config.vocab_size, size=n)]


def test_config_validation():
    with pytest.raises(ArgumentError):
        ModelConfig(n_layers=1, d_model=10, n_heads=3, d_head=3).validate()
    with pytest.raises(ArgumentError):
        ModelConfig(n_layers=0).validate()


def test_head_id_round_trip():
    head = HeadId(3, 1)
    assert str(head) == "L3H1"
    assert HeadId.parse("L3H1") == head
    with pytest.raises(ArgumentError):
        HeadId.parse("layer3")
    with pytest.raises(ArgumentError):
        HeadId(5, 0).check(ModelConfig())


def test_glu_output_is_sum_of_weighted_out_rows():
    rng = np.random.default_rng(0)
    for trial in range(100):
        d = int(rng.integers(2, 9)) * 2
        config = ModelConfig(n_layers=1, d_model=d, n_heads=2, d_head=d // 2,
                             d_glu=int(rng.integers(2, 33)), vocab_size=8, max_seq_len=8)
        model = TransformerModel(init_weights(config, seed=trial))
        x = rng.standard_normal((5, d)).astype(np.float32)
        out, m = model.glu_forward(0, x)
        w_out = model.weights.layer(0, "w_out")
        manual = sum(m[:, j:j + 1] * w_out[j][None, :] for j in range(config.d_glu))
        assert np.max(np.abs(out - manual)) < 1e-5


def test_glu_forward_shape_check(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.glu_forward(0, np.ones((2, 3), dtype=np.float32))


def test_forward_shapes_and_capture(tiny_model):
    tokens = _tokens(tiny_model)
    opts = ForwardOptions(capture=frozenset(CaptureField))
    logits, trace = tiny_model.forward(tokens, opts)
    c = tiny_model.config
    assert logits.shape == (len(tokens), c.vocab_size)
    assert trace.hidden.shape == (c.n_layers, len(tokens), c.d_model)
    assert trace.attention.shape == (c.n_layers, c.n_heads, len(tokens), len(tokens))
    assert trace.glu.shape == (c.n_layers, len(tokens), c.d_glu)
    assert trace.attention_row_error() < 1e-5
    # causal: no mass above the diagonal
    assert np.all(np.triu(trace.attention[0, 0], k=1) == 0)


def test_forward_is_causal(tiny_model):
    tokens = _tokens(tiny_model)
    full, _ = tiny_model.forward(tokens)
    prefix, _ = tiny_model.forward(tokens[:6])
    assert np.allclose(full[:6], prefix, atol=1e-5)


def test_attention_head_forward_matches_layer_zero(tiny_model):
    tokens = _tokens(tiny_model)
    _, trace = tiny_model.forward(tokens, ForwardOptions(capture=frozenset({CaptureField.ATTENTION_PATTERNS})))
    w = tiny_model.weights
    x = w["embed"][:, tokens].T + w["pos"][: len(tokens)]
    h, _ = tiny_model._norm(x, "layers.0.attn_norm")
    _, pattern = tiny_model.attention_head_forward(h, HeadId(0, 1))
    assert np.allclose(pattern, trace.attention[0, 1], atol=1e-6)


def test_token_and_length_errors(tiny_model):
    with pytest.raises(VocabularyError):
        tiny_model.forward([0, tiny_model.config.vocab_size])
    with pytest.raises(LengthError):
        tiny_model.forward([0] * (tiny_model.config.max_seq_len + 1))
    with pytest.raises(LengthError):
        tiny_model.generate([0] * 10, tiny_model.config.max_seq_len)


def test_cached_generation_matches_full_recomputation(tiny_model):
    prompt = _tokens(tiny_model, n=8, seed=4)
    generated = tiny_model.generate(prompt, 10)
    assert generated[:8] == prompt
    assert len(generated) == 18
    logits, _ = tiny_model.forward(generated[:-1])
    for i in range(len(prompt) - 1, len(generated) - 1):
        assert int(np.argmax(logits[i])) == generated[i + 1]


def test_generation_stops_at_stop_token(tiny_model):
    prompt = _tokens(tiny_model, n=8, seed=4)
    first = tiny_model.generate(prompt, 1)[-1]
    assert tiny_model.generate(prompt, 10, stop_token=first) == prompt + [first]


def test_zero_alpha_steering_is_bit_identical(tiny_model):
    prompt = _tokens(tiny_model, n=8, seed=5)
    steer = Steering(layers=(0, 1), vector=np.ones(tiny_model.config.d_model, dtype=np.float32), alpha=0.0)
    plain = tiny_model.generate(prompt, 12)
    assert tiny_model.generate(prompt, 12, ForwardOptions(steer=steer)) == plain
    base, _ = tiny_model.forward(prompt)
    steered, _ = tiny_model.forward(prompt, ForwardOptions(steer=steer))
    assert np.array_equal(base, steered)


def test_steering_layer_outside_model(tiny_model):
    steer = Steering(layers=(7,), vector=np.ones(tiny_model.config.d_model), alpha=1.0)
    with pytest.raises(ArgumentError):
        tiny_model.forward([1, 2], ForwardOptions(steer=steer))


def test_ov_and_qk_circuits(tiny_model):
    head = HeadId(1, 0)
    d = tiny_model.config.d_model
    assert tiny_model.ov_circuit(head).shape == (d, d)
    assert tiny_model.qk_circuit(head).shape == (d, d)
    assert len(tiny_model.heads) == tiny_model.config.n_layers * tiny_model.config.n_heads


def test_weights_save_load_round_trip(tmp_path, tiny_model):
    path = str(tmp_path / "model.vsw")
    save_weights(tiny_model.weights, path, digest="abc")
    loaded = load_weights(path)
    assert loaded.equals(tiny_model.weights)
    assert loaded.config == tiny_model.config
    assert weights_digest(path) == "abc"


def test_weights_truncated_blob(tmp_path, tiny_model):
    path = str(tmp_path / "model.vsw")
    save_weights(tiny_model.weights, path)
    blob = path + ".bin"
    with open(blob, "rb") as f:
        data = f.read()
    with open(blob, "wb") as f:
        f.write(data[:100])
    with pytest.raises(ArtifactIOError):
        load_weights(path)


def test_container_rejects_bad_header_and_shape(tmp_path, tiny_model):
    path = str(tmp_path / "bad.vsw")
    with open(path, "w") as f:
        f.write("NOTAVSCOPE\n")
    with pytest.raises(FormatError):
        read_container(path)

    wrong = str(tmp_path / "wrong.vsw")
    write_container(wrong, {"embed": np.zeros((3, 3))}, {"kind": "model", "config": tiny_model.config.to_dict()})
    with pytest.raises(FormatError, match="embed"):
        load_weights(wrong)
