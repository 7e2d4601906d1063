"""
Shared fixtures: tokenizer, tiny model configurations, seeded generators
"""

import numpy as np
import pytest

from config.config_manager import ConfigManager
from core.model import ModelConfig, TransformerModel, init_weights
from countdown.instances import Instance
from countdown.tokenizer import Tokenizer
from countdown.transcript import synthesize_transcript


@pytest.fixture(scope="session")
def tokenizer():
    return Tokenizer()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_config(tokenizer):
    return ModelConfig(
        n_layers=2, d_model=16, n_heads=2, d_head=8, d_glu=32,
        vocab_size=tokenizer.vocab_size, max_seq_len=256,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return TransformerModel(init_weights(tiny_config, seed=0))


@pytest.fixture(scope="session")
def worked_instance():
    """The running example: 40 * 14 / 20 = 28."""
    return Instance((20, 14, 40), 28)


@pytest.fixture
def transcript(worked_instance, tokenizer):
    return synthesize_transcript(worked_instance, np.random.default_rng(3), 2, tokenizer)


@pytest.fixture
def run_config(tmp_path, monkeypatch, tokenizer):
    """Desk-sized configuration writing into a temporary OUT_DIR."""
    monkeypatch.chdir(tmp_path)
    config = ConfigManager(use_env=False)
    config.merge({
        "OUT_DIR": str(tmp_path / "run"),
        "data": {"count": 24},
        "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_head": 8, "d_glu": 32,
                  "vocab_size": tokenizer.vocab_size},
        "train": {"max_steps": 4, "eval_every": 2, "eval_generations": 1, "max_new_tokens": 4},
        "capture": {"samples": 2, "max_new": 8},
    })
    return config
