"""Shared fixtures: tiny models, pairs and vocabularies."""
import numpy as np
import pytest

from natlab.models.config import ExperimentConfig, ModelConfig
from natlab.models.corpus import LEN_ID, RESERVED_TOKENS, SentencePair, Vocab
from natlab.services import autodiff as ad
from natlab.services import transformer

TINY_VOCAB_TOKENS = [f"w{i}" for i in range(8)]
FIRST_WORD_ID = len(RESERVED_TOKENS)


@pytest.fixture(autouse=True)
def restore_default_dtype():
    """Trainer switches the global default dtype; put it back after every test."""
    previous = ad.default_dtype().name
    yield
    ad.set_default_dtype(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        d_model=8, d_inner=16, n_layers_enc=1, n_layers_dec=1, n_heads=2,
        vocab_size=len(RESERVED_TOKENS) + len(TINY_VOCAB_TOKENS), n_max=8,
        dropout_online=0.0, dropout_average=0.0,
    )


@pytest.fixture
def tiny_params(tiny_model_config):
    return transformer.init_params(tiny_model_config, seed=0, dtype="float32")


@pytest.fixture
def tiny_params64(tiny_model_config):
    with ad.precision("float64"):
        yield transformer.init_params(tiny_model_config, seed=0, dtype="float64")


@pytest.fixture
def tiny_vocab():
    return Vocab(tokens=list(TINY_VOCAB_TOKENS))


def random_pairs(n: int, seed: int = 0, max_len: int = 5):
    """Copy-task pairs over the tiny vocabulary."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        length = int(rng.integers(1, max_len + 1))
        ids = (FIRST_WORD_ID + rng.integers(0, len(TINY_VOCAB_TOKENS), size=length)).tolist()
        pairs.append(SentencePair(index=i, source_ids=[LEN_ID] + ids, target_ids=ids))
    return pairs


@pytest.fixture
def tiny_pairs():
    return random_pairs(12)


@pytest.fixture
def tiny_experiment(tiny_model_config):
    """A config that trains a few steps in well under a second each."""
    return ExperimentConfig(model=tiny_model_config).with_overrides(
        dropout_online=0.1,
        dropout_average=0.1,
        tokens_per_batch=16,
        max_steps=6,
        warmup_steps=2,
        peak_lr=1e-3,
        checkpoint_interval=3,
        keep_last_k=5,
        log_interval=1,
        iterations=2,
        length_candidates=2,
    )
