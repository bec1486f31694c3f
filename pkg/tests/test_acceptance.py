"""
End-to-end training runs on synthetic corpora.

These train real models for minutes; deselect with -m "not slow".
"""
from pathlib import Path

import numpy as np
import pytest

from natlab.models.config import DecodeConfig, ExperimentConfig, ModelConfig, read_config_file
from natlab.models.metrics import MetricsRecord, read_jsonl
from natlab.services.bleu import corpus_bleu
from natlab.services.corpus import build_vocab, gen_toy_corpus, load_parallel
from natlab.services.decoder import length_accuracy, translate_corpus
from natlab.services.trainer import METRICS_FILE, Trainer, average_checkpoints, list_checkpoints
from tests.conftest import random_pairs

pytestmark = pytest.mark.slow

TOY_CONFIG = Path(__file__).parent.parent / "configs" / "toy.txt"


def cipher_data(root: Path, n_train: int, n_test: int, seed: int = 0, noise: float = 0.0):
    """Train and test pairs of one cipher; noise only touches the training targets."""
    src, tgt = str(root / "all.src"), str(root / "all.tgt")
    gen_toy_corpus("substitution-cipher", 32, n_train + n_test, 12, seed, src, tgt)
    vocab = build_vocab([src, tgt])
    pairs = load_parallel(src, tgt, vocab, n_max=16)
    train, test = pairs[:n_train], pairs[n_train:]
    if noise:
        gen_toy_corpus("substitution-cipher", 32, n_train + n_test, 12, seed, src, tgt, noise=noise)
        train = load_parallel(src, tgt, vocab, n_max=16)[:n_train]
    return train, test, vocab


def bleu_at(params, test, vocab, iterations, length_candidates=3):
    hypotheses = translate_corpus(params, [p.source_ids for p in test], DecodeConfig(iterations=iterations, length_candidates=length_candidates))
    return corpus_bleu([vocab.decode(h.tokens) for h in hypotheses], [vocab.decode(p.target_ids) for p in test]).bleu


@pytest.fixture(scope="module")
def cipher_model(tmp_path_factory):
    root = tmp_path_factory.mktemp("cipher")
    train, test, vocab = cipher_data(root, 5000, 500)
    config = read_config_file(str(TOY_CONFIG)).with_overrides(eval_interval=0)
    Trainer(config, train, vocab, str(root / "run")).run()
    params, _ = average_checkpoints([str(p) for p in list_checkpoints(str(root / "run"))])
    return params, test, vocab


class TestToyCipher:
    def test_translates_held_out_pairs(self, cipher_model):
        params, test, vocab = cipher_model
        assert bleu_at(params, test, vocab, iterations=4) >= 90.0
        assert length_accuracy(params, test) >= 0.95

    def test_more_iterations_do_not_hurt(self, cipher_model):
        params, test, vocab = cipher_model
        one = bleu_at(params, test, vocab, iterations=1)
        assert bleu_at(params, test, vocab, iterations=4) >= one - 0.5
        assert bleu_at(params, test, vocab, iterations=10) >= one - 0.5


class TestOverfit:
    def test_sixteen_pairs_are_memorized(self, tmp_path, tiny_vocab):
        model = ModelConfig(
            d_model=32, d_inner=64, n_layers_enc=2, n_layers_dec=2, n_heads=4,
            vocab_size=len(tiny_vocab), n_max=8, dropout_online=0.0, dropout_average=0.0,
        )
        config = ExperimentConfig(model=model).with_overrides(
            label_smoothing=0.0, tokens_per_batch=128, max_steps=500, warmup_steps=50,
            peak_lr=3e-3, log_interval=1, checkpoint_interval=0, seed=2,
        )
        Trainer(config, random_pairs(16, seed=5), tiny_vocab, str(tmp_path)).run()
        records = read_jsonl(str(tmp_path / METRICS_FILE), MetricsRecord)
        assert np.mean([r.nll_per_token for r in records[-20:]]) < 0.1


class TestRegularizerDirection:
    def test_consistency_does_not_hurt_on_noisy_targets(self, tmp_path):
        train, test, vocab = cipher_data(tmp_path, 2000, 300, noise=0.1)
        base = read_config_file(str(TOY_CONFIG)).with_overrides(
            max_steps=1200, warmup_steps=200, checkpoint_interval=200, eval_interval=0, prefetch=0,
        )
        scores = {0.0: [], 0.3: []}
        for lam in scores:
            for seed in range(5):
                run = tmp_path / f"lambda{lam}_seed{seed}"
                Trainer(base.with_overrides(lambda_=lam, seed=seed), train, vocab, str(run)).run()
                params, _ = average_checkpoints([str(p) for p in list_checkpoints(str(run))])
                scores[lam].append(bleu_at(params, test, vocab, iterations=4))
        assert np.median(scores[0.3]) >= np.median(scores[0.0]) - 0.3
