"""Tests for vocabularies, corpus loading, toy corpora and batching."""
import logging

import pytest

from natlab.errors import ConfigError, CorpusError
from natlab.models.corpus import LEN_ID, UNK_ID, Batch, Vocab
from natlab.services.corpus import (
    CharacterTokenizer,
    build_vocab,
    gen_toy_corpus,
    get_tokenizer,
    load_parallel,
    make_batches,
    read_lines,
    split_heldout,
    toy_symbols,
)
from tests.conftest import random_pairs


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return str(path)


class TestVocab:
    def test_reserved_ids_and_unknowns(self, tiny_vocab):
        assert tiny_vocab.id_of("w0") == 6
        assert tiny_vocab.encode(["w1", "zzz"]) == [7, UNK_ID]
        assert tiny_vocab.decode([LEN_ID, 6, 0, 7]) == ["w0", "w1"]

    def test_save_load(self, tiny_vocab, tmp_path):
        tiny_vocab.save(str(tmp_path / "vocab.txt"))
        assert Vocab.load(str(tmp_path / "vocab.txt")) == tiny_vocab

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            Vocab(tokens=["a", "a"])

    def test_reserved_name_rejected(self):
        with pytest.raises(ValueError):
            Vocab(tokens=["[MASK]"])

    def test_build_orders_by_frequency(self, tmp_path):
        src = write(tmp_path / "a.src", ["b a", "c a"])
        tgt = write(tmp_path / "a.tgt", ["a b"])
        assert build_vocab([src, tgt]).tokens == ["a", "b", "c"]


class TestLoadParallel:
    def test_pairs_start_with_len(self, tmp_path):
        vocab = Vocab(tokens=["x", "y"])
        src = write(tmp_path / "s", ["x y", "y"])
        tgt = write(tmp_path / "t", ["y", "x x"])
        pairs = load_parallel(src, tgt, vocab)
        assert [p.source_ids for p in pairs] == [[LEN_ID, 6, 7], [LEN_ID, 7]]
        assert [p.target_ids for p in pairs] == [[7], [6, 6]]

    def test_line_count_mismatch(self, tmp_path):
        with pytest.raises(CorpusError):
            load_parallel(write(tmp_path / "s", ["x", "y"]), write(tmp_path / "t", ["x"]), Vocab(tokens=["x", "y"]))

    def test_long_and_empty_pairs_dropped(self, tmp_path, caplog):
        vocab = Vocab(tokens=["x"])
        src = write(tmp_path / "s", ["x", "x", ""])
        tgt = write(tmp_path / "t", ["x x x", "x", "x"])
        with caplog.at_level(logging.WARNING):
            pairs = load_parallel(src, tgt, vocab, n_max=2)
        assert [p.index for p in pairs] == [1]
        assert "Rejected 1 pairs with target length > n_max=2" in caplog.text

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_lines(str(tmp_path / "missing.txt"))


class TestSplitHeldout:
    def test_last_pairs_are_held_out(self):
        pairs = random_pairs(10)
        train, test = split_heldout(pairs, 3)
        assert train == pairs[:7] and test == pairs[7:]

    @pytest.mark.parametrize("n", [0, -1, 10, 11])
    def test_both_sides_must_be_non_empty(self, n):
        with pytest.raises(CorpusError, match="hold out"):
            split_heldout(random_pairs(10), n)

class TestTokenizers:
    def test_character_tokenizer(self):
        tokenizer = CharacterTokenizer()
        tokens = tokenizer.tokenize("ab  c")
        assert tokens == ["a", "b", "▁", "c"]
        assert tokenizer.detokenize(tokens) == "ab c"

    def test_unknown_tokenizer(self):
        with pytest.raises(ConfigError):
            get_tokenizer("bpe")


class TestToyCorpus:
    def generate(self, tmp_path, task, seed=3, noise=0.0):
        src, tgt = tmp_path / f"{task}.src", tmp_path / f"{task}.tgt"
        gen_toy_corpus(task, 16, 50, 6, seed, str(src), str(tgt), noise=noise)
        return [line.split() for line in read_lines(str(src))], [line.split() for line in read_lines(str(tgt))]

    def test_copy_and_reverse(self, tmp_path):
        sources, targets = self.generate(tmp_path, "copy")
        assert sources == targets
        sources, targets = self.generate(tmp_path, "reverse")
        assert [s[::-1] for s in sources] == targets

    def test_cipher_is_a_consistent_bijection(self, tmp_path):
        sources, targets = self.generate(tmp_path, "substitution-cipher")
        mapping = {}
        for src, tgt in zip(sources, targets):
            assert len(src) == len(tgt) <= 6
            for a, b in zip(src, tgt):
                assert mapping.setdefault(a, b) == b
        assert len(set(mapping.values())) == len(mapping)

    def test_deterministic(self, tmp_path):
        first = self.generate(tmp_path, "substitution-cipher", seed=9)
        assert self.generate(tmp_path, "substitution-cipher", seed=9) == first

    def test_noise_changes_targets(self, tmp_path):
        clean = self.generate(tmp_path, "copy", seed=4)[1]
        noisy = self.generate(tmp_path, "copy", seed=4, noise=0.5)[1]
        assert clean != noisy

    def test_symbols(self):
        assert toy_symbols(28)[-3:] == ["z", "a1", "b1"]

    def test_unknown_task(self, tmp_path):
        with pytest.raises(ConfigError):
            gen_toy_corpus("sort", 16, 1, 3, 0, str(tmp_path / "s"), str(tmp_path / "t"))


class TestBatching:
    def test_every_pair_once_within_budget(self):
        pairs = random_pairs(40, max_len=5)
        batches = make_batches(pairs, 12, seed=1)
        seen = sorted(p.index for b in batches for p in b.pairs)
        assert seen == list(range(40))
        assert all(b.target_tokens() <= 12 for b in batches)

    def test_deterministic_per_seed(self):
        pairs = random_pairs(40)
        order = lambda seed: [[p.index for p in b.pairs] for b in make_batches(pairs, 12, seed)]
        assert order(1) == order(1)
        assert order(1) != order(2)

    def test_budget_smaller_than_longest_target(self):
        with pytest.raises(ConfigError):
            make_batches(random_pairs(10, max_len=5), 2, seed=0)

    def test_unpad_targets(self):
        batch = Batch(pairs=random_pairs(5))
        assert batch.unpad_targets() == batch.targets()
