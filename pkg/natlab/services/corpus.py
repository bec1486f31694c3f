"""
Corpus service: tokenizers, vocabulary building, parallel corpus loading,
synthetic toy corpora and token-budget batching.

Pipeline: text files -> tokens -> Vocab ids -> SentencePair -> Batch
"""
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from natlab.errors import ConfigError, CorpusError
from natlab.models.corpus import LEN_ID, Batch, SentencePair, Vocab

logger = logging.getLogger(__name__)

TOY_TASKS = ("copy", "reverse", "substitution-cipher")
SPACE_SYMBOL = "▁"


class Tokenizer(Protocol):
    """Splits a line into tokens and joins tokens back into a line."""

    name: str

    def tokenize(self, line: str) -> List[str]:
        ...

    def detokenize(self, tokens: Sequence[str]) -> str:
        ...


class WhitespaceTokenizer:
    name = "whitespace"

    def tokenize(self, line: str) -> List[str]:
        return line.split()

    def detokenize(self, tokens: Sequence[str]) -> str:
        return " ".join(tokens)


class CharacterTokenizer:
    """One token per character; spaces become the visible marker U+2581."""

    name = "char"

    def tokenize(self, line: str) -> List[str]:
        line = " ".join(line.split())
        return [SPACE_SYMBOL if ch == " " else ch for ch in line]

    def detokenize(self, tokens: Sequence[str]) -> str:
        return "".join(" " if t == SPACE_SYMBOL else t for t in tokens)


TOKENIZERS: Dict[str, type] = {
    WhitespaceTokenizer.name: WhitespaceTokenizer,
    CharacterTokenizer.name: CharacterTokenizer,
}


def get_tokenizer(name: str = "whitespace") -> Tokenizer:
    if name not in TOKENIZERS:
        raise ConfigError(f"Unknown tokenizer '{name}'. Available: {', '.join(TOKENIZERS)}")
    return TOKENIZERS[name]()


def read_lines(filepath: str) -> List[str]:
    """Lines of a UTF-8 text file without trailing newlines."""
    path = Path(filepath)
    if not path.exists():
        raise FileNotFoundError(f"Corpus file not found: {path}")
    return path.read_text(encoding="utf-8").splitlines()


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

def build_vocab(paths: Sequence[str], tokenizer: Optional[Tokenizer] = None, min_count: int = 1) -> Vocab:
    """
    Joint vocabulary over one or more text files.

    Tokens are ordered by descending frequency, then lexicographically.
    """
    tokenizer = tokenizer or WhitespaceTokenizer()
    counts: Counter = Counter()
    for path in paths:
        for line in read_lines(path):
            counts.update(tokenizer.tokenize(line))
    tokens = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    vocab = Vocab(tokens=tokens)
    logger.info("Built vocabulary of %d tokens (+%d reserved) from %d files", len(tokens), len(vocab) - len(tokens), len(paths))
    return vocab


# ---------------------------------------------------------------------------
# Parallel corpus
# ---------------------------------------------------------------------------

def make_pair(index: int, source_tokens: List[str], target_tokens: List[str], vocab: Vocab) -> SentencePair:
    return SentencePair(
        index=index,
        source_ids=[LEN_ID] + vocab.encode(source_tokens),
        target_ids=vocab.encode(target_tokens),
    )


def load_parallel(
    src_path: str,
    tgt_path: str,
    vocab: Vocab,
    n_max: int = 1000,
    tokenizer: Optional[Tokenizer] = None,
) -> List[SentencePair]:
    """
    Load aligned source/target files into SentencePairs.

    Line i of each file forms pair i. Unknown tokens map to [UNK]. Pairs with
    an empty side or a target longer than n_max are dropped and counted in a
    warning.

    Raises:
        CorpusError: If the files have different line counts
    """
    tokenizer = tokenizer or WhitespaceTokenizer()
    sources, targets = read_lines(src_path), read_lines(tgt_path)
    if len(sources) != len(targets):
        raise CorpusError(
            f"Line count mismatch: {src_path} has {len(sources)} lines, {tgt_path} has {len(targets)}"
        )

    pairs: List[SentencePair] = []
    too_long = empty = 0
    for i, (src, tgt) in enumerate(zip(sources, targets)):
        src_tokens, tgt_tokens = tokenizer.tokenize(src), tokenizer.tokenize(tgt)
        if not src_tokens or not tgt_tokens:
            empty += 1
            continue
        if len(tgt_tokens) > n_max:
            too_long += 1
            continue
        pairs.append(make_pair(i, src_tokens, tgt_tokens, vocab))

    if too_long:
        logger.warning("Rejected %d pairs with target length > n_max=%d", too_long, n_max)
    if empty:
        logger.warning("Skipped %d pairs with an empty side", empty)
    logger.info("Loaded %d pairs from %s / %s", len(pairs), src_path, tgt_path)
    return pairs


def pairs_to_lines(pairs: Sequence[SentencePair], vocab: Vocab, tokenizer: Optional[Tokenizer] = None):
    """Detokenized (source, target) lines of loaded pairs."""
    tokenizer = tokenizer or WhitespaceTokenizer()
    return [
        (tokenizer.detokenize(vocab.decode(p.source_ids)), tokenizer.detokenize(vocab.decode(p.target_ids)))
        for p in pairs
    ]


# ---------------------------------------------------------------------------
# Toy corpora
# ---------------------------------------------------------------------------

def toy_symbols(vocab_size: int) -> List[str]:
    """a..z, then a1..z1, a2..z2, ... until vocab_size symbols."""
    letters = [chr(ord("a") + i) for i in range(26)]
    symbols = []
    for i in range(vocab_size):
        round_, letter = divmod(i, 26)
        symbols.append(letters[letter] + (str(round_) if round_ else ""))
    return symbols


def gen_toy_corpus(
    task: str,
    vocab_size: int,
    n_pairs: int,
    max_len: int,
    seed: int,
    src_path: str,
    tgt_path: str,
    noise: float = 0.0,
) -> None:
    """
    Write a deterministic synthetic parallel corpus.

    Tasks:
        copy:                target = source
        reverse:             target = reversed source
        substitution-cipher: target = source mapped through a fixed random bijection

    Args:
        noise: Probability of replacing each target token by a random symbol
    """
    if task not in TOY_TASKS:
        raise ConfigError(f"Unknown toy task '{task}'. Available: {', '.join(TOY_TASKS)}")
    if vocab_size < 8:
        raise ConfigError(f"vocab_size must be >= 8, got {vocab_size}")
    if max_len < 1 or n_pairs < 0:
        raise ConfigError("max_len must be >= 1 and n_pairs >= 0")
    if not 0.0 <= noise < 1.0:
        raise ConfigError(f"noise must be in [0, 1), got {noise}")

    rng = np.random.default_rng(seed)
    symbols = toy_symbols(vocab_size)
    cipher = rng.permutation(vocab_size)

    src_lines, tgt_lines = [], []
    for _ in range(n_pairs):
        length = int(rng.integers(1, max_len + 1))
        source = rng.integers(0, vocab_size, size=length)
        if task == "copy":
            target = source.copy()
        elif task == "reverse":
            target = source[::-1].copy()
        else:
            target = cipher[source]
        if noise > 0.0:
            flips = rng.random(length) < noise
            target = np.where(flips, rng.integers(0, vocab_size, size=length), target)
        src_lines.append(" ".join(symbols[i] for i in source))
        tgt_lines.append(" ".join(symbols[i] for i in target))

    for path, lines in ((src_path, src_lines), (tgt_path, tgt_lines)):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    logger.info("Wrote %d %s pairs to %s / %s", n_pairs, task, src_path, tgt_path)


def split_heldout(pairs: Sequence[SentencePair], n_heldout: int) -> Tuple[List[SentencePair], List[SentencePair]]:
    """Split off the last n_heldout pairs as test data; both sides must be non-empty."""
    if not 1 <= n_heldout < len(pairs):
        raise CorpusError(f"Cannot hold out {n_heldout} of {len(pairs)} pairs; need 1 <= heldout < {len(pairs)}")
    return list(pairs[:-n_heldout]), list(pairs[-n_heldout:])


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def make_batches(pairs: Sequence[SentencePair], tokens_per_batch: int, seed: int) -> List[Batch]:
    """
    Length-bucketed batches with at most tokens_per_batch target tokens each.

    Pairs are shuffled by seed, stably sorted by target length, packed
    greedily, and the batch order is shuffled by the same seed.

    Raises:
        ConfigError: If a single target exceeds tokens_per_batch
    """
    if not pairs:
        return []
    longest = max(p.target_length for p in pairs)
    if tokens_per_batch < longest:
        raise ConfigError(f"tokens_per_batch ({tokens_per_batch}) is smaller than the longest target ({longest})")

    rng = np.random.default_rng(seed)
    shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
    lengths = np.array([p.target_length for p in shuffled])
    ordered = [shuffled[i] for i in np.argsort(lengths, kind="stable")]

    batches: List[List[SentencePair]] = []
    current: List[SentencePair] = []
    current_tokens = 0
    for pair in ordered:
        if current and current_tokens + pair.target_length > tokens_per_batch:
            batches.append(current)
            current, current_tokens = [], 0
        current.append(pair)
        current_tokens += pair.target_length
    if current:
        batches.append(current)

    return [Batch(pairs=batches[i]) for i in rng.permutation(len(batches))]
