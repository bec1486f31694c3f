"""
Conditional masked language model: a pre-norm Transformer encoder/decoder.

The encoder reads the source with [LEN] at position 0; the length head
classifies target length from the encoder top state at that position. The
decoder attends over all non-pad target positions (no causal mask) and
cross-attends to the encoder.
"""
import functools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from natlab.errors import ShapeError
from natlab.models.config import ModelConfig
from natlab.models.corpus import PAD_ID
from natlab.services import autodiff as ad
from natlab.services.autodiff import TensorNode
from natlab.services.params import ParamStore

logger = logging.getLogger(__name__)

# Additive attention bias for padded keys
PAD_BIAS = -1e9


@dataclass
class EncoderState:
    """Encoder output for a batch of sources."""

    hidden: TensorNode          # (B, S, d)
    source_pad: np.ndarray      # (B, S) bool, True at [PAD]
    length_logits: TensorNode   # (B, n_max)


@dataclass
class ForwardOutput:
    """Logits of one forward pass."""

    token_logits: TensorNode    # (B, N, V)
    length_logits: TensorNode   # (B, n_max); column L-1 scores length L


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _attention_names(prefix: str) -> List[str]:
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def init_params(config: ModelConfig, seed: int = 0, dtype: Optional[str] = None) -> ParamStore:
    """
    Randomly initialize a ParamStore for `config`.

    Weight matrices use Xavier-uniform, embeddings N(0, d^-1/2), biases zero,
    layer-norm gains one.

    Args:
        config: Model architecture; vocab_size must be set
        seed: Initialization seed
        dtype: float32 or float64 (default: the autodiff default dtype)
    """
    if config.vocab_size < 1:
        raise ValueError("ModelConfig.vocab_size must be set before initializing parameters")
    dt = np.dtype(dtype) if dtype else ad.default_dtype()
    rng = np.random.default_rng(seed)
    d, v = config.d_model, config.vocab_size
    store = ParamStore(config)

    def matrix(name: str, fan_in: int, fan_out: int) -> None:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        store.add(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dt))

    def vector(name: str, n: int, fill: float = 0.0) -> None:
        store.add(name, np.full((n,), fill, dtype=dt))

    def attention(prefix: str) -> None:
        for w in ("q", "k", "v", "o"):
            matrix(f"{prefix}.w{w}", d, d)
            vector(f"{prefix}.b{w}", d)

    def layer_norm(prefix: str) -> None:
        vector(f"{prefix}.g", d, 1.0)
        vector(f"{prefix}.b", d, 0.0)

    def ffn(prefix: str) -> None:
        matrix(f"{prefix}.w1", d, config.d_inner)
        vector(f"{prefix}.b1", config.d_inner)
        matrix(f"{prefix}.w2", config.d_inner, d)
        vector(f"{prefix}.b2", d)

    store.add("src_embed", (rng.standard_normal((v, d)) * d ** -0.5).astype(dt))
    store.add("tgt_embed", (rng.standard_normal((v, d)) * d ** -0.5).astype(dt))

    for i in range(config.n_layers_enc):
        p = f"enc.layer{i}"
        layer_norm(f"{p}.ln1")
        attention(f"{p}.attn")
        layer_norm(f"{p}.ln2")
        ffn(f"{p}.ffn")
    layer_norm("enc.ln")

    for i in range(config.n_layers_dec):
        p = f"dec.layer{i}"
        layer_norm(f"{p}.ln1")
        attention(f"{p}.self_attn")
        layer_norm(f"{p}.ln2")
        attention(f"{p}.cross_attn")
        layer_norm(f"{p}.ln3")
        ffn(f"{p}.ffn")
    layer_norm("dec.ln")

    matrix("out.w", d, v)
    vector("out.b", v)
    matrix("len.w", d, config.n_max)
    vector("len.b", config.n_max)

    logger.info("Initialized %d parameters (%s)", store.num_parameters(), dt.name)
    return store


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=32)
def _sinusoid_table(length: int, d_model: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2, dtype=np.float64) / d_model))
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)[:, : d_model // 2]
    table.setflags(write=False)
    return table


def positional_encoding(length: int, d_model: int, dtype: np.dtype) -> np.ndarray:
    return _sinusoid_table(length, d_model).astype(dtype)


def _embed(params: ParamStore, table: str, ids: np.ndarray, dropout: float, rng) -> TensorNode:
    config = params.config
    x = ad.scale(ad.embed_lookup(params[table], ids), math.sqrt(config.d_model))
    x = ad.add(x, positional_encoding(ids.shape[1], config.d_model, params.dtype))
    return ad.dropout(x, dropout, rng)


def _linear(x: TensorNode, params: ParamStore, w: str, b: str) -> TensorNode:
    return ad.add(ad.matmul(x, params[w]), params[b])


def _layer_norm(x: TensorNode, params: ParamStore, prefix: str) -> TensorNode:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _split_heads(x: TensorNode, n_heads: int) -> TensorNode:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: TensorNode) -> TensorNode:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attention(
    query: TensorNode,
    memory: TensorNode,
    key_pad: np.ndarray,
    params: ParamStore,
    prefix: str,
    dropout: float,
    rng,
) -> TensorNode:
    """Multi-head attention; key_pad (B, S) marks keys that must get no weight."""
    config = params.config
    h = config.n_heads
    q = _split_heads(_linear(query, params, f"{prefix}.wq", f"{prefix}.bq"), h)
    k = _split_heads(_linear(memory, params, f"{prefix}.wk", f"{prefix}.bk"), h)
    v = _split_heads(_linear(memory, params, f"{prefix}.wv", f"{prefix}.bv"), h)

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(config.head_dim))
    bias = np.where(key_pad, PAD_BIAS, 0.0).astype(params.dtype)[:, None, None, :]
    weights = ad.dropout(ad.softmax(ad.add(scores, bias), axis=-1), dropout, rng)
    context = _merge_heads(ad.matmul(weights, v))
    return _linear(context, params, f"{prefix}.wo", f"{prefix}.bo")


def _feed_forward(x: TensorNode, params: ParamStore, prefix: str, dropout: float, rng) -> TensorNode:
    hidden = ad.relu(_linear(x, params, f"{prefix}.w1", f"{prefix}.b1"))
    hidden = ad.dropout(hidden, dropout, rng)
    return _linear(hidden, params, f"{prefix}.w2", f"{prefix}.b2")


def _residual(x: TensorNode, sublayer: TensorNode, dropout: float, rng) -> TensorNode:
    return ad.add(x, ad.dropout(sublayer, dropout, rng))


def _check_ids(name: str, ids: np.ndarray, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ShapeError(name, ids.shape, ("batch", "length"))
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ShapeError(name, (int(ids.max()) + 1,), (config.vocab_size,))
    return ids


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def encode(
    params: ParamStore,
    source_ids: np.ndarray,
    dropout_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> EncoderState:
    """
    Encode a padded source batch whose first column is [LEN].

    Args:
        params: Model weights (params.config describes the architecture)
        source_ids: (B, S) int ids
        dropout_prob: Dropout probability (0 disables)
        rng: Dropout mask generator (None disables)
    """
    config = params.config
    source_ids = _check_ids("encode", source_ids, config)
    source_pad = source_ids == PAD_ID
    b, s = source_ids.shape

    x = _embed(params, "src_embed", source_ids, dropout_prob, rng)
    for i in range(config.n_layers_enc):
        p = f"enc.layer{i}"
        normed = _layer_norm(x, params, f"{p}.ln1")
        x = _residual(x, _attention(normed, normed, source_pad, params, f"{p}.attn", dropout_prob, rng), dropout_prob, rng)
        normed = _layer_norm(x, params, f"{p}.ln2")
        x = _residual(x, _feed_forward(normed, params, f"{p}.ffn", dropout_prob, rng), dropout_prob, rng)
    hidden = _layer_norm(x, params, "enc.ln")

    # encoder top state at the [LEN] position
    len_state = ad.gather_rows(ad.reshape(hidden, (b * s, config.d_model)), np.arange(b) * s)
    length_logits = _linear(len_state, params, "len.w", "len.b")
    return EncoderState(hidden=hidden, source_pad=source_pad, length_logits=length_logits)


def decode_tokens(
    params: ParamStore,
    encoder: EncoderState,
    target_input_ids: np.ndarray,
    dropout_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> TensorNode:
    """
    Token logits (B, N, V) for a partially masked target batch.

    Self-attention is unrestricted over non-pad target positions.
    """
    config = params.config
    target_input_ids = _check_ids("decode_tokens", target_input_ids, config)
    if target_input_ids.shape[0] != encoder.hidden.shape[0]:
        raise ShapeError("decode_tokens", target_input_ids.shape, encoder.hidden.shape)
    target_pad = target_input_ids == PAD_ID

    x = _embed(params, "tgt_embed", target_input_ids, dropout_prob, rng)
    for i in range(config.n_layers_dec):
        p = f"dec.layer{i}"
        normed = _layer_norm(x, params, f"{p}.ln1")
        x = _residual(x, _attention(normed, normed, target_pad, params, f"{p}.self_attn", dropout_prob, rng), dropout_prob, rng)
        normed = _layer_norm(x, params, f"{p}.ln2")
        x = _residual(
            x,
            _attention(normed, encoder.hidden, encoder.source_pad, params, f"{p}.cross_attn", dropout_prob, rng),
            dropout_prob, rng,
        )
        normed = _layer_norm(x, params, f"{p}.ln3")
        x = _residual(x, _feed_forward(normed, params, f"{p}.ffn", dropout_prob, rng), dropout_prob, rng)
    x = _layer_norm(x, params, "dec.ln")
    return _linear(x, params, "out.w", "out.b")


def forward(
    params: ParamStore,
    source_ids: np.ndarray,
    target_input_ids: np.ndarray,
    dropout_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> ForwardOutput:
    """
    One full pass: encode the source, then predict every target position.

    Replaying rng replays the output exactly; dropout_prob=0 is deterministic.
    """
    encoder = encode(params, source_ids, dropout_prob, rng)
    token_logits = decode_tokens(params, encoder, target_input_ids, dropout_prob, rng)
    return ForwardOutput(token_logits=token_logits, length_logits=encoder.length_logits)


def predict_length(output, k: int) -> List[List[Tuple[int, float]]]:
    """
    Top-k target lengths per sentence with their log-probabilities.

    Args:
        output: ForwardOutput or EncoderState (anything with length_logits)
        k: Number of candidates (capped at n_max)

    Returns:
        Per sentence, [(length, logprob), ...] by descending log-probability,
        ties broken by the smaller length
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    logp = ad.log_softmax(ad.constant(output.length_logits.value, output.length_logits.dtype), axis=-1).value
    lengths = np.arange(1, logp.shape[-1] + 1)
    results = []
    for row in logp:
        order = np.lexsort((lengths, -row))[:k]
        results.append([(int(lengths[i]), float(row[i])) for i in order])
    return results
