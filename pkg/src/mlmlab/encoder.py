"""Minimal Transformer encoder over the autodiff engine.

Architecture: token + learned position embeddings, N post-layer-norm blocks
(multi-head scaled dot-product self-attention, then a gelu FFN, each wrapped
as LN(x + sublayer(x))), and a vocabulary projection that either reuses the
token embedding table transposed (tied) or owns a separate matrix.  The
output bias exists in both modes and starts at zero.

Pad handling is exact: pad keys receive an additive -1e30 before the
attention softmax, which underflows to a weight of exactly 0.0, so non-pad
outputs are bit-identical under any change to pad-position inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigurationError
from .rng import stream

__all__ = ["EncoderConfig", "EncoderOutput", "Parameters", "init", "forward",
           "embedding_of", "PAD_SCORE_OFFSET"]

PAD_SCORE_OFFSET = -1e30


@dataclass
class EncoderConfig:
    vocab_size: int = 0  # 0 = infer from the vocabulary at training time
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    max_positions: int = 128
    dropout: float = 0.1
    tie_embeddings: bool = True
    freeze_embeddings: bool = False
    init_embeddings_from: str | None = None
    init_range: float = 0.02

    def validate(self):
        if self.num_layers < 1:
            raise ConfigurationError("encoder.num_layers must be positive")
        if self.hidden_size < 1 or self.ffn_size < 1 or self.max_positions < 1:
            raise ConfigurationError("encoder sizes must be positive")
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            raise ConfigurationError(
                f"encoder.num_heads must divide hidden_size "
                f"({self.num_heads} vs {self.hidden_size})")
        if self.vocab_size < 1:
            raise ConfigurationError("encoder.vocab_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("encoder.dropout must be in [0, 1)")
        if self.init_range < 0:
            raise ConfigurationError("encoder.init_range must be nonnegative")


@dataclass
class EncoderOutput:
    hidden: ad.Tensor  # [batch, seq, d]
    logits: ad.Tensor  # [batch, seq, vocab]


class Parameters:
    """Named parameter tensors in a stable order, with a frozen-name set.

    Frozen tensors keep ``requires_grad=False``: they never join the graph,
    never receive gradients, and the optimizer allocates no state for them.
    """

    def __init__(self, config):
        self.config = config
        self._tensors = {}
        self.frozen = set()

    def add(self, name, data):
        self._tensors[name] = ad.tensor(data, requires_grad=True)
        return self._tensors[name]

    def freeze(self, name):
        self.frozen.add(name)
        self._tensors[name].requires_grad = False

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable(self):
        return [(n, t) for n, t in self._tensors.items() if n not in self.frozen]

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def num_parameters(self):
        return sum(t.size for t in self._tensors.values())


def truncated_normal(rng, shape, std):
    """Normal(0, std) with resampling outside +/- 2 std."""
    if std == 0.0:
        return np.zeros(shape)
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def init(config, rng_seed):
    """Deterministic parameter init; optionally seeds E from a checkpoint."""
    config.validate()
    rng = stream(rng_seed, "init")
    d, f, v = config.hidden_size, config.ffn_size, config.vocab_size
    params = Parameters(config)

    def weight(name, shape):
        params.add(name, truncated_normal(rng, shape, config.init_range))

    def zeros(name, shape):
        params.add(name, np.zeros(shape))

    weight("tok_emb", (v, d))
    weight("pos_emb", (config.max_positions, d))
    for i in range(config.num_layers):
        p = f"layer{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            weight(f"{p}.attn.{proj}", (d, d))
            zeros(f"{p}.attn.b{proj[1]}", (d,))
        params.add(f"{p}.ln1.gain", np.ones(d))
        zeros(f"{p}.ln1.bias", (d,))
        weight(f"{p}.ffn.w1", (d, f))
        zeros(f"{p}.ffn.b1", (f,))
        weight(f"{p}.ffn.w2", (f, d))
        zeros(f"{p}.ffn.b2", (d,))
        params.add(f"{p}.ln2.gain", np.ones(d))
        zeros(f"{p}.ln2.bias", (d,))
    if not config.tie_embeddings:
        weight("out_proj", (d, v))
    zeros("out_bias", (v,))

    if config.init_embeddings_from:
        from .checkpoint import load_checkpoint
        saved = load_checkpoint(config.init_embeddings_from)
        if "tok_emb" not in saved.tensors:
            raise CheckpointError(
                f"{config.init_embeddings_from} holds no token embedding table")
        table = saved.tensors["tok_emb"]
        if table.shape != (v, d):
            raise CheckpointError(
                f"embedding table shape mismatch: expected {(v, d)}, "
                f"found {table.shape} in {config.init_embeddings_from}")
        params["tok_emb"].data = table.astype(np.float64, copy=True)
    if config.freeze_embeddings:
        params.freeze("tok_emb")
    return params


def _attention(x, params, prefix, pad_offsets, config, drop_rng, train):
    n, length, d = x.shape
    heads = config.num_heads
    dh = d // heads

    def proj(name, bias):
        out = ad.add(ad.matmul(x, params[f"{prefix}.{name}"]),
                     params[f"{prefix}.{bias}"])
        split = ad.reshape(out, (n, length, heads, dh))
        return ad.transpose(split, (0, 2, 1, 3))  # [n, heads, len, dh]

    q = proj("wq", "bq")
    k = proj("wk", "bk")
    v = proj("wv", "bv")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    scores = ad.add(scores, ad.constant(pad_offsets))
    weights = ad.softmax(scores, axis=-1)
    weights = ad.dropout(weights, config.dropout, drop_rng, train)
    ctx = ad.matmul(weights, v)  # [n, heads, len, dh]
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, length, d))
    return ad.add(ad.matmul(merged, params[f"{prefix}.wo"]),
                  params[f"{prefix}.bo"])


def forward(params, input_ids, pad_flags=None, train=False, drop_rng=None):
    """Run the encoder; returns last hidden states and vocabulary logits.

    ``input_ids`` may be a MaskedBatch, in which case its corrupted ids and
    pad flags are used.
    """
    config = params.config
    if hasattr(input_ids, "input_ids"):
        pad_flags = input_ids.pad_flags
        input_ids = input_ids.input_ids
    input_ids = np.asarray(input_ids)
    n, length = input_ids.shape
    if length > config.max_positions:
        raise ValueError(
            f"sequence length {length} exceeds max_positions "
            f"{config.max_positions}")
    if input_ids.max() >= config.vocab_size or input_ids.min() < 0:
        bad = np.argwhere(
            (input_ids >= config.vocab_size) | (input_ids < 0))[0]
        raise ValueError(
            f"token id {input_ids[tuple(bad)]} at row {bad[0]} position "
            f"{bad[1]} is outside the vocabulary of {config.vocab_size}")
    if train and config.dropout > 0.0 and drop_rng is None:
        raise ValueError("training forward with dropout requires drop_rng")

    tok = ad.embedding_gather(params["tok_emb"], input_ids)
    pos = ad.embedding_gather(params["pos_emb"], np.arange(length))
    x = ad.add(tok, pos)
    x = ad.dropout(x, config.dropout, drop_rng, train)

    # [n, 1, 1, len]: -1e30 on pad keys, exact zero attention after softmax
    pad_offsets = np.where(pad_flags, PAD_SCORE_OFFSET, 0.0)[:, None, None, :]
    for i in range(config.num_layers):
        p = f"layer{i}"
        att = _attention(x, params, f"{p}.attn", pad_offsets, config,
                         drop_rng, train)
        att = ad.dropout(att, config.dropout, drop_rng, train)
        x = ad.layer_norm(ad.add(x, att),
                          params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        ff = ad.matmul(ad.gelu(ad.add(ad.matmul(x, params[f"{p}.ffn.w1"]),
                                      params[f"{p}.ffn.b1"])),
                       params[f"{p}.ffn.w2"])
        ff = ad.add(ff, params[f"{p}.ffn.b2"])
        ff = ad.dropout(ff, config.dropout, drop_rng, train)
        x = ad.layer_norm(ad.add(x, ff),
                          params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])

    if config.tie_embeddings:
        logits = ad.matmul(x, ad.transpose(params["tok_emb"]))
    else:
        logits = ad.matmul(x, params["out_proj"])
    logits = ad.add(logits, params["out_bias"])
    return EncoderOutput(hidden=x, logits=logits)


def embedding_of(params, token_id):
    """Static embedding row as a plain array (no graph side effects)."""
    if not 0 <= token_id < params.config.vocab_size:
        raise ValueError(f"token id {token_id} outside vocabulary of "
                         f"{params.config.vocab_size}")
    return params["tok_emb"].data[token_id].copy()
