"""Training objectives: masked-token cross-entropy, a token-alignment
contrastive loss over "global bias" vectors, an all-positions token-prediction
loss, and their combinations.

The contrastive loss treats each content token as an anchor: its global bias
g = h - e (last hidden state minus static embedding) should align with the
global bias of a nearby token from the same sequence (the positive) and not
with K tokens drawn from other sequences in the batch (the negatives).
Alignment is cosine similarity divided by a temperature, trained with the
standard softmax contrastive estimator.

Sampling is keyed per anchor by (seed, step, row, position), so the drawn
positives/negatives do not depend on anchor iteration order or on which
variant enumerates the anchors.  The loss value itself is assembled as a
small batched graph (gathers over flattened hidden states), which keeps the
tape at a few dozen nodes regardless of anchor count.

Averaging is two-level: anchors are averaged within their sequence first,
then sequences are averaged, so short and long sequences weigh equally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError

__all__ = ["ObjectiveConfig", "ContrastiveSample", "LossBreakdown",
           "VARIANTS", "mlm_loss", "tp_loss", "global_bias", "score",
           "sample_positive", "sample_negatives", "contrastive_samples",
           "infonce_loss", "tc_loss", "total_loss"]

VARIANTS = ("mlm_only", "taco", "concentrated_taco", "extended_mlm")
ANCHOR_SOURCES = ("original_token", "input_token")


@dataclass
class ObjectiveConfig:
    variant: str = "taco"
    negatives: int = 50         # K
    window: int = 5             # W, symmetric radius for positives
    temperature: float = 0.07   # tau
    anchor_embedding_source: str = "original_token"
    tc_weight: float = 1.0      # exploration multiplier; 1.0 = plain sum

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"objective.variant must be one of {VARIANTS}, got "
                f"{self.variant!r}")
        if self.negatives < 1:
            raise ConfigurationError("objective.negatives (K) must be >= 1")
        if self.window < 1:
            raise ConfigurationError("objective.window (W) must be >= 1")
        if self.temperature <= 0:
            raise ConfigurationError("objective.temperature (tau) must be > 0")
        if self.anchor_embedding_source not in ANCHOR_SOURCES:
            raise ConfigurationError(
                f"objective.anchor_embedding_source must be one of "
                f"{ANCHOR_SOURCES}, got {self.anchor_embedding_source!r}")

    @property
    def uses_tc(self):
        return self.variant in ("taco", "concentrated_taco")


@dataclass
class ContrastiveSample:
    """One anchor with its drawn positive and negatives.

    ``anchor``/``positive`` are (row, position); ``negatives`` is a list of
    (row, position) with every row different from the anchor's.
    """

    anchor: tuple
    positive: tuple
    negatives: list


@dataclass
class LossBreakdown:
    total: ad.Tensor
    mlm: ad.Tensor | None = None
    tc: ad.Tensor | None = None
    tp: ad.Tensor | None = None


# -- cross-entropy losses -----------------------------------------------------


def _cross_entropy_at(output, batch, position_flags):
    """Mean -log p(original token) over the flagged positions."""
    flat_positions = np.flatnonzero(position_flags.reshape(-1))
    targets = batch.original_ids.reshape(-1)[flat_positions]
    vocab = output.logits.shape[-1]
    flat = ad.reshape(output.logits, (-1, vocab))
    picked = ad.embedding_gather(flat, flat_positions)
    logp = ad.log_softmax(picked, axis=-1)
    return ad.neg(ad.tmean(ad.take_index(logp, targets)))


def mlm_loss(output, batch):
    """Cross-entropy of original tokens at the masked positions M."""
    if not batch.mask_flags.any():
        raise ContractError("mlm loss on a batch with an empty mask set")
    return _cross_entropy_at(output, batch, batch.mask_flags)


def tp_loss(output, batch, unmasked_only=False):
    """Cross-entropy of original tokens at every content position.

    With ``unmasked_only`` the prediction set is restricted to content
    positions outside M, which is the extra term the extended-mlm variant
    adds on top of the standard masked loss.
    """
    flags = batch.content_flags()
    if unmasked_only:
        flags = flags & ~batch.mask_flags
    if not flags.any():
        raise ContractError("token-prediction loss with no eligible positions")
    return _cross_entropy_at(output, batch, flags)


# -- contrastive building blocks ----------------------------------------------


def global_bias(h, e):
    """Context vector g = h - e; gradient flows into both inputs."""
    if h.shape != e.shape:
        raise ValueError(f"global_bias dimension mismatch: {h.shape} vs {e.shape}")
    return ad.sub(h, e)


def score(g_x, g_c, tau):
    """Temperature-scaled cosine alignment of two global-bias vectors."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return ad.scale(ad.cosine(g_x, g_c, eps=ad.COSINE_NORM_EPS), 1.0 / tau)


def infonce_loss(s_pos, s_negs):
    """Softmax contrastive loss -log(exp(s+)/(exp(s+) + sum exp(s-))).

    Both arguments are graph scalars/vectors; the value is computed through
    log-softmax so large scores cannot overflow.
    """
    pos = ad.reshape(s_pos, (1,))
    negs = ad.reshape(s_negs, (-1,))
    scores = ad.reshape(ad.concat([pos, negs]), (1, -1))
    logp = ad.log_softmax(scores, axis=-1)
    return ad.neg(ad.take_index(logp, np.array(0)))


def sample_positive(position, content_positions, window, rng):
    """Uniform draw among content positions within the window of the anchor.

    Candidates satisfy 1 <= |candidate - position| <= window.  Returns None
    when the window holds no other content position (anchor is skipped).
    """
    content_positions = np.asarray(content_positions)
    distance = np.abs(content_positions - position)
    eligible = content_positions[(distance >= 1) & (distance <= window)]
    if eligible.size == 0:
        return None
    return int(eligible[rng.integers(eligible.size)])


def sample_negatives(anchor_row, batch, k, rng):
    """K content positions from other rows of the batch.

    Without replacement when the candidate pool has at least K positions,
    otherwise with replacement.  Returns None when other rows hold no
    content at all.
    """
    if batch.num_rows < 2:
        raise ConfigurationError(
            "contrastive negatives need a batch of >= 2 sequences")
    content = batch.content_flags()
    content[anchor_row] = False
    pool = np.argwhere(content)  # (row, pos) in row-major order
    if pool.shape[0] == 0:
        return None
    if pool.shape[0] >= k:
        picks = rng.choice(pool.shape[0], size=k, replace=False)
    else:
        picks = rng.choice(pool.shape[0], size=k, replace=True)
    return [(int(r), int(p)) for r, p in pool[picks]]


def contrastive_samples(batch, config, streams):
    """Draw the anchor set and its positives/negatives for one batch.

    Anchors are content positions (all of them for taco, only masked ones
    for concentrated_taco), visited in row-major order.  Each anchor draws
    from its own (row, position)-keyed stream: positive first, then
    negatives.
    """
    anchor_flags = batch.content_flags()
    if config.variant == "concentrated_taco":
        anchor_flags = anchor_flags & batch.mask_flags
    samples = []
    content = batch.content_flags()
    for row in range(batch.num_rows):
        row_content = np.flatnonzero(content[row])
        for pos in np.flatnonzero(anchor_flags[row]):
            rng = streams.anchor(row, int(pos))
            positive = sample_positive(int(pos), row_content, config.window, rng)
            if positive is None:
                continue
            negatives = sample_negatives(row, batch, config.negatives, rng)
            if negatives is None:
                continue
            samples.append(ContrastiveSample(
                anchor=(row, int(pos)), positive=(row, positive),
                negatives=negatives))
    return samples


def _token_ids_for(batch, config):
    if config.anchor_embedding_source == "original_token":
        return batch.original_ids
    return batch.input_ids


def tc_loss(output, batch, params, config, streams):
    """Contrastive alignment loss over all drawn anchors of a batch.

    Assembles one batched graph: rows of the flattened hidden states and of
    the embedding table are gathered per participant, global biases and
    cosine scores are formed as [anchors x (1+K)] matrices, and the
    per-anchor losses are combined with two-level (within-sequence, then
    across-sequence) averaging.
    """
    if batch.num_rows < 2:
        raise ConfigurationError(
            "contrastive loss requires batches of >= 2 sequences")
    samples = contrastive_samples(batch, config, streams)
    if not samples:
        raise ContractError("no eligible contrastive anchors in batch")

    length = batch.seq_len
    k = config.negatives
    token_ids = _token_ids_for(batch, config)

    def flat(rp):
        return rp[0] * length + rp[1]

    anchor_flat = np.array([flat(s.anchor) for s in samples])
    pos_flat = np.array([flat(s.positive) for s in samples])
    neg_flat = np.array([[flat(n) for n in s.negatives] for s in samples])
    ids_flat = token_ids.reshape(-1)
    anchor_tok = ids_flat[anchor_flat]
    pos_tok = ids_flat[pos_flat]
    neg_tok = ids_flat[neg_flat.reshape(-1)]

    m = len(samples)
    h_flat = ad.reshape(output.hidden, (batch.num_rows * length, -1))
    table = params["tok_emb"]
    g_anchor = ad.sub(ad.embedding_gather(h_flat, anchor_flat),
                      ad.embedding_gather(table, anchor_tok))
    g_pos = ad.sub(ad.embedding_gather(h_flat, pos_flat),
                   ad.embedding_gather(table, pos_tok))
    g_neg = ad.sub(ad.embedding_gather(h_flat, neg_flat.reshape(-1)),
                   ad.embedding_gather(table, neg_tok))

    eps = ad.COSINE_NORM_EPS
    n_anchor = ad.l2_norm(g_anchor, axis=-1, keepdims=True, eps=eps)  # [m,1]
    n_pos = ad.l2_norm(g_pos, axis=-1, keepdims=True, eps=eps)
    n_neg = ad.l2_norm(g_neg, axis=-1, keepdims=True, eps=eps)        # [m*K,1]

    s_pos = ad.div(ad.tsum(ad.mul(g_anchor, g_pos), axis=-1, keepdims=True),
                   ad.mul(n_anchor, n_pos))                           # [m,1]
    rep = np.repeat(np.arange(m), k)
    anchor_rep = ad.embedding_gather(g_anchor, rep)                   # [m*K,d]
    n_anchor_rep = ad.embedding_gather(n_anchor, rep)                 # [m*K,1]
    s_neg = ad.div(ad.tsum(ad.mul(anchor_rep, g_neg), axis=-1, keepdims=True),
                   ad.mul(n_anchor_rep, n_neg))
    scores = ad.scale(ad.concat([s_pos, ad.reshape(s_neg, (m, k))], axis=1),
                      1.0 / config.temperature)                       # [m,1+K]
    logp = ad.log_softmax(scores, axis=-1)
    losses = ad.neg(ad.take_index(logp, np.zeros(m, dtype=np.int64)))  # [m]

    anchor_rows = np.array([s.anchor[0] for s in samples])
    rows, counts = np.unique(anchor_rows, return_counts=True)
    per_row = dict(zip(rows, counts))
    weights = np.array([1.0 / (len(rows) * per_row[r]) for r in anchor_rows])
    return ad.tsum(ad.mul(losses, ad.constant(weights)))


def total_loss(output, batch, params, config, streams):
    """Dispatch the configured variant and return the component breakdown."""
    config.validate()
    mlm = mlm_loss(output, batch)
    if config.variant == "mlm_only":
        return LossBreakdown(total=mlm, mlm=mlm)
    if config.variant == "extended_mlm":
        tp = tp_loss(output, batch, unmasked_only=True)
        return LossBreakdown(total=ad.add(mlm, tp), mlm=mlm, tp=tp)
    tc = tc_loss(output, batch, params, config, streams)
    if config.tc_weight != 1.0:
        total = ad.add(mlm, ad.scale(tc, config.tc_weight))
    else:
        total = ad.add(mlm, tc)
    return LossBreakdown(total=total, mlm=mlm, tc=tc)
