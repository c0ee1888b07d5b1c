"""Text ingestion, vocabulary construction, batching, and dynamic masking.

Tokenization is deliberately simple: lowercase word-level with [UNK] for
out-of-vocabulary words.  Subword training is out of scope at this scale and
the objectives are tokenizer-agnostic.

Special tokens occupy the first five ids in fixed order; a position is
"content" exactly when its (pre-corruption) id is a non-special vocabulary
word.  Content positions are the only ones eligible for masking, for
contrastive anchors/positives/negatives, and for probe sampling.
"""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError

__all__ = [
    "SPECIAL_TOKENS", "PAD_ID", "MASK_ID", "CLS_ID", "SEP_ID", "UNK_ID",
    "FIRST_CONTENT_ID", "Vocabulary", "MaskedBatch", "tokenize", "build_vocab",
    "encode", "load_corpus", "pad_batch", "make_batches", "batch_for_step",
    "batches_per_epoch", "apply_dynamic_masking", "mask_count",
]

SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]")
PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = range(5)
FIRST_CONTENT_ID = len(SPECIAL_TOKENS)

_WORD_RE = re.compile(r"[a-z0-9']+")


def tokenize(line):
    """Lowercase word tokens; punctuation acts as a separator and is dropped."""
    return _WORD_RE.findall(line.lower())


@dataclass
class Vocabulary:
    """Dense token<->id maps with the five special tokens at ids 0-4."""

    id_to_token: list
    token_to_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.id_to_token[:FIRST_CONTENT_ID]) != list(SPECIAL_TOKENS):
            raise IngestionError(
                f"vocabulary must start with {SPECIAL_TOKENS}, "
                f"got {self.id_to_token[:FIRST_CONTENT_ID]}")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise IngestionError("vocabulary contains duplicate tokens")

    @property
    def size(self):
        return len(self.id_to_token)

    def id_of(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path):
        Path(path).write_text(
            "\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        tokens = [ln for ln in lines if ln]
        if not tokens:
            raise IngestionError(f"vocabulary file {path} is empty")
        return cls(tokens)


def build_vocab(corpus_path, max_size=2000, min_count=1):
    """Rank corpus words by frequency (ties lexicographic) under the specials.

    ``max_size`` caps the total vocabulary, specials included, so at most
    ``max_size - 5`` words survive; ``min_count`` drops rare words to [UNK].
    """
    counts = Counter()
    try:
        with open(corpus_path, encoding="utf-8") as fh:
            for line in fh:
                counts.update(tokenize(line))
    except OSError as exc:
        raise IngestionError(f"cannot read corpus {corpus_path}: {exc}") from exc
    if not counts:
        raise IngestionError(f"corpus {corpus_path} contains no tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, c in ranked if c >= min_count]
    words = words[:max(0, max_size - FIRST_CONTENT_ID)]
    return Vocabulary(list(SPECIAL_TOKENS) + words)


def encode(vocab, line, max_len):
    """[CLS] + word ids + [SEP], truncated to ``max_len`` keeping both markers."""
    ids = [vocab.id_of(t) for t in tokenize(line)]
    ids = ids[:max_len - 2]
    return np.array([CLS_ID] + ids + [SEP_ID], dtype=np.int64)


def load_corpus(path, vocab, max_len):
    """Encode one document per line; blank lines are skipped."""
    sequences = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    sequences.append(encode(vocab, line, max_len))
    except OSError as exc:
        raise IngestionError(f"cannot read corpus {path}: {exc}") from exc
    if not sequences:
        raise IngestionError(f"corpus {path} contains no documents")
    return sequences


@dataclass
class MaskedBatch:
    """A padded batch after corruption.

    ``input_ids`` is what the encoder sees; ``original_ids`` the ground
    truth; ``mask_flags`` marks the prediction set M (a subset of content
    positions, including the 10% that kept their original id);
    ``seq_index`` maps each row back to its corpus sequence.
    """

    input_ids: np.ndarray
    original_ids: np.ndarray
    mask_flags: np.ndarray
    pad_flags: np.ndarray
    seq_index: np.ndarray

    @property
    def num_rows(self):
        return self.input_ids.shape[0]

    @property
    def seq_len(self):
        return self.input_ids.shape[1]

    def content_flags(self):
        """Positions holding a non-special vocabulary word (pre-corruption)."""
        return self.original_ids >= FIRST_CONTENT_ID


def pad_batch(sequences, seq_indices):
    """Right-pad encoded sequences with [PAD] into one id matrix."""
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    for r, s in enumerate(sequences):
        ids[r, :len(s)] = s
    return ids, ids == PAD_ID, np.asarray(seq_indices, dtype=np.int64)


def batches_per_epoch(num_sequences, batch_size):
    return -(-num_sequences // batch_size)


def _epoch_order(num_sequences, batch_size, rng):
    return rng.permutation(num_sequences)


def make_batches(sequences, batch_size, rng):
    """One epoch of shuffled, padded batches; the final partial batch is kept.

    Yields (original_ids, pad_flags, seq_index) triples; masking is applied
    separately so the same epoch stream serves every objective.
    """
    order = _epoch_order(len(sequences), batch_size, rng)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        yield pad_batch([sequences[i] for i in chunk], chunk)


def batch_for_step(sequences, batch_size, seed, step):
    """The padded batch consumed at 1-based training step ``step``.

    A pure function of (corpus, batch_size, seed, step): epoch k is the
    permutation under stream(seed, "shuffle", k), and steps walk epochs in
    order.  Resume needs no iterator state.
    """
    from .rng import stream
    per_epoch = batches_per_epoch(len(sequences), batch_size)
    epoch, index = divmod(step - 1, per_epoch)
    order = _epoch_order(len(sequences), batch_size, stream(seed, "shuffle", epoch))
    chunk = order[index * batch_size:(index + 1) * batch_size]
    return pad_batch([sequences[i] for i in chunk], chunk)


def mask_count(content_count, mask_ratio):
    """|M| for one sequence: nearest integer (half up), floored at one."""
    return max(1, int(np.floor(mask_ratio * content_count + 0.5)))


def apply_dynamic_masking(ids, pad_flags, seq_index, vocab_size, mask_ratio, rng):
    """Select and corrupt the prediction set M for every row.

    Per row, ``mask_count`` content positions are drawn uniformly without
    replacement; each selected position independently becomes [MASK] (80%),
    a random non-special id (10%), or keeps its id while staying in M (10%).
    Rows with no content are left unmasked with a warning.
    """
    original = np.array(ids, copy=True)
    input_ids = np.array(ids, copy=True)
    mask_flags = np.zeros_like(pad_flags)
    for r in range(original.shape[0]):
        content = np.flatnonzero(original[r] >= FIRST_CONTENT_ID)
        if content.size == 0:
            warnings.warn(
                f"sequence {int(seq_index[r])} has no content tokens; "
                "skipped by masking")
            continue
        chosen = rng.choice(content, size=mask_count(content.size, mask_ratio),
                            replace=False)
        mask_flags[r, chosen] = True
        u = rng.random(chosen.size)
        input_ids[r, chosen[u < 0.8]] = MASK_ID
        randomized = chosen[(u >= 0.8) & (u < 0.9)]
        if randomized.size:
            input_ids[r, randomized] = rng.integers(
                FIRST_CONTENT_ID, vocab_size, size=randomized.size)
        # remaining 10%: position stays in M with its original id
    return MaskedBatch(input_ids=input_ids, original_ids=original,
                       mask_flags=mask_flags, pad_flags=pad_flags,
                       seq_index=seq_index)
