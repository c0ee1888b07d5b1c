"""Representation-analysis probes.

Two families of measurements, both read-only over the model:

* Contextual statistics: sample tokens from held-out text, pair each with a
  token from the same sequence (intra) and one from a different sequence
  (inter), and compare their last-layer hidden states under five
  measurements (L1, L2, L10 distances; cosine and dot similarities).  The
  headline number is the contextual score, mean intra cosine minus mean
  inter cosine.
* Embedding similarity: cosine between the static embedding rows of given
  word pairs, tracking how related words drift together during training.

Probe randomness comes from its own keyed stream, so probing never perturbs
the training trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import FIRST_CONTENT_ID, pad_batch
from .errors import IngestionError
from .rng import stream

__all__ = ["MEASUREMENTS", "SimilarityReport", "WordPairSet", "PairSimilarity",
           "minkowski_distance", "pair_measurements", "contextual_stats",
           "load_word_pairs", "embedding_similarity", "probe_model"]

MEASUREMENTS = ("l1", "l2", "l10", "cosine", "dot")


def minkowski_distance(a, b, p):
    """(sum |a_i - b_i|^p)^(1/p)."""
    return float((np.abs(a - b) ** p).sum() ** (1.0 / p))


def pair_measurements(a, b):
    """All five measurements for one vector pair."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = max(float(np.linalg.norm(a)), ad.COSINE_NORM_EPS)
    nb = max(float(np.linalg.norm(b)), ad.COSINE_NORM_EPS)
    return {
        "l1": minkowski_distance(a, b, 1),
        "l2": minkowski_distance(a, b, 2),
        "l10": minkowski_distance(a, b, 10),
        "cosine": float(np.dot(a, b)) / (na * nb),
        "dot": float(np.dot(a, b)),
    }


@dataclass
class SimilarityReport:
    """Mean intra/inter measurements, their ratios, and the contextual score.

    A ratio over a zero inter mean is reported as NaN rather than raised, so
    degenerate models do not abort longitudinal probing.
    """

    intra: dict
    inter: dict
    ratio: dict
    contextual_score: float
    sample_count: int

    @classmethod
    def from_sums(cls, intra_sums, inter_sums, count):
        intra = {m: intra_sums[m] / count for m in MEASUREMENTS}
        inter = {m: inter_sums[m] / count for m in MEASUREMENTS}
        ratio = {m: (intra[m] / inter[m]) if inter[m] != 0.0 else float("nan")
                 for m in MEASUREMENTS}
        return cls(intra=intra, inter=inter, ratio=ratio,
                   contextual_score=intra["cosine"] - inter["cosine"],
                   sample_count=count)


def contextual_stats(hidden_rows, rng, limit=None):
    """Intra/inter similarity statistics over per-sequence hidden states.

    ``hidden_rows``: one [n_i, d] array per sequence, holding the last-layer
    states of that sequence's content tokens.  Every token (or a uniform
    subsample of ``limit`` tokens) is paired with one same-sequence partner
    and one other-sequence partner, both uniform.  Tokens whose sequence has
    no second token are skipped.
    """
    hidden_rows = [np.asarray(h, dtype=np.float64) for h in hidden_rows]
    populated = [i for i, h in enumerate(hidden_rows) if len(h)]
    if len(populated) < 2:
        raise ValueError(
            "contextual statistics need at least 2 sequences with content")
    tokens = [(s, k) for s in populated for k in range(len(hidden_rows[s]))]
    sizes = np.array([len(h) for h in hidden_rows])
    total = sizes.sum()

    if limit is not None and limit < len(tokens):
        picked = rng.choice(len(tokens), size=limit, replace=False)
        tokens = [tokens[i] for i in picked]

    intra_sums = dict.fromkeys(MEASUREMENTS, 0.0)
    inter_sums = dict.fromkeys(MEASUREMENTS, 0.0)
    count = 0
    for s, k in tokens:
        own = sizes[s]
        if own < 2:
            continue
        j = int(rng.integers(own - 1))
        j = j if j < k else j + 1  # uniform over same-sequence tokens != k
        other = int(rng.integers(total - own))
        anchor = hidden_rows[s][k]
        intra = pair_measurements(anchor, hidden_rows[s][j])
        # map the flat other-sequence index to (sequence, position)
        for s2 in range(len(hidden_rows)):
            if s2 == s:
                continue
            if other < sizes[s2]:
                inter = pair_measurements(anchor, hidden_rows[s2][other])
                break
            other -= sizes[s2]
        for m in MEASUREMENTS:
            intra_sums[m] += intra[m]
            inter_sums[m] += inter[m]
        count += 1
    if count == 0:
        raise ValueError("no token had an available same-sequence partner")
    return SimilarityReport.from_sums(intra_sums, inter_sums, count)


@dataclass
class WordPairSet:
    """Word pairs with resolved vocabulary ids; unresolved pairs kept aside."""

    pairs: list  # (word1, word2, id1, id2)
    skipped: list = field(default_factory=list)  # (word1, word2)


def load_word_pairs(path, vocab):
    """Read tab-separated word pairs, resolving each against the vocabulary."""
    pairs, skipped = [], []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read pair file {path}: {exc}") from exc
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError(
                f"malformed pair line {line!r} in {path} (expected "
                f"word1<TAB>word2)")
        w1, w2 = (p.strip().lower() for p in parts)
        i1, i2 = vocab.token_to_id.get(w1), vocab.token_to_id.get(w2)
        if i1 is None or i2 is None or i1 < FIRST_CONTENT_ID \
                or i2 < FIRST_CONTENT_ID:
            skipped.append((w1, w2))
        else:
            pairs.append((w1, w2, i1, i2))
    if not pairs and not skipped:
        raise IngestionError(f"pair file {path} holds no pairs")
    return WordPairSet(pairs=pairs, skipped=skipped)


@dataclass
class PairSimilarity:
    per_pair: list  # (word1, word2, cosine)
    mean: float
    skipped: list


def embedding_similarity(table, pair_set):
    """Cosine similarity between embedding rows for each resolved pair."""
    if not pair_set.pairs:
        raise ValueError("no resolved word pairs to measure")
    table = np.asarray(table, dtype=np.float64)
    per_pair = []
    for w1, w2, i1, i2 in pair_set.pairs:
        a, b = table[i1], table[i2]
        na = max(float(np.linalg.norm(a)), ad.COSINE_NORM_EPS)
        nb = max(float(np.linalg.norm(b)), ad.COSINE_NORM_EPS)
        per_pair.append((w1, w2, float(np.dot(a, b)) / (na * nb)))
    mean = float(np.mean([c for _, _, c in per_pair]))
    return PairSimilarity(per_pair=per_pair, mean=mean,
                          skipped=list(pair_set.skipped))


def probe_model(params, sequences, seed, step, limit=None, batch_size=64):
    """Contextual statistics of a model over held-out encoded sequences.

    Forward passes run in eval mode (no masking, no dropout, no graph); the
    rng is keyed by (seed, step) on a probe-only stream.
    """
    from .encoder import forward
    hidden_rows = []
    with ad.no_grad():
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start:start + batch_size]
            ids, pads, _ = pad_batch(chunk, np.arange(len(chunk)))
            out = forward(params, ids, pads, train=False)
            for r in range(len(chunk)):
                content = np.flatnonzero(ids[r] >= FIRST_CONTENT_ID)
                hidden_rows.append(out.hidden.data[r, content])
    return contextual_stats(hidden_rows, stream(seed, "probe", step),
                            limit=limit)
