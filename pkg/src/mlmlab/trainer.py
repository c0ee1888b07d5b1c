"""Optimization loop: AdamW with linear warmup/decay, gradient clipping,
metrics emission, scheduled probes, and checkpoint/resume.

Determinism contract: every row of the metrics CSV except elapsed_ms is a
pure function of (config, seed).  Batches, masking, dropout, contrastive
sampling, and probe sampling are all keyed by (seed, step), never drawn from
a shared stateful generator, so resuming from a checkpoint continues the
exact uninterrupted trajectory.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import probes as pb
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_from_dict, config_to_dict
from .encoder import forward, init
from .errors import CheckpointError, ConfigurationError, ContractError
from .objectives import LossBreakdown, mlm_loss, total_loss
from .rng import AnchorStreams, stream

__all__ = ["METRIC_COLUMNS", "lr_at", "clip_grad_norm", "AdamW",
           "MetricsWriter", "TrainResult", "train", "compare"]

METRIC_COLUMNS = ("step", "loss_total", "loss_mlm", "loss_tc", "loss_tp",
                  "lr", "grad_norm", "masked_acc", "intra_cos", "inter_cos",
                  "contextual_score", "ratio_l1", "ratio_l2", "ratio_l10",
                  "ratio_cos", "ratio_dot", "elapsed_ms")


def lr_at(step, config):
    """Linear 0 -> lr over warmup, then linear lr -> 0 at total_steps."""
    if step <= 0:
        return 0.0
    if step <= config.warmup_steps and step < config.total_steps:
        return config.lr * step / config.warmup_steps
    if step >= config.total_steps:
        return 0.0
    return config.lr * (config.total_steps - step) \
        / (config.total_steps - config.warmup_steps)


def clip_grad_norm(tensors, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns (pre-clip norm, applied scale).
    """
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    scale = 1.0 if norm <= max_norm else max_norm / norm
    if scale != 1.0:
        for t in tensors:
            if t.grad is not None:
                t.grad *= scale
    return norm, scale


class AdamW:
    """Decoupled-weight-decay Adam over the trainable parameters.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.
    Frozen tensors get no moment state and are never touched.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.trainable()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.trainable()}

    def step(self, lr):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.params.trainable():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            # both terms reference the pre-update parameter value
            t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps) \
                + lr * self.weight_decay * t.data

    def state_tensors(self):
        out = {"opt.step": np.array([self.step_count], dtype=np.int64)}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors):
        self.step_count = int(tensors["opt.step"][0])
        for name in self.m:
            key = f"opt.m.{name}"
            if key not in tensors:
                raise CheckpointError(f"optimizer state misses {key}")
            self.m[name] = tensors[key].astype(np.float64, copy=True)
            self.v[name] = tensors[f"opt.v.{name}"].astype(np.float64,
                                                           copy=True)


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class MetricsWriter:
    """Append-only CSV with the fixed metric header."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(METRIC_COLUMNS) + "\n")
        self._fh.flush()

    def write(self, **cells):
        unknown = set(cells) - set(METRIC_COLUMNS)
        if unknown:
            raise ValueError(f"unknown metric columns {sorted(unknown)}")
        row = ",".join(_format_cell(cells.get(c)) for c in METRIC_COLUMNS)
        self._fh.write(row + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


@dataclass
class TrainResult:
    metrics_path: Path
    checkpoint_path: Path
    vocab_path: Path
    steps_run: int
    final_loss: float | None = None
    final_probe: pb.SimilarityReport | None = None
    pair_metrics_path: Path | None = field(default=None)


def _resolve_vocab(config, out_dir):
    if config.vocab:
        vocab = cp.Vocabulary.load(config.vocab)
        if config.encoder.vocab_size and config.encoder.vocab_size != vocab.size:
            raise ConfigurationError(
                f"encoder.vocab_size {config.encoder.vocab_size} does not "
                f"match vocabulary file of {vocab.size} tokens")
        vocab_path = Path(config.vocab)
    else:
        cap = config.encoder.vocab_size or 2000
        vocab = cp.build_vocab(config.corpus, max_size=cap)
        vocab_path = out_dir / "vocab.txt"
        vocab.save(vocab_path)
    config.encoder.vocab_size = vocab.size
    return vocab, vocab_path


def _core_config_fields(config_dict):
    skip = {"out_dir", "resume_from", "vocab", "corpus", "probe_corpus",
            "pairs", "preset", "checkpoint_every", "probe_every",
            "probe_sample_limit"}
    return {k: v for k, v in config_dict.items() if k not in skip}


def _masked_accuracy(output, batch):
    flags = batch.mask_flags
    if not flags.any():
        return None
    predicted = output.logits.data[flags].argmax(axis=-1)
    return float((predicted == batch.original_ids[flags]).mean())


def _probe_cells(report):
    return {
        "intra_cos": report.intra["cosine"],
        "inter_cos": report.inter["cosine"],
        "contextual_score": report.contextual_score,
        "ratio_l1": report.ratio["l1"],
        "ratio_l2": report.ratio["l2"],
        "ratio_l10": report.ratio["l10"],
        "ratio_cos": report.ratio["cosine"],
        "ratio_dot": report.ratio["dot"],
    }


class _PairWriter:
    """Companion CSV for embedding-pair similarity (the fixed metric header
    has no column for it)."""

    def __init__(self, path, pair_set):
        self.path = Path(path)
        names = [f"{w1}:{w2}" for w1, w2, _, _ in pair_set.pairs]
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(["step", "mean_cosine"] + names) + "\n")
        self._fh.flush()

    def write(self, step, similarity):
        cells = [str(step), repr(similarity.mean)]
        cells += [repr(c) for _, _, c in similarity.per_pair]
        self._fh.write(",".join(cells) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def train(config):
    """Run the configured pretraining loop; returns artifact paths."""
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab, vocab_path = _resolve_vocab(config, out_dir)
    config.vocab = str(vocab_path)  # checkpoints record where it lives
    config.encoder.validate()

    sequences = cp.load_corpus(config.corpus, vocab,
                               config.encoder.max_positions)
    probe_sequences = None
    if config.probe_corpus:
        probe_sequences = cp.load_corpus(config.probe_corpus, vocab,
                                         config.encoder.max_positions)
    pair_set = None
    if config.pairs:
        pair_set = pb.load_word_pairs(config.pairs, vocab)
        if pair_set.skipped:
            warnings.warn(
                f"{len(pair_set.skipped)} word pairs missing from the "
                f"vocabulary were skipped: {pair_set.skipped[:5]} ...")
        if not pair_set.pairs:
            raise ConfigurationError(
                f"no pair in {config.pairs} resolves against the vocabulary")

    start_step = 0
    params = None
    optimizer = None
    if config.resume_from:
        saved = load_checkpoint(config.resume_from)
        saved_config = config_from_dict(saved.config)
        ours = _core_config_fields(config_to_dict(config))
        theirs = _core_config_fields(config_to_dict(saved_config))
        if ours != theirs:
            diff = [k for k in ours if ours[k] != theirs.get(k)]
            raise ConfigurationError(
                f"resume config mismatch on fields {diff}")
        params = init(config.encoder, config.seed)
        for name, t in params.items():
            if name not in saved.tensors:
                raise CheckpointError(f"checkpoint misses parameter {name}")
            if saved.tensors[name].shape != t.data.shape:
                raise CheckpointError(
                    f"parameter {name} shape mismatch: expected "
                    f"{t.data.shape}, found {saved.tensors[name].shape}")
            t.data = saved.tensors[name].astype(np.float64, copy=True)
        optimizer = AdamW(params, config.adam_beta1, config.adam_beta2,
                          config.adam_eps, config.weight_decay)
        optimizer.load_state(saved.tensors)
        start_step = saved.step
    else:
        params = init(config.encoder, config.seed)
        optimizer = AdamW(params, config.adam_beta1, config.adam_beta2,
                          config.adam_eps, config.weight_decay)

    metrics = MetricsWriter(out_dir / "metrics.csv")
    pair_writer = None
    if pair_set is not None:
        pair_writer = _PairWriter(out_dir / "pair_similarity.csv", pair_set)

    def run_probes(step):
        cells = {}
        if probe_sequences is not None:
            report = pb.probe_model(params, probe_sequences, config.seed,
                                    step, limit=config.probe_sample_limit)
            cells = _probe_cells(report)
        else:
            report = None
        if pair_writer is not None:
            similarity = pb.embedding_similarity(params["tok_emb"].data,
                                                 pair_set)
            pair_writer.write(step, similarity)
        return report, cells

    probes_on = config.probe_every > 0 and (probe_sequences is not None
                                            or pair_set is not None)
    last_report = None
    if probes_on and start_step == 0:
        t0 = time.perf_counter()
        last_report, cells = run_probes(0)
        metrics.write(step=0, elapsed_ms=(time.perf_counter() - t0) * 1e3,
                      **cells)

    def checkpoint_tensors():
        tensors = {name: t.data for name, t in params.items()}
        tensors.update(optimizer.state_tensors())
        return tensors

    def save(step, name):
        path = out_dir / name
        save_checkpoint(path, config_to_dict(config), step,
                        {**checkpoint_tensors(),
                         "rng_state": np.array([config.seed, step],
                                               dtype=np.uint64)})
        return path

    final_loss = None
    last_path = None
    try:
        for step in range(start_step + 1, config.total_steps + 1):
            t0 = time.perf_counter()
            ids, pads, seq_idx = cp.batch_for_step(
                sequences, config.batch_size, config.seed, step)
            batch = cp.apply_dynamic_masking(
                ids, pads, seq_idx, vocab.size, config.mask_ratio,
                stream(config.seed, "mask", step))
            drop_rng = stream(config.seed, "dropout", step) \
                if config.encoder.dropout > 0 else None
            output = forward(params, batch, train=True, drop_rng=drop_rng)

            if config.objective.uses_tc and batch.num_rows < 2:
                # only possible on a trailing partial batch of one sequence
                warnings.warn(
                    f"step {step}: single-sequence batch, contrastive term "
                    "skipped")
                mlm = mlm_loss(output, batch)
                breakdown = LossBreakdown(total=mlm, mlm=mlm)
            else:
                breakdown = total_loss(output, batch, params,
                                       config.objective,
                                       AnchorStreams(config.seed, step))
            total = breakdown.total
            if not np.isfinite(total.data).all():
                raise ContractError(
                    f"non-finite loss at step {step}: {total.data}")
            params.zero_grads()
            ad.backward(total)
            grad_norm, _ = clip_grad_norm(
                [t for _, t in params.trainable()], config.max_grad_norm)
            lr_t = lr_at(step, config)
            optimizer.step(lr_t)
            final_loss = total.item()

            cells = {}
            if probes_on and config.probe_every > 0 \
                    and step % config.probe_every == 0:
                last_report, cells = run_probes(step)
            metrics.write(
                step=step, loss_total=total.item(),
                loss_mlm=None if breakdown.mlm is None else breakdown.mlm.item(),
                loss_tc=None if breakdown.tc is None else breakdown.tc.item(),
                loss_tp=None if breakdown.tp is None else breakdown.tp.item(),
                lr=lr_t, grad_norm=grad_norm,
                masked_acc=_masked_accuracy(output, batch),
                elapsed_ms=(time.perf_counter() - t0) * 1e3, **cells)

            if config.checkpoint_every > 0 \
                    and step % config.checkpoint_every == 0 \
                    and step != config.total_steps:
                save(step, f"step{step}.ckpt")
        last_path = save(config.total_steps, "final.ckpt")
    finally:
        metrics.close()
        if pair_writer is not None:
            pair_writer.close()

    return TrainResult(
        metrics_path=metrics.path, checkpoint_path=last_path,
        vocab_path=vocab_path, steps_run=config.total_steps - start_step,
        final_loss=final_loss, final_probe=last_report,
        pair_metrics_path=pair_writer.path if pair_writer else None)


def compare(config_a, config_b, out_path):
    """Run two configs (shared corpus and seed) and join their metrics by step."""
    if config_a.corpus != config_b.corpus:
        raise ConfigurationError("compared runs must share the corpus")
    if config_a.seed != config_b.seed:
        raise ConfigurationError("compared runs must share the seed")
    if config_a.probe_every != config_b.probe_every:
        raise ConfigurationError(
            f"probe schedules differ: {config_a.probe_every} vs "
            f"{config_b.probe_every}")
    if Path(config_a.out_dir).resolve() == Path(config_b.out_dir).resolve():
        raise ConfigurationError(
            "compared runs need distinct out_dir values")
    result_a = train(config_a)
    result_b = train(config_b)

    def read_rows(path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = lines[0].split(",")
        rows = {}
        for line in lines[1:]:
            cells = line.split(",")
            rows[int(cells[0])] = dict(zip(header, cells))
        return rows

    rows_a = read_rows(result_a.metrics_path)
    rows_b = read_rows(result_b.metrics_path)
    joined_header = ["step"] + [f"{c}_a" for c in METRIC_COLUMNS[1:]] \
        + [f"{c}_b" for c in METRIC_COLUMNS[1:]]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(joined_header) + "\n")
        for step in sorted(set(rows_a) | set(rows_b)):
            ra = rows_a.get(step, {})
            rb = rows_b.get(step, {})
            cells = [str(step)]
            cells += [ra.get(c, "") for c in METRIC_COLUMNS[1:]]
            cells += [rb.get(c, "") for c in METRIC_COLUMNS[1:]]
            fh.write(",".join(cells) + "\n")
    return out_path, result_a, result_b
