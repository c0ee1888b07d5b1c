"""Command-line interface.

Subcommands: build-vocab, pretrain, probe, gradcheck, compare.  Training
options come from a key=value config file; every key is also a same-named
flag (dotted for nested fields), and flags override the file.  Exit codes:
0 success, 1 configuration error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import probes as pb
from .checkpoint import load_checkpoint
from .config import FIELD_HELP, build_config, config_from_dict, \
    parse_config_file
from .encoder import EncoderConfig, init
from .errors import ConfigurationError, ContractError
from .objectives import ObjectiveConfig, mlm_loss, tc_loss, total_loss
from .rng import AnchorStreams, stream
from .trainer import compare, train

__all__ = ["main"]


def _add_config_flags(parser):
    for key, (_, help_text) in FIELD_HELP.items():
        parser.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE",
                            help=help_text)


def _collect_overrides(args):
    return {key.split(":", 1)[1]: value
            for key, value in vars(args).items()
            if key.startswith("cfg:") and value is not None}


def _load_train_config(args, require_seed=True):
    file_mapping = parse_config_file(args.config) if args.config else {}
    config = build_config(file_mapping, _collect_overrides(args))
    if require_seed and config.seed is None:
        raise ConfigurationError(
            "--seed is required (given as a flag or config key)")
    return config


def _cmd_build_vocab(args):
    vocab = cp.build_vocab(args.corpus, max_size=args.max_size,
                           min_count=args.min_count)
    vocab.save(args.out)
    print(f"wrote {vocab.size} tokens to {args.out}")
    return 0


def _cmd_pretrain(args):
    config = _load_train_config(args)
    result = train(config)
    print(f"trained {result.steps_run} steps; metrics at "
          f"{result.metrics_path}; checkpoint at {result.checkpoint_path}")
    if result.final_probe is not None:
        print(f"final contextual score "
              f"{result.final_probe.contextual_score:.4f}")
    return 0


def _cmd_compare(args):
    mapping_a = parse_config_file(args.config_a)
    mapping_b = parse_config_file(args.config_b)
    overrides = _collect_overrides(args)
    out_dir = Path(overrides.pop("out_dir", "compare"))
    config_a = build_config(mapping_a, {**overrides,
                                        "out_dir": str(out_dir / "a")})
    config_b = build_config(mapping_b, {**overrides,
                                        "out_dir": str(out_dir / "b")})
    if config_a.seed is None or config_b.seed is None:
        raise ConfigurationError("--seed is required for compare")
    joined, result_a, result_b = compare(config_a, config_b,
                                         out_dir / "compare.csv")
    print(f"joined metrics at {joined}")
    for tag, r in (("a", result_a), ("b", result_b)):
        if r.final_probe is not None:
            print(f"run {tag}: final contextual score "
                  f"{r.final_probe.contextual_score:.4f}")
    return 0


def _cmd_probe(args):
    saved = load_checkpoint(args.checkpoint)
    config = config_from_dict(saved.config)
    vocab_path = args.vocab or config.vocab
    if not vocab_path:
        raise ConfigurationError(
            "no vocabulary: pass --vocab or use a checkpoint whose config "
            "records one")
    vocab = cp.Vocabulary.load(vocab_path)
    params = init(config.encoder, config.seed or 0)
    for name, t in params.items():
        if name in saved.tensors:
            t.data = saved.tensors[name].astype(np.float64, copy=True)
    sequences = cp.load_corpus(args.probe_corpus, vocab,
                               config.encoder.max_positions)
    report = pb.probe_model(params, sequences, seed=args.seed,
                            step=saved.step, limit=args.limit)
    print(f"sampled tokens: {report.sample_count}")
    print(f"contextual score: {report.contextual_score:.6f}")
    print(f"{'measurement':<12}{'intra':>14}{'inter':>14}{'ratio':>14}")
    for m in pb.MEASUREMENTS:
        print(f"{m:<12}{report.intra[m]:>14.6f}{report.inter[m]:>14.6f}"
              f"{report.ratio[m]:>14.6f}")
    if args.pairs:
        pair_set = pb.load_word_pairs(args.pairs, vocab)
        similarity = pb.embedding_similarity(params["tok_emb"].data, pair_set)
        print(f"mean pair cosine: {similarity.mean:.6f} over "
              f"{len(similarity.per_pair)} pairs "
              f"({len(similarity.skipped)} skipped)")
    return 0


def _gradcheck_case(loss_name, seed, sample, delta, tol):
    encoder_config = EncoderConfig(vocab_size=50, num_layers=2,
                                   hidden_size=64, num_heads=4, ffn_size=256,
                                   max_positions=16, dropout=0.0)
    params = init(encoder_config, seed)
    rng = stream(seed, "gradcheck-batch")
    ids = rng.integers(5, 50, size=(4, 12))
    ids[:, 0] = cp.CLS_ID
    ids[:, -1] = cp.SEP_ID
    pads = np.zeros_like(ids, dtype=bool)
    batch = cp.apply_dynamic_masking(ids, pads, np.arange(4), 50, 0.15,
                                     stream(seed, "gradcheck-mask"))
    objective = ObjectiveConfig(variant="taco", negatives=8, window=5)
    from .encoder import forward

    def loss_fn(*_):
        output = forward(params, batch, train=False)
        if loss_name == "mlm":
            return mlm_loss(output, batch)
        if loss_name == "tc":
            return tc_loss(output, batch, params, objective,
                           AnchorStreams(seed, 1))
        return total_loss(output, batch, params, objective,
                          AnchorStreams(seed, 1)).total

    tensors = [t for _, t in params.trainable()]
    return ad.gradcheck(loss_fn, tensors, delta=delta, tol=tol,
                        sample=sample, rng=stream(seed, "gradcheck-coords"))


def _cmd_gradcheck(args):
    losses = ("mlm", "tc", "taco") if args.loss == "all" else (args.loss,)
    worst = 0.0
    failed = False
    for loss_name in losses:
        report = _gradcheck_case(loss_name, args.seed, args.sample,
                                 args.delta, args.tol)
        status = "PASS" if report.passed else "FAIL"
        print(f"{loss_name}: {status} max rel err {report.max_rel_err:.3e} "
              f"(tol {args.tol:.1e})")
        worst = max(worst, report.max_rel_err)
        failed = failed or not report.passed
    print(f"worst case over {len(losses)} losses: {worst:.3e}")
    if failed:
        raise ContractError(f"gradient check failed: {worst:.3e} >= {args.tol}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mlmlab",
        description="Desk-scale laboratory for masked-language-model "
                    "pretraining objectives and representation probes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", type=int, default=2000)
    p.add_argument("--min-count", type=int, default=1)
    p.set_defaults(func=_cmd_build_vocab)

    p = sub.add_parser("pretrain", help="run a pretraining loop")
    p.add_argument("--config", help="key=value configuration file")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("probe", help="probe a checkpoint on held-out text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe-corpus", required=True)
    p.add_argument("--vocab")
    p.add_argument("--pairs")
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check on a toy encoder")
    p.add_argument("--loss", choices=("mlm", "tc", "taco", "all"),
                   default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample", type=int, default=32,
                   help="coordinates checked per tensor (0 = every one)")
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("compare", help="train two configs and join metrics")
    p.add_argument("--config-a", required=True)
    p.add_argument("--config-b", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "sample", None) == 0:
        args.sample = None
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
