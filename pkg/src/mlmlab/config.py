"""Run configuration: a flat key=value file, overridable flag-by-flag.

Nested encoder/objective fields use dotted keys (``encoder.num_layers``,
``objective.variant``).  The same dotted names work as command-line flags;
flags win over the file, the file wins over defaults.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigurationError
from .objectives import ObjectiveConfig

__all__ = ["TrainConfig", "FIELD_HELP", "parse_config_file", "build_config",
           "PRESETS", "config_to_dict", "config_from_dict"]


@dataclass
class TrainConfig:
    corpus: str = ""
    probe_corpus: str | None = None
    pairs: str | None = None
    vocab: str | None = None
    out_dir: str = "run"
    resume_from: str | None = None
    preset: str | None = None
    lr: float = 1e-4
    warmup_steps: int = 250
    total_steps: int = 5000
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    seed: int | None = None
    probe_every: int = 500
    probe_sample_limit: int | None = None
    checkpoint_every: int = 1000
    mask_ratio: float = 0.15
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def validate(self):
        if not self.corpus:
            raise ConfigurationError("corpus path is required")
        if self.seed is None:
            raise ConfigurationError("seed is required")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be positive")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ConfigurationError(
                f"warmup_steps must lie in [0, total_steps], got "
                f"{self.warmup_steps} vs {self.total_steps}")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        self.objective.validate()
        if self.objective.uses_tc and self.batch_size < 2:
            raise ConfigurationError(
                "contrastive objectives need batch_size >= 2 "
                "(negatives come from other sequences)")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ConfigurationError("mask_ratio must be in (0, 1]")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ConfigurationError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0 or self.max_grad_norm <= 0:
            raise ConfigurationError(
                "adam_eps and max_grad_norm must be positive")
        # encoder.vocab_size may still be 0 here (inferred from the corpus)
        if self.encoder.vocab_size:
            self.encoder.validate()


# name -> (converter tag, help); dotted names address the nested configs
FIELD_HELP = {
    "corpus": ("str", "training corpus, one document per line"),
    "probe_corpus": ("optstr", "held-out text for contextual probes"),
    "pairs": ("optstr", "tab-separated word pairs for embedding tracking"),
    "vocab": ("optstr", "existing vocabulary file (else built from corpus)"),
    "out_dir": ("str", "output directory for metrics/checkpoints"),
    "resume_from": ("optstr", "checkpoint to resume from"),
    "preset": ("optstr", "named preset: desk, ref-small, ref-base"),
    "lr": ("float", "peak learning rate"),
    "warmup_steps": ("int", "linear warmup steps"),
    "total_steps": ("int", "total optimizer steps"),
    "batch_size": ("int", "sequences per batch"),
    "adam_beta1": ("float", "AdamW beta1"),
    "adam_beta2": ("float", "AdamW beta2"),
    "adam_eps": ("float", "AdamW epsilon"),
    "weight_decay": ("float", "decoupled weight decay"),
    "max_grad_norm": ("float", "global gradient-norm clip"),
    "seed": ("optint", "run seed (required for pretrain/compare)"),
    "probe_every": ("int", "probe every N steps (0 disables)"),
    "probe_sample_limit": ("optint", "cap on probe token samples"),
    "checkpoint_every": ("int", "checkpoint every N steps (0 = final only)"),
    "mask_ratio": ("float", "fraction of content tokens to mask"),
    "encoder.vocab_size": ("int", "vocabulary size (0 = infer from corpus)"),
    "encoder.num_layers": ("int", "transformer layers"),
    "encoder.hidden_size": ("int", "hidden dimension d"),
    "encoder.num_heads": ("int", "attention heads"),
    "encoder.ffn_size": ("int", "feed-forward inner size"),
    "encoder.max_positions": ("int", "maximum sequence length"),
    "encoder.dropout": ("float", "dropout probability"),
    "encoder.tie_embeddings": ("bool", "share embeddings with the output"),
    "encoder.freeze_embeddings": ("bool", "keep the embedding table fixed"),
    "encoder.init_embeddings_from": ("optstr",
                                     "checkpoint whose embeddings seed E"),
    "encoder.init_range": ("float", "truncated-normal init std"),
    "objective.variant": ("str",
                          "mlm_only | taco | concentrated_taco | extended_mlm"),
    "objective.negatives": ("int", "contrastive negatives K"),
    "objective.window": ("int", "positive window radius W"),
    "objective.temperature": ("float", "contrastive temperature tau"),
    "objective.anchor_embedding_source": ("str",
                                          "original_token | input_token"),
    "objective.tc_weight": ("float", "contrastive loss multiplier"),
}

PRESETS = {
    # 2 layers, d=64: the tested desk-scale configuration
    "desk": {
        "encoder.num_layers": "2", "encoder.hidden_size": "64",
        "encoder.num_heads": "4", "encoder.ffn_size": "256",
        "encoder.max_positions": "128", "encoder.vocab_size": "2000",
        "total_steps": "5000", "warmup_steps": "250", "batch_size": "16",
    },
    # the reference models' published configurations; shipped, not tested
    "ref-small": {
        "encoder.num_layers": "4", "encoder.hidden_size": "512",
        "encoder.num_heads": "8", "encoder.ffn_size": "2048",
        "encoder.max_positions": "512", "encoder.vocab_size": "30522",
        "encoder.dropout": "0.1",
        "total_steps": "250000", "warmup_steps": "2500", "batch_size": "1280",
    },
    "ref-base": {
        "encoder.num_layers": "12", "encoder.hidden_size": "768",
        "encoder.num_heads": "12", "encoder.ffn_size": "3072",
        "encoder.max_positions": "512", "encoder.vocab_size": "30522",
        "encoder.dropout": "0.1",
        "total_steps": "500000", "warmup_steps": "10000", "batch_size": "1280",
    },
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _convert(key, raw):
    kind = FIELD_HELP[key][0]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "optint":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "optstr":
            return None if raw.lower() in ("", "none") else raw
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {exc}") from exc


def parse_config_file(path):
    """Flat key=value lines; blank lines and # comments ignored."""
    mapping = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in FIELD_HELP:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        mapping[key] = value.strip()
    return mapping


def build_config(file_mapping=None, overrides=None):
    """Merge defaults <- preset <- config file <- flag overrides."""
    merged = {}
    staged = dict(file_mapping or {})
    staged.update(overrides or {})
    preset = staged.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    merged.update(file_mapping or {})
    merged.update(overrides or {})

    config = TrainConfig()
    for key, raw in merged.items():
        if key not in FIELD_HELP:
            raise ConfigurationError(f"unknown config key {key!r}")
        value = _convert(key, raw)
        if key.startswith("encoder."):
            setattr(config.encoder, key.split(".", 1)[1], value)
        elif key.startswith("objective."):
            setattr(config.objective, key.split(".", 1)[1], value)
        else:
            setattr(config, key, value)
    return config


def config_to_dict(config):
    return asdict(config)


def config_from_dict(data):
    data = dict(data)
    encoder = EncoderConfig(**data.pop("encoder"))
    objective = ObjectiveConfig(**data.pop("objective"))
    known = {f.name for f in fields(TrainConfig)}
    extra = set(data) - known
    if extra:
        raise ConfigurationError(f"unknown config entries {sorted(extra)}")
    return TrainConfig(encoder=encoder, objective=objective, **data)
