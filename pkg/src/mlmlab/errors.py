"""Exception taxonomy mapped to CLI exit codes.

ConfigurationError family -> exit 1 (bad config, bad input files, bad
checkpoints).  ContractError and other runtime/numeric failures -> exit 2.
"""

__all__ = ["ConfigurationError", "IngestionError", "CheckpointError",
           "ContractError"]


class ConfigurationError(Exception):
    """Invalid configuration or unusable input artifact."""


class IngestionError(ConfigurationError):
    """Corpus/vocabulary/pair file cannot be ingested (missing, empty, malformed)."""


class CheckpointError(ConfigurationError):
    """Checkpoint missing, corrupt, or incompatible with the requested config."""


class ContractError(RuntimeError):
    """A runtime precondition failed (empty mask set, no eligible anchors, ...)."""
