"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration and flag
misuse exit 1, anything wrong with corpora or stored state exits 2,
and numeric failures (non-finite values, impossible sampling targets)
exit 3.
"""

from __future__ import annotations


class MilesError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigError(MilesError):
    """Invalid configuration value or combination."""


class UsageError(MilesError):
    """Malformed command line invocation."""


class DataError(MilesError):
    """Corpus files or manifests are missing, malformed, or inconsistent."""


class VocabError(DataError):
    """A caption contains tokens outside the corpus vocabulary."""


class StateError(MilesError):
    """Checkpoint or training state is absent or incompatible."""


class ContractError(MilesError):
    """An internal precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operands have incompatible shapes."""


class NumericError(MilesError):
    """A forward op produced NaN or Inf, or arithmetic otherwise failed."""


class SamplingError(NumericError):
    """A stochastic sampler could not reach its target within its budget."""


class TrainingFailure(NumericError):
    """Numeric failure during training, annotated with the failing step."""
