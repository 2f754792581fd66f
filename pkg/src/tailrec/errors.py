"""Failure categories shared across the pipeline; the CLI maps them to exit codes."""


class ConfigError(Exception):
    """Bad configuration: unknown keys, out-of-range values, missing paths."""


class DataError(Exception):
    """Unusable input data: malformed files, empty datasets, violated preconditions."""


class TrainingError(Exception):
    """Optimization failure: divergence, non-finite losses, lineage mismatches."""
