"""Exception hierarchy shared across the package.

Error categories map onto CLI exit codes: usage errors exit 2, data
errors exit 3, training divergence exits 4.
"""


class SignTopicError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(SignTopicError):
    """Invalid flags, configs, or calling conventions."""


class DataError(SignTopicError):
    """Malformed files, shape/width mismatches, bad labels, missing inputs."""


class TrainingDivergence(SignTopicError):
    """Non-finite loss or gradients encountered during optimization."""
