"""Topic detection baselines for long sign-language feature sequences."""

__version__ = "0.1.0"

from .errors import DataError, SignTopicError, TrainingDivergence, UsageError

__all__ = [
    "DataError",
    "SignTopicError",
    "TrainingDivergence",
    "UsageError",
    "__version__",
]
