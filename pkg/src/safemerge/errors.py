"""Exception hierarchy shared across the toolkit.

The CLI maps these onto its exit-code contract:
0 success, 2 validation, 3 alignment, 4 external service, 5 I/O.
"""


class SafemergeError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SafemergeError):
    """Bad input: out-of-range hyperparameter, malformed file, schema violation."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class TensorFormatError(ValidationError):
    """Malformed tensor file: bad header, overlapping offsets, unknown dtype."""


class AlignmentError(SafemergeError):
    """Two checkpoints (or dumps) do not line up tensor-for-tensor."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class JudgeError(SafemergeError):
    """External judge endpoint failed (network, HTTP, or exhausted retries)."""


class UnparseableVerdictError(JudgeError):
    """Judge replied with something that is neither 'safe' nor 'unsafe'."""

    def __init__(self, raw):
        super().__init__(f"unparseable judge verdict: {raw!r}")
        self.raw = raw


EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ALIGNMENT = 3
EXIT_EXTERNAL = 4
EXIT_IO = 5
