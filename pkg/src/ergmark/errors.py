"""Exception hierarchy shared by all ergmark modules."""

from __future__ import annotations


class ErgmarkError(Exception):
    """Base class for every error raised by ergmark."""


class WorkloadError(ErgmarkError):
    """A workload container failed validation.

    ``code`` is a stable machine-readable tag (``missing_file``,
    ``checksum_mismatch``, ``unknown_workload``, ``missing_params``,
    ``extra_params``, ``unsupported_precision``, ``blob_mismatch``, ...).
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class BundleError(ErgmarkError):
    """A result bundle is inconsistent, incomplete or unreadable."""


class KernelError(ErgmarkError):
    """Invalid kernel arguments."""


class NumericalBlowUp(KernelError):
    """A simulation stage produced non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DispatchError(ErgmarkError):
    """A worker failed while executing a partition."""

    def __init__(self, message: str, index_range: tuple[int, int] | None = None):
        super().__init__(message)
        self.index_range = index_range


class DeviceError(ErgmarkError):
    """Requested device does not exist or cannot execute workloads."""


class ProviderError(ErgmarkError):
    """A power provider could not be reached or configured."""


class TraceFormatError(ErgmarkError):
    """An external power trace file could not be parsed."""

    def __init__(self, message: str, lines: list[int] | None = None):
        super().__init__(message)
        self.lines = lines or []


class InsufficientDataError(ErgmarkError):
    """Too few samples or runs to compute the requested quantity."""


class IntegrationError(ErgmarkError):
    """Energy integration window is invalid for the given trace."""


class MeasurementWarning(UserWarning):
    """Measurement succeeded but its quality is questionable."""
