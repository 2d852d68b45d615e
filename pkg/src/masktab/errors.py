"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: protocol and ingestion failures exit 1,
numeric failures (NaN/Inf reaching a computation) exit 2.
"""

from __future__ import annotations


class MaskTabError(Exception):
    """Base class for all package-raised errors."""


class ProtocolError(MaskTabError):
    """A caller violated a documented contract (bad config, bad arguments)."""


class IngestionError(MaskTabError):
    """Input data could not be parsed or fails schema validation."""


class EncodingError(ProtocolError):
    """A value cannot be encoded (e.g. category missing from the vocabulary)."""


class UndefinedMetricError(ProtocolError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class DimensionError(MaskTabError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(MaskTabError):
    """A NaN or Inf reached a computation that requires finite values."""
