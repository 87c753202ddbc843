"""Exception types shared across the package.

Every exception carries a stable ``code`` string so CLI output and logs can
be matched without parsing messages.
"""

from __future__ import annotations


class FedFairError(Exception):
    """Base class for all package errors."""

    code = "error"


class EmptyStratumError(FedFairError):
    """A per-client group has no samples, so its rates are undefined."""

    code = "empty-stratum"

    def __init__(self, client: int, group: int):
        self.client = client
        self.group = group
        super().__init__(f"client {client} has no samples in group {group}")


class EmptyGlobalStratumError(FedFairError):
    """A (label, group) stratum is empty across all clients."""

    code = "empty-global-stratum"

    def __init__(self, y, a):
        self.y = y
        self.a = a
        label = "pooled" if y is None else str(y)
        super().__init__(f"stratum (y={label}, a={a}) is empty across all clients")


class SketchIncompatibleError(FedFairError):
    """Sketches with different universe or compression cannot be merged."""

    code = "sketch-incompatible"


class EmptySketchError(FedFairError):
    """Quantile queries require at least one element."""

    code = "empty-sketch"


class OracleUnsupportedError(FedFairError):
    """The exact probability oracle only handles single-client specs."""

    code = "oracle-unsupported"


class MuUndefinedError(FedFairError):
    """The threshold-transfer map is undefined for the given rates."""

    code = "mu-undefined"


class ShiftUndefinedError(FedFairError):
    """A label-shift weight divides by a zero training rate."""

    code = "shift-undefined"

    def __init__(self, y: int, a: int):
        self.y = y
        self.a = a
        super().__init__(f"shift weight undefined for (y={y}, a={a}): zero training rate")


class NoCertifiedClassifierError(FedFairError):
    """The candidate set is empty; no thresholds meet the constraint."""

    code = "no-certified-classifier"


class ConfigError(FedFairError):
    """A run configuration failed validation."""

    code = "config-invalid"
