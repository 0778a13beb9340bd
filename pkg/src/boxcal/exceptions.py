"""Exception hierarchy shared across the package."""


class BoxcalError(Exception):
    """Base class for all errors raised by boxcal."""


class FormatError(BoxcalError):
    """Input file could not be parsed."""


class SchemaError(BoxcalError):
    """Parsed input is missing a required field or has the wrong shape."""


class ValidationError(BoxcalError, ValueError):
    """A value violates a domain invariant (e.g. non-positive box width)."""


class ParameterError(BoxcalError, ValueError):
    """A function argument is outside its admissible range."""


class SplitError(BoxcalError):
    """Dataset cannot be split as requested."""


class NotEnoughSamplesError(BoxcalError, ValueError):
    """Too few samples to fit a calibration curve with the requested bins."""


class EmptyBinError(NotEnoughSamplesError):
    """An equal-width confidence bin received no samples."""

    def __init__(self, bin_index, lower, upper):
        self.bin_index = bin_index
        self.lower = lower
        self.upper = upper
        super().__init__(
            f"empty bin {bin_index} covering ({lower:.4g}, {upper:.4g}]"
        )


class InvalidCellError(BoxcalError, ValueError):
    """A (box bins, confidence bins) grid cell cannot be fitted."""


class ConfigurationError(BoxcalError, ValueError):
    """Inconsistent combination of options."""


class GenerationError(BoxcalError):
    """Synthetic scene cannot be generated with the requested layout."""


class ConsistencyError(BoxcalError):
    """Internal cross-check failed."""
