"""Exception hierarchy shared by every fedsab module."""


class FedSabError(Exception):
    pass


class ConfigError(FedSabError, ValueError):
    """Invalid configuration, architecture wiring or non-conformant parameter sets."""


class InputError(FedSabError, ValueError):
    """Bad argument values or data handed to an operation."""


class FormatError(FedSabError, ValueError):
    """A file does not parse as the expected binary format."""


class UsageError(FedSabError, RuntimeError):
    """An object was used out of its lifecycle (e.g. a tape consumed twice)."""


class ProtocolError(FedSabError, ValueError):
    """A client upload violates the aggregation contract."""


class TrainingError(FedSabError, RuntimeError):
    """Training diverged."""


class AlignmentError(FedSabError, ValueError):
    """Run outputs cannot be joined round-by-round."""
