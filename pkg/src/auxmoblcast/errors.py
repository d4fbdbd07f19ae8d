"""Exception hierarchy shared by every pipeline stage.

The CLI maps these onto exit codes: :class:`ConfigError` -> 2,
:class:`DataError` -> 3, anything else derived from :class:`MobilityError` -> 4.
"""


class MobilityError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(MobilityError, ValueError):
    """A configuration value is missing, unknown or invalid."""

    def __init__(self, key, message=None):
        self.key = key
        super().__init__(f"{key}: {message}" if message else str(key))


class DataError(MobilityError, ValueError):
    """Input data violates its contract."""


class RuntimeFailure(MobilityError, RuntimeError):
    """Numerical or runtime failure during training or evaluation."""


# -- data ingestion / windowing ------------------------------------------------

class MissingFileError(DataError, FileNotFoundError):
    pass


class MalformedRowError(DataError):
    def __init__(self, line, reason=""):
        self.line = line
        super().__init__(f"malformed row at line {line}" + (f": {reason}" if reason else ""))


class NonContiguousDatesError(DataError):
    def __init__(self, poi_id, detail=""):
        self.poi_id = poi_id
        super().__init__(f"non-contiguous dates for poi {poi_id}" + (f" ({detail})" if detail else ""))


class NegativeCountError(DataError):
    def __init__(self, poi_id, date):
        self.poi_id = poi_id
        self.date = date
        super().__init__(f"negative visit count for poi {poi_id} on {date}")


class InvalidSpecError(ConfigError):
    pass


class SeriesTooShortError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class BadRatiosError(ConfigError):
    def __init__(self, ratios):
        super().__init__("ratios", f"expected three positive values summing to 1, got {ratios!r}")


class MissingDatasetError(DataError):
    pass


# -- prompting / tokenizer -----------------------------------------------------

class ParseFailure(MobilityError, ValueError):
    """No integer could be extracted from a generated sentence."""


class UnknownCategoryError(MobilityError, KeyError):
    pass


class EmptyCorpusError(DataError):
    pass


class IdOutOfRangeError(MobilityError, IndexError):
    pass


# -- model / checkpoints -------------------------------------------------------

class SequenceTooLongError(MobilityError, ValueError):
    pass


class CheckpointError(MobilityError, OSError):
    """Unreadable, truncated or otherwise corrupt checkpoint file."""


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(MobilityError, ValueError):
    pass


class IncompatibleVocabularyError(MobilityError, ValueError):
    pass


# -- training ------------------------------------------------------------------

class LengthMismatchError(MobilityError, ValueError):
    pass


class NonFiniteLossError(RuntimeFailure):
    pass
