"""Exception hierarchy shared by every stage of the pipeline.

``DataError`` subclasses describe bad input (the CLI maps them to exit
code 2); ``InvariantViolation`` marks a bug-class failure (exit code 3).
"""


class RelsplitError(Exception):
    """Base class for all errors raised by this package."""


class DataError(RelsplitError):
    """Input data is malformed or inconsistent."""


class InvariantViolation(RelsplitError):
    """An internal consistency check failed."""


# corpus
class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class DuplicateId(DataError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"duplicate record id {record_id!r}")


class EmptyPath(DataError):
    pass


class EmptySegment(DataError):
    pass


class InvalidSpec(DataError):
    pass


# splitkit
class GroupingError(DataError):
    def __init__(self, record_id: str, cause: Exception):
        self.record_id = record_id
        self.cause = cause
        super().__init__(f"record {record_id!r}: {cause}")


class TooFewGroups(DataError):
    pass


class CoverageError(DataError):
    pass


class LeakageDetected(DataError):
    pass


# encode
class EmptyField(DataError):
    def __init__(self, part: str):
        self.part = part
        super().__init__(f"empty field: {part}")


class MarkerInText(DataError):
    def __init__(self, part: str):
        self.part = part
        super().__init__(f"field {part!r} contains a reserved marker token")


class ProviderError(DataError):
    def __init__(self, record_id: str, cause: Exception):
        self.record_id = record_id
        self.cause = cause
        super().__init__(f"translation failed for record {record_id!r}: {cause}")


class MissingEntry(DataError):
    def __init__(self, source_language: str, text: str, record_id: str | None = None):
        self.source_language = source_language
        self.text = text
        self.record_id = record_id
        rec = f" (record {record_id!r})" if record_id is not None else ""
        super().__init__(f"no translation for [{source_language}] {text!r}{rec}")


# model
class DimMismatch(DataError):
    pass


class EmptyBatch(DataError):
    pass


class NonFiniteLoss(DataError):
    def __init__(self, batch_index: int, epoch: int):
        self.batch_index = batch_index
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")


class ConfigMismatch(DataError):
    pass


class CheckpointFormatError(DataError):
    pass


# metrics
class IdMismatch(DataError):
    def __init__(self, missing_in_preds: set, missing_in_truths: set):
        self.missing_in_preds = missing_in_preds
        self.missing_in_truths = missing_in_truths
        diff = sorted(missing_in_preds | missing_in_truths)
        shown = ", ".join(map(repr, diff[:10]))
        more = f" (+{len(diff) - 10} more)" if len(diff) > 10 else ""
        super().__init__(f"prediction/truth id sets differ: {shown}{more}")


class OutOfRange(DataError):
    pass
