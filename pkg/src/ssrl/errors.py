"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto exit codes:
ConfigError -> 2, DataError -> 3, InternalError -> 4.
"""


class SSRLError(Exception):
    """Base class for all package errors."""


class ConfigError(SSRLError):
    pass


class DataError(SSRLError):
    pass


class InternalError(SSRLError):
    """A broken invariant; always a bug, never user error."""


class ParseError(DataError):
    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class VocabularyError(DataError):
    pass


class DomainError(DataError, IndexError):
    """An entity, relation or action id outside its valid range."""


class UnlabelableQuery(DataError):
    pass


class LabelCacheError(DataError):
    pass


class MagicMismatch(LabelCacheError):
    pass


class VersionMismatch(LabelCacheError):
    pass


class TruncatedFile(LabelCacheError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, tensor: str, expected, found):
        self.tensor = tensor
        super().__init__(f"tensor {tensor!r}: expected shape {tuple(expected)}, found {tuple(found)}")


class EpisodeComplete(SSRLError):
    pass


class LabelsExhausted(SSRLError):
    pass


class ContractViolation(InternalError, ValueError):
    pass
