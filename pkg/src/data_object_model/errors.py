"""Exception hierarchy shared by every layer."""
from typing import Iterable, List


class CoGraphError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CoGraphError, ValueError):
    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class DomainError(CoGraphError, ValueError):
    pass


class DegenerateInputError(CoGraphError, ValueError):
    pass


class EmptySetError(CoGraphError, ValueError):
    pass


class DegenerateDocumentError(CoGraphError, ValueError):
    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"document {doc_id!r} has no in-vocabulary tokens")


class GraphParseError(CoGraphError, ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class SequenceTooShortError(CoGraphError, ValueError):
    def __init__(self, patient_ids: Iterable[str]):
        self.patient_ids: List[str] = list(patient_ids)
        super().__init__(
            "graph sequences need at least 2 graphs, offending patients: "
            + ", ".join(self.patient_ids)
        )


class EpisodeSamplingError(CoGraphError, ValueError):
    pass


class ConfigError(CoGraphError, ValueError):
    pass


class TrainingDivergedError(CoGraphError, RuntimeError):
    pass


class MissingInputError(CoGraphError, FileNotFoundError):
    def __init__(self, path, hint: str = ""):
        self.path = path
        message = f"missing input: {path}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)


class IndexOutOfRangeError(CoGraphError, IndexError):
    pass
