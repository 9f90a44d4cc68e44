"""
Exception types shared by every graphmerge module.
Library code raises these; only the command layer catches them.
"""


class GraphMergeError(Exception):
    """Base class for all graphmerge failures"""


class ShapeError(GraphMergeError, ValueError):
    """Operand shapes do not fit the operation"""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class DomainError(GraphMergeError, ValueError):
    """Input outside the mathematical domain of an operation"""


class NonFiniteError(GraphMergeError, ValueError):
    """NaN or infinite value where finite input is required"""


class EmptyDatasetError(GraphMergeError, ValueError):
    """Operation needs at least one graph"""


class DatasetFormatError(GraphMergeError):
    """Malformed dataset directory or dataset file"""


class CheckpointError(GraphMergeError):
    """Corrupt, truncated or mismatched checkpoint file"""


class IncompatibleModelsError(GraphMergeError):
    """Models cannot be combined (e.g. parameter soup of mixed architectures)"""


class ConfigError(GraphMergeError):
    """Invalid or unknown configuration entry"""


class MissingArtifactError(GraphMergeError, FileNotFoundError):
    """An input file produced by an earlier command is missing"""
