"""Exception hierarchy shared by all tubelabel modules."""


class TubeLabelError(Exception):
    """Base class for all errors raised by this package."""


class MalformedFile(TubeLabelError):
    """An on-disk array is not NPY v1.x / C-order / supported dtype."""


class ShapeMismatch(TubeLabelError):
    """Array rank or dimensions differ from what the operation requires."""


class SchemaError(TubeLabelError):
    """A manifest JSON file does not match the expected schema."""


class MissingFile(TubeLabelError):
    """A file referenced by a manifest does not exist."""


class InconsistentDims(TubeLabelError):
    """Referenced arrays disagree on H, W, or the number of classes."""


class IoError(TubeLabelError):
    """Failure writing generated data to disk."""


class EmptyLabel(TubeLabelError):
    """A label map contains no supervised (non-ignore) pixels."""


class EmptyEvaluation(TubeLabelError):
    """No pixels or classes are left to evaluate after masking."""


class BadSpan(TubeLabelError):
    """A requested temporal window span is outside {1..num_frames}."""
