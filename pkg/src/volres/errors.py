"""Exception types raised across the package."""


class VolresError(Exception):
    pass


class DimensionError(VolresError, ValueError):
    pass


class DTypeError(VolresError, TypeError):
    pass


class DegenerateBatchError(VolresError, ValueError):
    pass


class LabelError(VolresError, ValueError):
    pass


class TapeError(VolresError, RuntimeError):
    """Backward replayed on a node whose saved context was already consumed."""


class ConfigError(VolresError, ValueError):
    pass


class FormatError(VolresError, ValueError):
    """Malformed binary or text file. ``offset`` is a byte offset or line number."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(FormatError):
    pass


class MeshIndexError(FormatError, IndexError):
    pass


class SpecMismatchError(VolresError, ValueError):
    pass


class GeometryError(VolresError, ValueError):
    pass


class RotationSpecError(VolresError, ValueError):
    pass


class DataError(VolresError, ValueError):
    pass


class DivergenceError(VolresError, FloatingPointError):
    def __init__(self, message, epoch=None, batch=None):
        ctx = []
        if epoch is not None:
            ctx.append(f"epoch {epoch}")
        if batch is not None:
            ctx.append(f"batch {batch}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
