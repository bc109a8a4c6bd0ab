"""Exception types shared across the package."""


class CompBinError(Exception):
    """Base class for every error raised by this package."""


class InvalidGraphError(CompBinError, ValueError):
    pass


class BoundsError(CompBinError, IndexError):
    pass


class EncodeOverflowError(CompBinError, OverflowError):
    pass


class FormatError(CompBinError):
    """A CompBin file failed structural validation.

    ``field`` names the offending header field or section so callers can
    report it without parsing the message.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class SinkError(CompBinError, OSError):
    """Writing to a byte sink failed after ``position`` bytes."""

    def __init__(self, position: int, cause: BaseException):
        super().__init__(f"write failed at byte {position}: {cause}")
        self.position = position


class ParseError(CompBinError):
    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


class VertexRangeError(CompBinError):
    def __init__(self, location: str, vertex: int, vertex_count: int):
        super().__init__(f"{location}: vertex {vertex} >= vertex count {vertex_count}")
        self.location = location
        self.vertex = vertex


class RegistrationError(CompBinError, OSError):
    pass


class BusyError(CompBinError):
    pass


class LeaseError(CompBinError, RuntimeError):
    """Release without a matching acquire."""


class ClosedError(CompBinError, ValueError):
    pass


class PartialReadError(CompBinError, OSError):
    def __init__(self, bytes_completed: int, cause: BaseException):
        super().__init__(f"read failed after {bytes_completed} bytes: {cause}")
        self.bytes_completed = bytes_completed


class MountError(CompBinError, OSError):
    pass
