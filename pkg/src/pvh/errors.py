"""Exception hierarchy for the PVH stack."""


class PvhError(Exception):
    """Base class for every error raised by this package."""


# wire formats
class InvalidHeader(PvhError):
    pass


class Truncated(PvhError):
    pass


class MalformedPathVector(PvhError):
    pass


class Oversize(PvhError):
    pass


class UnknownCodec(PvhError):
    pass


class UnknownMessageType(PvhError):
    pass


# forwarding
class RevPathOverflow(PvhError):
    pass


# clustering
class InvalidWeights(PvhError):
    pass


# routing
class NoPath(PvhError):
    pass


class UnknownNode(PvhError):
    pass


class MissingEdge(PvhError):
    pass


class Unreachable(PvhError):
    pass


class NotFound(PvhError):
    pass


# tunnel
class NotIpv4(PvhError):
    pass


class WrongTag(PvhError):
    pass


class NotDelivered(PvhError):
    pass


# simulator / topology files
class ParseError(PvhError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DanglingAttachment(ParseError):
    pass


class DuplicateNic(ParseError):
    pass


class UnattachedNic(PvhError):
    pass
