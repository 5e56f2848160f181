"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions incompatible with the requested operation."""


class UsageError(ValueError):
    """Caller violated a documented precondition."""


class NumericError(ArithmeticError):
    """Non-finite value encountered where a finite one is required."""


class ConfigError(ValueError):
    """Invalid or unsatisfiable configuration."""


class EncodingError(ValueError):
    """Value cannot be represented in the wire format."""


class ProtocolError(RuntimeError):
    """Peer sent something the protocol does not allow."""


class FramingError(ProtocolError):
    """Byte stream does not parse as a frame."""


class VersionError(ProtocolError):
    """Frame carries an unsupported protocol version."""


class ChannelClosedError(RuntimeError):
    """Send or receive on a closed endpoint."""


class InternalError(RuntimeError):
    """Internal consistency violation; indicates a bug."""


class FederationAbort(RuntimeError):
    """The federation round or run was aborted."""

    def __init__(self, message, missing_nodes=None):
        super().__init__(message)
        self.missing_nodes = list(missing_nodes or [])
