"""Exception hierarchy shared across the package."""


class HapticFenceError(Exception):
    """Base class for all package-specific errors."""


class UnknownFrame(HapticFenceError):
    """A frame id is absent from (or unreachable in) the frame graph."""


class DegenerateMotion(HapticFenceError):
    """Pivot calibration samples lack rotational diversity (rank-deficient system)."""


class DegenerateInput(HapticFenceError):
    """Point cloud is too small or too flat to define a 3D convex hull."""


class EmptyStack(HapticFenceError):
    """Contour stack holds no contours."""


class StaleInput(HapticFenceError):
    """A tracker sample is older than the servo staleness budget."""


class TumorOutOfBounds(HapticFenceError):
    """Scenario tumor does not fit inside the phantom with required clearance."""


class EmptyTrajectory(HapticFenceError):
    """No cutting samples available for resection metrics."""


class ConfigError(HapticFenceError):
    """Scenario or run configuration failed validation."""


# -- wire protocol ------------------------------------------------------------

class WireError(HapticFenceError):
    """Base class for codec and transport errors."""


class NameTooLong(WireError):
    """Message name does not fit the fixed 16-byte header field."""


class OversizeBody(WireError):
    """Message body exceeds the 16 MiB limit."""


class BadMagicOrVersion(WireError):
    """Header version or message type is not recognized."""


class ChecksumMismatch(WireError):
    """Body CRC-32 does not match the header checksum."""


class Truncated(WireError):
    """Byte stream ended before a complete message."""


class InvalidBody(WireError):
    """Body decoded structurally but violates a payload invariant."""


class ConnectionLost(WireError):
    """Peer connection dropped (reported after reconnect attempts)."""
