"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, out-of-range values, unknown keys."""


class IngestError(ValueError):
    """Malformed input file; message carries a byte offset or line number."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ProtocolError(RuntimeError):
    """Violation of the round protocol: stale messages, dropouts, shape clashes."""
