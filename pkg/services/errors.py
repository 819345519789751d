"""
Beamsim Errors
Exception hierarchy shared by every service
"""


class BeamsimError(Exception):
    """Base class for all simulator errors"""


class InvalidArgumentError(BeamsimError, ValueError):
    """Argument outside the documented domain"""


class NumericFailureError(BeamsimError, ArithmeticError):
    """A computation produced NaN or Inf"""


class DegenerateChannelError(BeamsimError, ValueError):
    """Channel is zero where a direction is required"""


class DegenerateOutputError(BeamsimError, ValueError):
    """Network output cannot be power-normalized (zero norm)"""


class DegenerateGeometryError(BeamsimError, ValueError):
    """User sits on an array element"""


class StateError(BeamsimError, RuntimeError):
    """Operation called in the wrong lifecycle stage"""


class FramingError(BeamsimError, ValueError):
    """Feedback bitstream does not match its header"""


class UnsupportedError(BeamsimError, NotImplementedError):
    """Configuration or mode outside what is implemented"""


class ConfigError(BeamsimError):
    """Invalid experiment configuration or missing input files"""


class CheckpointError(ConfigError):
    """Checkpoint container is malformed or does not match the architecture"""
