"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid construction parameters or config-file content."""


class ShapeError(ValueError):
    """Array shape inconsistent with the mesh or problem dimensions."""


class DivergenceError(RuntimeError):
    """Fixed-point iteration left the divergence guard envelope."""


class KernelEvalError(RuntimeError):
    """A kernel or cost integrand produced non-finite values."""


class SingularSystemError(RuntimeError):
    """The discrete fixed point is not well posed (singular Jacobian)."""
