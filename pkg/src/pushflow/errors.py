"""Shared exception types.

ValueError (often via ConfigError) marks violated preconditions or bad
user input; NumericsError marks runtime numerical failure of an otherwise
well-posed computation (divergence, underflow, solver breakdown).  The CLI
maps the former to exit code 2 and the latter to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid configuration file or command-line usage."""


class NumericsError(RuntimeError):
    """Numerical failure at runtime (divergence, underflow, solver error)."""
