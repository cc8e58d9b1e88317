"""Skill-guided mixture-of-experts policies on a small tabletop simulator."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["__version__", "BACKEND"]
