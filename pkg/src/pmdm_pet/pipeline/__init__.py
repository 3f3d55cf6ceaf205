"""Experiment orchestration: configuration, stages and the command line."""

from .config import RunConfig
from .stages import DataError, Layout

__all__ = ["DataError", "Layout", "RunConfig"]
