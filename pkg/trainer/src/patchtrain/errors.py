"""Failure types raised by this package."""


class TrainerError(Exception):
    """Base class for training and export failures."""


class ExportError(TrainerError):
    """An exported predictor failed its own round-trip check."""
