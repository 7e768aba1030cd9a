"""Shared exception types."""


class DataError(Exception):
    """Malformed input file (events, poses, frames, checkpoints, config)."""


class EvaluationError(Exception):
    """An evaluation protocol precondition failed (e.g. empty mask)."""
