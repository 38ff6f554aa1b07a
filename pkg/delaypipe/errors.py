"""
Exception types raised by delaypipe.
Validation failures also derive from ValueError so existing callers catching
ValueError keep working.
"""


class DelayPipeError(Exception):
    """Base class for all delaypipe errors."""


class GraphError(DelayPipeError, ValueError):
    """Malformed computation graph or graph document."""


class PartitionError(DelayPipeError, ValueError):
    """Stage partition does not fit the network."""


class IllegalRetimingError(DelayPipeError, ValueError):
    """A retiming step would drive an edge delay negative."""


class CompactionError(DelayPipeError, RuntimeError):
    """Compaction left delays on grad-to-update edges or a stage boundary with the wrong delay count."""


class SimulationError(DelayPipeError, ValueError):
    """Simulation inputs are incomplete or inconsistent."""


class ShapeError(DelayPipeError, ValueError):
    """Tensor shapes do not line up."""


class StaleCacheError(DelayPipeError, RuntimeError):
    """A forward cache was consumed twice."""


class TrainingDivergedError(DelayPipeError, RuntimeError):
    """A loss or parameter update became non-finite."""

    def __init__(self, message: str, strategy: str = ""):
        super().__init__(message)
        self.strategy = strategy


class StrategyError(DelayPipeError, ValueError):
    """Unknown weight strategy identifier."""


class MissingSnapshotError(DelayPipeError, LookupError):
    """A stashed weight version is not available."""


class ColdAveragerError(DelayPipeError, RuntimeError):
    """Reconstruction requested before the gradient averager was warm."""


class HistoryGapError(DelayPipeError, LookupError):
    """The applied-update log does not cover the requested window."""


class StashError(DelayPipeError, RuntimeError):
    """Activation or weight stash underflow/overflow."""


class IdxFormatError(DelayPipeError, ValueError):
    """IDX file is malformed."""


class ConfigError(DelayPipeError, ValueError):
    """Experiment configuration is invalid."""
