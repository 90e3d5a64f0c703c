"""Exception types shared across the package."""


class SlimsearchError(Exception):
    """Base class for every error raised by this package."""


class SpaceError(SlimsearchError):
    """A search space or architecture description is malformed."""


class ConstraintError(SlimsearchError):
    """A width configuration violates the constraints of its space."""


class PartitionError(SlimsearchError):
    """A batch partition is inconsistent with the batch or the space."""


class CheckpointError(SlimsearchError):
    """A checkpoint or its manifest cannot be read back consistently."""


class RecordError(SlimsearchError):
    """Loss records are missing, malformed, or insufficient for a computation."""


class NormalizationError(RecordError):
    """Proxy-loss normalization is impossible (no final largest-subnet loss)."""


class SamplingExhausted(SlimsearchError):
    """Rejection sampling hit its trial budget without an accepted draw.

    Carries enough context to diagnose an infeasible target: the requested
    budget window, the number of trials spent, and the closest miss seen.
    """

    def __init__(self, target_flops: int, tolerance: int, trials: int, closest: int | None):
        self.target_flops = target_flops
        self.tolerance = tolerance
        self.trials = trials
        self.closest = closest
        miss = "no draw evaluated" if closest is None else f"closest draw missed by {closest}"
        super().__init__(
            f"no config within {tolerance} of {target_flops} FLOPs "
            f"after {trials} trials ({miss})"
        )


class CalibrationError(SlimsearchError):
    """Statistics recalibration was asked to run on an empty stream."""


class DivergenceError(SlimsearchError):
    """Training produced a non-finite loss."""
