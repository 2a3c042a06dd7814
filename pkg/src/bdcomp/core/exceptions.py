"""Exception hierarchy for bdcomp."""

from typing import Optional


class BdcompError(Exception):
    """Base class for all bdcomp errors."""


class InputError(BdcompError):
    """A file, argument or configuration value cannot be used."""


class DimensionMismatchError(BdcompError, ValueError):
    """Arrays that must agree in shape do not."""


class DegenerateDensityError(BdcompError, ValueError):
    """A covariance is singular even after jitter."""


class DivergedModelError(BdcompError):
    """The forward model produced a non-finite state."""

    def __init__(self, message: str, step_index: int, time: Optional[float] = None) -> None:
        super().__init__(message)
        self.step_index = step_index
        self.time = time


class FitFailureError(BdcompError):
    """Model inversion could not make progress."""

    def __init__(self, message: str, last_free_energy: float, n_iterations: int) -> None:
        super().__init__(message)
        self.last_free_energy = last_free_energy
        self.n_iterations = n_iterations


class ReductionInvalidError(BdcompError):
    """A reduced prior yields an indefinite posterior precision."""


class InconsistentSubjectsError(BdcompError, ValueError):
    """Subjects do not share one parameterization."""


class CohortGenerationError(BdcompError):
    """A synthetic cohort cannot be generated from the given ground truth."""


class PipelineError(BdcompError):
    """The comparison pipeline cannot produce a report."""
