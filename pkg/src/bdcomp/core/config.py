"""Run configuration models.

Every tunable number of the pipeline lives here. Configurations are plain
pydantic models so they serialize to JSON, hash deterministically and
validate user input in one place.
"""

import hashlib
import json
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator

from bdcomp.core.exceptions import InputError


class PriorConfig(BaseModel):
    """Default first-level prior variances and the noise hyperprior."""

    a_offdiag_var: float = Field(1 / 16, ge=0)
    a_self_var: float = Field(1 / 64, ge=0)
    b_diag_var: float = Field(1.0, ge=0)
    b_offdiag_var: float = Field(1 / 16, ge=0)
    c_var: float = Field(1.0, ge=0)
    transit_var: float = Field(1 / 256, ge=0)
    decay_var: float = Field(1 / 256, ge=0)
    epsilon_var: float = Field(1 / 256, ge=0)
    log_precision_mean: float = 4.0
    log_precision_var: float = Field(1 / 16, ge=0)


class VLConfig(BaseModel):
    """Variational Laplace settings."""

    max_iterations: int = Field(128, ge=1)
    tolerance: float = Field(1e-2, gt=0)
    patience: int = Field(4, ge=1)
    fd_step: float = Field(1e-3, gt=0)
    initial_damping: float = Field(0.125, gt=0)
    max_damping: float = Field(1e6, gt=0)
    lambda_newton_steps: int = Field(16, ge=1)


class PebConfig(BaseModel):
    """Parametric empirical Bayes settings.

    ``precision_ratio`` scales the between-subject precision component: Q1 is
    ``precision_ratio`` times the diagonal of the first-level prior precisions.
    With the default of 16, subjects at gamma = 0 scatter with 1/16 of the
    prior variance; set it to 1 for Q1 equal to the plain prior precisions.
    """

    max_iterations: int = Field(64, ge=1)
    tolerance: float = Field(1e-3, gt=0)
    q0_scale: float = Field(1e-4, ge=0)
    precision_ratio: float = Field(16.0, gt=0)
    gamma_prior_mean: float = 0.0
    gamma_prior_var: float = Field(1 / 16, gt=0)
    field: str = "B"
    parameters: Optional[List[str]] = None
    components: Optional[List[List[str]]] = None


class SearchConfig(BaseModel):
    """Pruning and model-space settings."""

    prune: bool = True
    threshold: float = Field(3.0, ge=0)
    cap: int = Field(64, ge=1)
    tie_tolerance: float = Field(1e-6, ge=0)


class DatasetNoise(BaseModel):
    """One synthetic dataset: its label, noise level and optional TR."""

    label: str
    noise_sd: float = Field(ge=0)
    tr: Optional[float] = Field(None, gt=0)


class SynthConfig(BaseModel):
    """Synthetic cohort scenario."""

    n_subjects: int = Field(10, ge=2)
    datasets: List[DatasetNoise] = Field(
        default_factory=lambda: [
            DatasetNoise(label="low", noise_sd=0.1),
            DatasetNoise(label="mid", noise_sd=0.2),
            DatasetNoise(label="high", noise_sd=0.4),
        ]
    )
    between_subject_sd: float = Field(0.1, ge=0)
    tr: float = Field(2.8, gt=0)
    duration: float = Field(448.0, gt=0)
    block_length: float = Field(8.0, gt=0)

    @model_validator(mode="after")
    def _unique_labels(self) -> "SynthConfig":
        labels = [d.label for d in self.datasets]
        if len(set(labels)) != len(labels):
            raise ValueError("dataset labels must be unique")
        return self


class RunConfig(BaseModel):
    """Everything a CLI run needs. Flags override values loaded from file."""

    seed: int = 0
    output_dir: Path = Path("bdcomp-output")
    cohort_dir: Optional[Path] = None
    posterior_dir: Optional[Path] = None
    jobs: Optional[int] = Field(None, ge=1)
    svg: bool = True
    priors: PriorConfig = Field(default_factory=PriorConfig)
    vl: VLConfig = Field(default_factory=VLConfig)
    peb: PebConfig = Field(default_factory=PebConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        """Load a configuration file, reporting malformed JSON by line and column."""
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise InputError(f"Cannot read config {path}: {e}") from e
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise InputError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
        try:
            return cls.model_validate(payload)
        except ValidationError as e:
            raise InputError(f"Invalid config {path}: {e}") from e

    def config_hash(self) -> str:
        """SHA-256 of the canonical configuration, ignoring where files go."""
        payload = self.model_dump(mode="json", exclude={"output_dir", "cohort_dir", "posterior_dir", "jobs"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
