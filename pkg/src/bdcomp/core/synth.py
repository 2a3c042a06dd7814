"""Seeded synthetic cohorts with known ground truth.

Subjects share one group-mean model and deviate from it by truncated
Gaussian noise. Every dataset reuses the same subjects and inputs; datasets
differ only in observation noise and, optionally, in TR.

Seeds: subject ``s`` draws its parameters from ``SeedSequence([seed, 0, s])``
and its noise in dataset ``d`` from ``SeedSequence([seed, 1, d, s])``.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm

from bdcomp.core.compare import DatasetBundle, SubjectData
from bdcomp.core.config import DatasetNoise, SynthConfig
from bdcomp.core.dcm import (
    Block,
    DcmParams,
    DcmSpec,
    InputSchedule,
    build_inputs,
    default_microtime,
    integrate,
    simulate,
)
from bdcomp.core.exceptions import CohortGenerationError, DivergedModelError, InputError
from bdcomp.core.priors import ParameterLayout

logger = logging.getLogger(__name__)

TRUNCATION = 3.0


@dataclass
class TruthConfig:
    """Group-mean parameters and the between-subject SD of every parameter slot."""

    group_mean: DcmParams
    between_subject_sd: np.ndarray


@dataclass
class GroundTruth:
    """What generated a synthetic cohort."""

    labels: List[str]
    group_mean: np.ndarray
    between_subject_sd: np.ndarray
    subject_params: List[np.ndarray]
    noise_sd: Dict[str, float]
    seed: int
    subject_ids: List[str] = field(default_factory=list)

    def subject_value(self, subject: int, label: str) -> float:
        return float(self.subject_params[subject][self.labels.index(label)])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "labels": list(self.labels),
            "group_mean": self.group_mean.tolist(),
            "between_subject_sd": self.between_subject_sd.tolist(),
            "subject_ids": list(self.subject_ids),
            "subject_params": [p.tolist() for p in self.subject_params],
            "noise_sd": dict(self.noise_sd),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GroundTruth":
        return cls(
            labels=list(payload["labels"]),
            group_mean=np.asarray(payload["group_mean"], dtype=float),
            between_subject_sd=np.asarray(payload["between_subject_sd"], dtype=float),
            subject_params=[np.asarray(p, dtype=float) for p in payload["subject_params"]],
            noise_sd={k: float(v) for k, v in payload["noise_sd"].items()},
            seed=int(payload["seed"]),
            subject_ids=list(payload.get("subject_ids", [])),
        )


def _connection_sd(layout: ParameterLayout, value: float) -> np.ndarray:
    """``value`` on every enabled between-region and modulatory slot, zero elsewhere."""
    sd = np.zeros(layout.size)
    for i, label in enumerate(layout.labels):
        if layout.enabled[i] and label.split(".")[0] in ("A", "B") and not label.startswith("A.self"):
            sd[i] = value
    return sd


def truth_from_dict(spec: DcmSpec, payload: Dict[str, Any], between_subject_sd: float) -> TruthConfig:
    """Ground truth from ``{"group_mean": {label: value}, "between_subject_sd": {label: sd}}``.

    Labels left out have group mean zero; between-subject SDs default to
    ``between_subject_sd`` on connection parameters.
    """
    layout = ParameterLayout.from_spec(spec)
    theta = np.zeros(layout.size)
    sd = _connection_sd(layout, between_subject_sd)
    try:
        for label, value in payload.get("group_mean", {}).items():
            theta[layout.index(label)] = float(value)
        for label, value in payload.get("between_subject_sd", {}).items():
            sd[layout.index(label)] = float(value)
    except (AttributeError, TypeError, ValueError) as e:
        raise InputError(f"Invalid ground truth: {e}") from e
    return TruthConfig(group_mean=layout.unpack(theta), between_subject_sd=sd)


def default_scenario(
    config: Optional[SynthConfig] = None,
) -> Tuple[DcmSpec, InputSchedule, TruthConfig]:
    """Three regions, two inputs and a block design with 8 s blocks every 16 s.

    ``stimuli`` drives V1 in every block and ``scenes`` is on in every other
    block. Of the six self-connection modulations, two are truly zero.
    """
    config = config or SynthConfig()
    regions = ["V1", "PHC_L", "PHC_R"]
    inputs = ["stimuli", "scenes"]
    a_mask = np.array([[1, 1, 1], [1, 1, 0], [1, 0, 1]], dtype=bool)
    c_mask = np.array([[1, 0], [0, 0], [0, 0]], dtype=bool)
    n_volumes = int(config.duration // config.tr)
    spec = DcmSpec.create(regions, inputs, config.tr, n_volumes, a_mask=a_mask, c_mask=c_mask)

    period = 2 * config.block_length
    onsets = np.arange(config.block_length, config.duration - config.block_length + 1e-9, period)
    blocks: List[Block] = []
    for k, onset in enumerate(onsets):
        blocks.append(Block(0, float(onset), config.block_length))
        if k % 2 == 0:
            blocks.append(Block(1, float(onset), config.block_length))
    schedule = build_inputs(blocks, default_microtime(config.tr), n_volumes * config.tr, n_inputs=2)

    truth = DcmParams.zeros(spec)
    truth.a[1, 0] = 0.4
    truth.a[2, 0] = 0.4
    truth.a[0, 1] = 0.1
    truth.a[0, 2] = 0.1
    truth.c[0, 0] = 0.5
    truth.b[0] = np.diag([0.0, 0.3, -0.3])
    truth.b[1] = np.diag([0.4, -0.4, 0.0])

    sd = _connection_sd(ParameterLayout.from_spec(spec), config.between_subject_sd)
    return spec, schedule, TruthConfig(group_mean=truth, between_subject_sd=sd)


def sample_subject(layout: ParameterLayout, truth: TruthConfig, seed: int, subject: int) -> np.ndarray:
    """One subject's parameter vector: group mean plus truncated Gaussian deviations."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0, subject]))
    deviations = truncnorm.rvs(-TRUNCATION, TRUNCATION, size=layout.size, random_state=rng)
    theta = layout.pack(truth.group_mean) + deviations * truth.between_subject_sd
    theta[~layout.enabled] = 0.0
    return theta


def generate_cohort(
    spec: DcmSpec,
    inputs: InputSchedule,
    truth: TruthConfig,
    n_subjects: int,
    datasets: Sequence[DatasetNoise],
    seed: int,
    duration: Optional[float] = None,
) -> Tuple[List[DatasetBundle], GroundTruth]:
    """Simulate every subject under every dataset's noise level."""
    if n_subjects < 2:
        raise InputError(f"a cohort needs at least two subjects, got {n_subjects}")
    if not datasets:
        raise InputError("at least one dataset is required")
    if any(d.noise_sd < 0 for d in datasets):
        raise InputError("noise levels must be non-negative")
    layout = ParameterLayout.from_spec(spec)
    sd = np.broadcast_to(np.asarray(truth.between_subject_sd, dtype=float), (layout.size,))
    if np.any(sd < 0):
        raise InputError("between-subject SDs must be non-negative")
    truth = TruthConfig(group_mean=truth.group_mean, between_subject_sd=np.array(sd))
    truth.group_mean.check_masks(spec)

    subject_ids = [f"sub-{i + 1:02d}" for i in range(n_subjects)]
    thetas = [sample_subject(layout, truth, seed, i) for i in range(n_subjects)]
    params = [layout.unpack(theta) for theta in thetas]
    for sid, p in zip(subject_ids, params):
        try:
            integrate(spec, p, inputs)
        except DivergedModelError as e:
            raise CohortGenerationError(
                f"ground truth for {sid} diverges at t = {e.time:.2f} s; lower the connection strengths"
            ) from e

    total = duration if duration is not None else spec.tr * spec.n_volumes
    bundles = []
    for d, dataset in enumerate(datasets):
        tr = dataset.tr or spec.tr
        if dataset.tr is None:
            dataset_spec, dataset_inputs = spec, inputs
        else:
            dataset_spec = spec.with_timing(tr, int(total // tr))
            dataset_inputs = inputs.resampled(default_microtime(tr), dataset_spec.tr * dataset_spec.n_volumes)
        subjects = []
        for s, (sid, p) in enumerate(zip(subject_ids, params)):
            noise_seed = np.random.SeedSequence([seed, 1, d, s])
            try:
                data = simulate(dataset_spec, p, dataset_inputs, dataset.noise_sd, noise_seed)
            except DivergedModelError as e:
                raise CohortGenerationError(f"{sid} diverges in dataset {dataset.label}") from e
            subjects.append(SubjectData(sid, dataset_spec, dataset_inputs, data))
        bundles.append(DatasetBundle(label=dataset.label, subjects=subjects))
        logger.info("Generated dataset %s (noise SD %.3g, TR %.3g s)", dataset.label, dataset.noise_sd, tr)

    ground_truth = GroundTruth(
        labels=list(layout.labels),
        group_mean=layout.pack(truth.group_mean),
        between_subject_sd=truth.between_subject_sd,
        subject_params=thetas,
        noise_sd={d.label: d.noise_sd for d in datasets},
        seed=seed,
        subject_ids=subject_ids,
    )
    return bundles, ground_truth


def generate_default_cohort(
    config: Optional[SynthConfig] = None, seed: int = 0
) -> Tuple[List[DatasetBundle], GroundTruth]:
    """The default scenario run through ``generate_cohort``."""
    config = config or SynthConfig()
    spec, inputs, truth = default_scenario(config)
    return generate_cohort(
        spec, inputs, truth, config.n_subjects, config.datasets, seed, duration=config.duration
    )
