"""Bayesian data comparison: the four measures and the end-to-end pipeline.

The pipeline fits every subject of every dataset, learns one group model
structure from all of them pooled together, re-estimates each subject under
the pooled empirical priors, fits a group model per dataset and scores each
dataset by how certain and how informative its group-level posteriors are.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field

from bdcomp import __version__
from bdcomp.core.config import PebConfig, PriorConfig, RunConfig, SearchConfig, VLConfig
from bdcomp.core.dcm import DcmSpec, InputSchedule
from bdcomp.core.exceptions import (
    BdcompError,
    InconsistentSubjectsError,
    InputError,
    PipelineError,
)
from bdcomp.core.information import (
    GaussianDensity,
    bayesian_model_average,
    evidence_label,
    kl_categorical,
    kl_gaussian,
    neg_entropy,
    posterior_over_models,
    prob_from_nats,
)
from bdcomp.core.inversion import SubjectPosterior, fit
from bdcomp.core.peb import PebModel, fit_peb
from bdcomp.core.priors import ParameterLayout
from bdcomp.core.reduction import ReducedModel
from bdcomp.core.search import build_model_space, empirical_bayes_update, prune_greedy

logger = logging.getLogger(__name__)

MEASURES = ("s_theta", "s_epsilon", "d_params", "d_models")
MEASURE_TITLES = {
    "s_theta": "Parameter certainty",
    "s_epsilon": "Random-effects certainty",
    "d_params": "Information gain (parameters)",
    "d_models": "Information gain (models)",
}
NATS_CLIP = 36.0
INDISTINGUISHABLE = 1e-6


@dataclass
class SubjectData:
    """One subject's timeseries with the model it is fitted under."""

    subject_id: str
    spec: DcmSpec
    inputs: InputSchedule
    data: np.ndarray


@dataclass
class DatasetBundle:
    """All subjects acquired under one protocol."""

    label: str
    subjects: List[SubjectData]

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)


def validate_bundles(bundles: Sequence[DatasetBundle]) -> None:
    """Datasets must agree on subject count, regions and parameter labels."""
    if len(bundles) < 2:
        raise InputError(f"at least two datasets are needed for a comparison, got {len(bundles)}")
    labels = [b.label for b in bundles]
    if len(set(labels)) != len(labels):
        raise InputError("dataset labels must be unique")
    first = bundles[0]
    if not first.subjects:
        raise InputError(f"dataset {first.label!r} has no subjects")
    reference = ParameterLayout.from_spec(first.subjects[0].spec)
    for bundle in bundles:
        if bundle.n_subjects != first.n_subjects:
            raise InconsistentSubjectsError(
                f"dataset {bundle.label!r} has {bundle.n_subjects} subjects, "
                f"{first.label!r} has {first.n_subjects}"
            )
        for subject in bundle.subjects:
            layout = ParameterLayout.from_spec(subject.spec)
            if layout.labels != reference.labels or not np.array_equal(layout.enabled, reference.enabled):
                raise InconsistentSubjectsError(
                    f"subject {subject.subject_id} in {bundle.label!r} has a different model"
                )


class MeasureValues(BaseModel):
    """The four measures for one dataset, in nats."""

    s_theta: float
    s_epsilon: float
    d_params: float
    d_models: float


class ModelEntry(BaseModel):
    """One member of a dataset's reduced model space."""

    switched_off: List[str]
    delta_f: float
    probability: float


class DatasetResult(BaseModel):
    """Everything the comparison learned about one dataset."""

    model_config = ConfigDict(protected_namespaces=())

    label: str
    status: Literal["ok", "excluded"]
    reason: Optional[str] = None
    n_subjects: int
    failed_subjects: List[str] = Field(default_factory=list)
    subject_free_energies: Dict[str, float] = Field(default_factory=dict)
    measures: Optional[MeasureValues] = None
    relative: Optional[MeasureValues] = None
    group_free_energy: Optional[float] = None
    gamma_mean: List[float] = Field(default_factory=list)
    group_mean: Dict[str, float] = Field(default_factory=dict)
    parameter_precisions: Dict[str, float] = Field(default_factory=dict)
    model_space: List[ModelEntry] = Field(default_factory=list)
    model_average: Dict[str, float] = Field(default_factory=dict)


class PairwiseTable(BaseModel):
    """p[i][j]: probability that dataset i beats dataset j on one measure."""

    measure: str
    labels: List[str]
    probabilities: List[List[float]]


class Verdict(BaseModel):
    """Which dataset wins, and by how much."""

    best: Optional[str]
    indistinguishable: bool
    first_places: Dict[str, int]
    margins: Dict[str, str] = Field(default_factory=dict)
    statement: str


class Provenance(BaseModel):
    """Stamped into every output so a run can be reproduced."""

    tool: str = "bdcomp"
    version: str = __version__
    config_hash: str
    seed: int


class ComparisonReport(BaseModel):
    """The result of a Bayesian data comparison."""

    provenance: Provenance
    measures: List[str] = Field(default_factory=lambda: list(MEASURES))
    interesting_parameters: List[str]
    pruned_parameters: List[str]
    datasets: List[DatasetResult]
    pairwise: List[PairwiseTable]
    verdict: Verdict
    settings: Dict[str, Any] = Field(default_factory=dict)

    def ranked(self) -> List[DatasetResult]:
        return [d for d in self.datasets if d.status == "ok"]


def make_provenance(config: RunConfig) -> Provenance:
    return Provenance(config_hash=config.config_hash(), seed=config.seed)


def _subset(peb: PebModel, labels: Optional[Sequence[str]]) -> np.ndarray:
    chosen = peb.labels if labels is None else list(labels)
    idx = [peb.labels.index(label) for label in chosen]
    live = peb.beta_post.variances > 0
    return np.array([i for i in idx if live[i]], dtype=int)


def measure_parameter_certainty(peb: PebModel, labels: Optional[Sequence[str]] = None) -> float:
    """Negative entropy of the group-mean posterior over the interesting parameters."""
    return neg_entropy(peb.beta_post.restrict(_subset(peb, labels)))


def measure_rfx_certainty(peb: PebModel) -> float:
    """Negative entropy of the between-subject precision posterior."""
    return neg_entropy(peb.gamma_post)


def info_gain_params(peb: PebModel, labels: Optional[Sequence[str]] = None) -> float:
    """KL divergence from the group-mean prior to its posterior."""
    idx = _subset(peb, labels)
    return kl_gaussian(peb.beta_post.restrict(idx), peb.beta_prior.restrict(idx))


def info_gain_models(
    peb: Optional[PebModel],
    model_space: Optional[Sequence[Union[ReducedModel, float]]] = None,
    config: Optional[SearchConfig] = None,
) -> float:
    """KL divergence from a flat prior over models to their posterior.

    Without ``model_space`` the space is built around ``peb`` with the
    threshold and cap of ``config``. Reduced models must only switch off
    parameters of ``peb``; bare free energies are taken as given, and
    ``peb`` may then be None.
    """
    if model_space is None:
        if peb is None:
            raise ValueError("either a group model or a model space is required")
        config = config or SearchConfig()
        model_space = build_model_space(peb, config.threshold, config.cap)
    if not model_space:
        raise ValueError("the model space is empty")
    if peb is not None:
        unknown = {
            label for m in model_space if isinstance(m, ReducedModel) for label in m.switched_off
        } - set(peb.labels)
        if unknown:
            raise ValueError(f"model space switches off parameters outside the group model: {sorted(unknown)}")
    energies = [m.delta_f if isinstance(m, ReducedModel) else float(m) for m in model_space]
    return kl_categorical(posterior_over_models(energies))


def relative_nats(values: Mapping[str, float]) -> Dict[str, float]:
    """Values relative to the worst one, which becomes zero."""
    if not values:
        return {}
    worst = min(values.values())
    return {key: float(value - worst) for key, value in values.items()}


def pairwise_probabilities(values: Sequence[float]) -> List[List[float]]:
    """p[i][j] = sigmoid(v_i - v_j), with differences clipped so p stays inside (0, 1)."""
    v = np.asarray(values, dtype=float)
    k = v.size
    table = np.full((k, k), 0.5)
    for i in range(k):
        for j in range(i + 1, k):
            p = prob_from_nats(float(np.clip(v[i] - v[j], -NATS_CLIP, NATS_CLIP)))
            table[i, j] = p
            table[j, i] = 1.0 - p
    return table.tolist()


def select_parameters(labels: Sequence[str], prior: GaussianDensity, config: PebConfig) -> List[str]:
    """The interesting parameter subset: configured labels, or every enabled one of a field."""
    if config.parameters:
        missing = [label for label in config.parameters if label not in labels]
        if missing:
            raise InputError(f"unknown parameters: {', '.join(missing)}")
        return list(config.parameters)
    variances = prior.variances
    chosen = [
        label
        for i, label in enumerate(labels)
        if label.split(".", 1)[0] == config.field and variances[i] > 0
    ]
    if not chosen:
        raise PipelineError(f"no enabled parameters in field {config.field!r}")
    return chosen


def _fit_task(
    subject: SubjectData, priors: PriorConfig, vl: VLConfig
) -> Tuple[Optional[SubjectPosterior], Optional[str]]:
    try:
        return fit(subject.spec, subject.inputs, subject.data, None, vl, priors, subject.subject_id), None
    except BdcompError as e:
        return None, str(e)


def fit_bundles(
    bundles: Sequence[DatasetBundle], config: RunConfig
) -> Dict[str, List[Tuple[str, Optional[SubjectPosterior], Optional[str]]]]:
    """Fit every subject of every dataset; results keep input order."""
    tasks = [(bundle.label, subject) for bundle in bundles for subject in bundle.subjects]
    results = Parallel(n_jobs=config.jobs or -1)(
        delayed(_fit_task)(subject, config.priors, config.vl) for _, subject in tasks
    )
    out: Dict[str, List[Tuple[str, Optional[SubjectPosterior], Optional[str]]]] = {
        bundle.label: [] for bundle in bundles
    }
    for (label, subject), (posterior, error) in zip(tasks, results):
        if error is not None:
            logger.warning("Fit failed for %s/%s: %s", label, subject.subject_id, error)
        out[label].append((subject.subject_id, posterior, error))
    return out


def _verdict(results: List[DatasetResult]) -> Verdict:
    ranked = [r for r in results if r.status == "ok" and r.relative is not None]
    if not ranked:
        return Verdict(
            best=None, indistinguishable=True, first_places={}, statement="No dataset could be ranked."
        )
    relative = {r.label: r.relative.model_dump() for r in ranked if r.relative is not None}
    first_places = {r.label: 0 for r in ranked}
    margins: Dict[str, str] = {}
    for measure in MEASURES:
        values = [relative[r.label][measure] for r in ranked]
        order = np.argsort(-np.asarray(values), kind="stable")
        first_places[ranked[order[0]].label] += 1
        if len(order) > 1:
            gap = values[order[0]] - values[order[1]]
            margins[measure] = f"{evidence_label(gap)} ({gap:.2f} nats over {ranked[order[1]].label})"
    if all(v < INDISTINGUISHABLE for rel in relative.values() for v in rel.values()):
        return Verdict(
            best=None,
            indistinguishable=True,
            first_places=first_places,
            margins=margins,
            statement="The datasets are indistinguishable.",
        )
    best = max(
        ranked,
        key=lambda r: (first_places[r.label], relative[r.label]["s_theta"], relative[r.label]["d_params"]),
    )
    return Verdict(
        best=best.label,
        indistinguishable=False,
        first_places=first_places,
        margins=margins,
        statement=f"{best.label} is the most informative dataset "
        f"({first_places[best.label]} of {len(MEASURES)} measures).",
    )


def _dataset_result(
    label: str,
    posteriors: List[SubjectPosterior],
    group: PebModel,
    kept: List[str],
    reference: GaussianDensity,
    config: RunConfig,
) -> DatasetResult:
    updated = [empirical_bayes_update(p, group) for p in posteriors]
    peb = fit_peb(updated, kept, config.peb, reference_prior=reference)
    space = build_model_space(peb, config.search.threshold, config.search.cap)
    probabilities = posterior_over_models([m.delta_f for m in space]).probabilities
    average = bayesian_model_average([m.reduced_posterior for m in space], [m.delta_f for m in space])
    measures = MeasureValues(
        s_theta=measure_parameter_certainty(peb),
        s_epsilon=measure_rfx_certainty(peb),
        d_params=info_gain_params(peb),
        d_models=info_gain_models(peb, space),
    )
    logger.info("Dataset %s: %s", label, measures.model_dump())
    return DatasetResult(
        label=label,
        status="ok",
        n_subjects=len(posteriors),
        subject_free_energies={p.subject_id: p.free_energy for p in updated},
        measures=measures,
        group_free_energy=peb.free_energy,
        gamma_mean=peb.gamma_post.mean.tolist(),
        group_mean={name: float(peb.beta_post.mean[i]) for i, name in enumerate(peb.labels)},
        parameter_precisions=peb.parameter_precisions(),
        model_space=[
            ModelEntry(switched_off=sorted(m.switched_off), delta_f=m.delta_f, probability=float(p))
            for m, p in zip(space, probabilities)
        ],
        model_average={name: float(average.mean[i]) for i, name in enumerate(peb.labels)},
    )


def compare_posteriors(
    posteriors: Mapping[str, Sequence[Optional[SubjectPosterior]]],
    config: RunConfig,
    failures: Optional[Mapping[str, Sequence[str]]] = None,
) -> ComparisonReport:
    """Pipeline steps two to five on already fitted subjects.

    ``posteriors`` maps dataset label to its subjects in input order; a
    dataset with any failed subject (``None`` entry or listed in
    ``failures``) is reported but excluded from the ranking.
    """
    failures = {label: list(v) for label, v in (failures or {}).items()}
    if len(posteriors) < 2:
        raise InputError(f"at least two datasets are needed for a comparison, got {len(posteriors)}")
    ok: Dict[str, List[SubjectPosterior]] = {}
    results: Dict[str, DatasetResult] = {}
    for label, subjects in posteriors.items():
        failed = failures.get(label) or [f"#{i}" for i, p in enumerate(subjects) if p is None]
        if failed:
            logger.warning("Excluding dataset %s: %d failed fits", label, len(failed))
            results[label] = DatasetResult(
                label=label,
                status="excluded",
                reason="subject fit failed",
                n_subjects=len(subjects),
                failed_subjects=failed,
            )
        else:
            ok[label] = [p for p in subjects if p is not None]
    if not ok:
        raise PipelineError("every dataset had a failed subject fit")

    first = next(iter(ok.values()))[0]
    interesting = select_parameters(first.labels, first.theta_prior, config.peb)
    pooled = [p for subjects in ok.values() for p in subjects]
    group = fit_peb(pooled, interesting, config.peb)
    pruned = prune_greedy(group, config.search) if config.search.prune else group
    kept = [label for label in interesting if label not in pruned.switched_off]
    if not kept:
        logger.warning("Pruning removed every parameter; keeping the full group model")
        pruned, kept = group, list(interesting)
    reference = first.theta_prior

    for label, subjects in ok.items():
        try:
            results[label] = _dataset_result(label, subjects, pruned, kept, reference, config)
        except BdcompError as e:
            logger.warning("Excluding dataset %s: %s", label, e)
            results[label] = DatasetResult(
                label=label, status="excluded", reason=str(e), n_subjects=len(subjects)
            )

    ordered = [results[label] for label in posteriors]
    ranked = [r for r in ordered if r.status == "ok" and r.measures is not None]
    raw = {measure: {r.label: getattr(r.measures, measure) for r in ranked} for measure in MEASURES}
    rel = {measure: relative_nats(values) for measure, values in raw.items()}
    for r in ranked:
        r.relative = MeasureValues(**{measure: rel[measure][r.label] for measure in MEASURES})
    tables = [
        PairwiseTable(
            measure=measure,
            labels=[r.label for r in ranked],
            probabilities=pairwise_probabilities([raw[measure][r.label] for r in ranked]),
        )
        for measure in MEASURES
    ]
    return ComparisonReport(
        provenance=make_provenance(config),
        interesting_parameters=interesting,
        pruned_parameters=list(pruned.switched_off),
        datasets=ordered,
        pairwise=tables,
        verdict=_verdict(ordered),
        settings={
            "peb": config.peb.model_dump(),
            "search": config.search.model_dump(),
            "vl": config.vl.model_dump(),
        },
    )


def run_pipeline(bundles: Sequence[DatasetBundle], config: Optional[RunConfig] = None) -> ComparisonReport:
    """Fit, pool, prune, re-estimate and score every dataset."""
    config = config or RunConfig()
    validate_bundles(bundles)
    fitted = fit_bundles(bundles, config)
    posteriors = {label: [p for _, p, _ in rows] for label, rows in fitted.items()}
    failures = {label: [sid for sid, p, _ in rows if p is None] for label, rows in fitted.items()}
    return compare_posteriors(posteriors, config, failures)
