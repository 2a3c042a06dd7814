"""Reading and writing cohorts, posteriors and reports.

JSON documents carry a ``provenance`` block; CSV timeseries carry the same
information as ``#`` comment lines above the header. CSV floats are written
with 17 significant digits and JSON floats as their shortest round-trip repr,
so every value reads back bit for bit.

Layout under an output directory::

    cohort/manifest.json
    cohort/ground_truth.json
    cohort/<dataset>/spec.json
    cohort/<dataset>/inputs.json
    cohort/<dataset>/<subject>.csv
    posteriors/manifest.json
    posteriors/<dataset>/<subject>.json
    report.json
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bdcomp.core.compare import ComparisonReport, DatasetBundle, Provenance, SubjectData
from bdcomp.core.dcm import DcmSpec, InputSchedule
from bdcomp.core.exceptions import InputError
from bdcomp.core.inversion import SubjectPosterior
from bdcomp.core.synth import GroundTruth

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
MANIFEST = "manifest.json"


def load_json(path: Path) -> Any:
    """Parse a JSON file, reporting syntax errors as ``path:line:column``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"Cannot read {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e


def save_json(path: Path, payload: Dict[str, Any], provenance: Optional[Provenance] = None) -> Path:
    """Write ``payload`` (plus provenance) as indented JSON, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = dict(payload)
    if provenance is not None:
        document["provenance"] = provenance.model_dump()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def write_timeseries(
    path: Path, data: np.ndarray, region_names: Sequence[str], provenance: Optional[Provenance] = None
) -> Path:
    """One column per region, one row per volume."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(np.asarray(data, dtype=float), columns=list(region_names))
    with open(path, "w", encoding="utf-8", newline="") as f:
        if provenance is not None:
            for key, value in provenance.model_dump().items():
                f.write(f"# {key}: {value}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT)
    return path


def read_timeseries(path: Path, region_names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Read a timeseries CSV; the header must name the expected regions in order."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"Timeseries file not found: {path}")
    try:
        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"Cannot parse {path}: {e}") from e
    if region_names is not None and list(frame.columns) != list(region_names):
        raise InputError(f"{path}: columns {list(frame.columns)} do not match regions {list(region_names)}")
    values = frame.to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise InputError(f"{path}: timeseries contains missing or non-finite values")
    return values


def load_spec(path: Path) -> DcmSpec:
    return DcmSpec.from_dict(load_json(path))


def load_inputs(path: Path) -> InputSchedule:
    return InputSchedule.from_dict(load_json(path))


def save_cohort(
    root: Path,
    bundles: Sequence[DatasetBundle],
    provenance: Provenance,
    truth: Optional[GroundTruth] = None,
) -> List[Path]:
    """Write every dataset's spec, inputs and subject CSVs below ``root``."""
    root = Path(root)
    written = []
    manifest: Dict[str, Any] = {"datasets": []}
    for bundle in bundles:
        folder = root / bundle.label
        first = bundle.subjects[0]
        written.append(save_json(folder / "spec.json", first.spec.to_dict(), provenance))
        written.append(save_json(folder / "inputs.json", first.inputs.to_dict(), provenance))
        for subject in bundle.subjects:
            csv_path = folder / f"{subject.subject_id}.csv"
            written.append(write_timeseries(csv_path, subject.data, subject.spec.region_names, provenance))
        manifest["datasets"].append(
            {"label": bundle.label, "subjects": [s.subject_id for s in bundle.subjects]}
        )
    if truth is not None:
        written.append(save_json(root / "ground_truth.json", truth.to_dict(), provenance))
    written.append(save_json(root / MANIFEST, manifest, provenance))
    return written


def _manifest(root: Path) -> List[Dict[str, Any]]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise InputError(f"No {MANIFEST} in {root}")
    payload = load_json(path)
    try:
        return [
            {"label": str(d["label"]), "subjects": [str(s) for s in d["subjects"]]}
            for d in payload["datasets"]
        ]
    except (KeyError, TypeError) as e:
        raise InputError(f"{path}: malformed manifest ({e})") from e


def load_cohort(root: Path) -> List[DatasetBundle]:
    """Read a cohort written by ``save_cohort``, in manifest order."""
    bundles = []
    for entry in _manifest(root):
        folder = Path(root) / entry["label"]
        spec = load_spec(folder / "spec.json")
        inputs = load_inputs(folder / "inputs.json")
        subjects = []
        for sid in entry["subjects"]:
            data = read_timeseries(folder / f"{sid}.csv", spec.region_names)
            subjects.append(SubjectData(sid, spec, inputs, data))
        bundles.append(DatasetBundle(label=entry["label"], subjects=subjects))
    return bundles


def load_ground_truth(root: Path) -> GroundTruth:
    return GroundTruth.from_dict(load_json(Path(root) / "ground_truth.json"))


def save_posterior(path: Path, posterior: SubjectPosterior, provenance: Provenance) -> Path:
    return save_json(path, posterior.to_dict(), provenance)


def load_posterior(path: Path) -> SubjectPosterior:
    payload = load_json(path)
    try:
        return SubjectPosterior.from_dict(payload)
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"{path}: not a subject posterior ({e})") from e


def save_posteriors(
    root: Path,
    results: Dict[str, List[Tuple[str, Optional[SubjectPosterior], Optional[str]]]],
    provenance: Provenance,
) -> List[Path]:
    """Write each fitted subject and a manifest that records failures."""
    root = Path(root)
    written = []
    manifest: Dict[str, Any] = {"datasets": []}
    for label, rows in results.items():
        for sid, posterior, _ in rows:
            if posterior is not None:
                written.append(save_posterior(root / label / f"{sid}.json", posterior, provenance))
        manifest["datasets"].append(
            {
                "label": label,
                "subjects": [sid for sid, _, _ in rows],
                "failures": {sid: error for sid, posterior, error in rows if posterior is None},
            }
        )
    written.append(save_json(root / MANIFEST, manifest, provenance))
    return written


def load_posteriors(root: Path) -> Tuple[Dict[str, List[Optional[SubjectPosterior]]], Dict[str, List[str]]]:
    """Posteriors per dataset in manifest order, plus the failed subject ids."""
    root = Path(root)
    if not (root / MANIFEST).exists():
        raise InputError(f"No {MANIFEST} in {root}")
    payload = load_json(root / MANIFEST)
    posteriors: Dict[str, List[Optional[SubjectPosterior]]] = {}
    failures: Dict[str, List[str]] = {}
    for entry in payload.get("datasets", []):
        label = entry["label"]
        failed = list(entry.get("failures", {}))
        failures[label] = failed
        posteriors[label] = [
            None if sid in failed else load_posterior(root / label / f"{sid}.json")
            for sid in entry["subjects"]
        ]
    return posteriors, failures


def save_report(path: Path, report: ComparisonReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_report(path: Path) -> ComparisonReport:
    payload = load_json(path)
    try:
        return ComparisonReport.model_validate(payload)
    except ValueError as e:
        raise InputError(f"{path}: not a comparison report ({e})") from e
