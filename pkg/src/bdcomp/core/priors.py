"""Parameter layout of a DCM and its default priors."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from bdcomp.core.config import PriorConfig
from bdcomp.core.dcm import DcmParams, DcmSpec
from bdcomp.core.exceptions import InconsistentSubjectsError, InputError
from bdcomp.core.information import GaussianDensity


@dataclass(frozen=True)
class ParameterLayout:
    """Ordered labels for every parameter slot of a DCM, enabled or not.

    Slots are, in order: off-diagonal A (``A.<to>.<from>``), self-connection
    log-scalings (``A.self.<region>``), every B entry per input
    (``B.<input>.<to>.<from>``), C (``C.<region>.<input>``) and the three
    haemodynamic log-scalings (``H.transit|decay|epsilon.<region>``).
    """

    labels: List[str]
    enabled: np.ndarray
    n_regions: int
    n_inputs: int

    @classmethod
    def from_spec(cls, spec: DcmSpec) -> "ParameterLayout":
        n, m = spec.n_regions, spec.n_inputs
        regions, inputs = spec.region_names, spec.input_names
        labels: List[str] = []
        enabled: List[bool] = []
        for i in range(n):
            for j in range(n):
                if i != j:
                    labels.append(f"A.{regions[i]}.{regions[j]}")
                    enabled.append(bool(spec.a_mask[i, j]))
        for i in range(n):
            labels.append(f"A.self.{regions[i]}")
            enabled.append(True)
        for k in range(m):
            for i in range(n):
                for j in range(n):
                    labels.append(f"B.{inputs[k]}.{regions[i]}.{regions[j]}")
                    enabled.append(bool(spec.b_masks[k, i, j]))
        for i in range(n):
            for k in range(m):
                labels.append(f"C.{regions[i]}.{inputs[k]}")
                enabled.append(bool(spec.c_mask[i, k]))
        for name in ("transit", "decay", "epsilon"):
            for i in range(n):
                labels.append(f"H.{name}.{regions[i]}")
                enabled.append(True)
        return cls(labels=labels, enabled=np.array(enabled, dtype=bool), n_regions=n, n_inputs=m)

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError as e:
            raise InputError(f"Unknown parameter label {label!r}") from e

    def field_labels(self, field: str, enabled_only: bool = True) -> List[str]:
        """Labels whose first component is ``field`` (A, B, C or H)."""
        return [
            label
            for label, on in zip(self.labels, self.enabled)
            if label.split(".", 1)[0] == field and (on or not enabled_only)
        ]

    def _slices(self) -> Dict[str, slice]:
        n, m = self.n_regions, self.n_inputs
        sizes = [("a", n * (n - 1)), ("a_self", n), ("b", m * n * n), ("c", n * m)]
        sizes += [("transit", n), ("decay", n), ("epsilon", n)]
        out, start = {}, 0
        for name, size in sizes:
            out[name] = slice(start, start + size)
            start += size
        return out

    def unpack(self, theta: np.ndarray, log_precision: Optional[np.ndarray] = None) -> DcmParams:
        """DcmParams from a flat vector, or from a (batch, size) stack of vectors."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.size:
            raise InputError(f"expected {self.size} parameters, got {theta.shape[-1]}")
        n, m = self.n_regions, self.n_inputs
        batch = theta.shape[:-1]
        s = self._slices()
        rows, cols = np.nonzero(~np.eye(n, dtype=bool))
        a = np.zeros(batch + (n, n))
        a[..., rows, cols] = theta[..., s["a"]]
        return DcmParams(
            a=a,
            a_self=theta[..., s["a_self"]].copy(),
            b=theta[..., s["b"]].reshape(batch + (m, n, n)).copy(),
            c=theta[..., s["c"]].reshape(batch + (n, m)).copy(),
            transit=theta[..., s["transit"]].copy(),
            decay=theta[..., s["decay"]].copy(),
            epsilon=theta[..., s["epsilon"]].copy(),
            log_precision=np.zeros(batch + (n,)) if log_precision is None else np.asarray(log_precision),
        )

    def pack(self, params: DcmParams) -> np.ndarray:
        """Flat vector (or batch of vectors) from DcmParams."""
        n = self.n_regions
        batch = params.batch_shape
        rows, cols = np.nonzero(~np.eye(n, dtype=bool))
        parts = [
            params.a[..., rows, cols],
            params.a_self,
            params.b.reshape(batch + (-1,)),
            params.c.reshape(batch + (-1,)),
            params.transit,
            params.decay,
            params.epsilon,
        ]
        return np.concatenate(parts, axis=-1)


@dataclass
class PriorSpec:
    """Priors over the DCM parameter vector and the per-region log-precisions."""

    theta_prior: GaussianDensity
    lambda_prior: GaussianDensity

    @property
    def free_indices(self) -> np.ndarray:
        return np.flatnonzero(self.theta_prior.variances > 0)

    @property
    def free_lambda_indices(self) -> np.ndarray:
        return np.flatnonzero(self.lambda_prior.variances > 0)

    def check(self, layout: ParameterLayout) -> None:
        """Disabled slots must carry exactly zero prior variance."""
        if self.theta_prior.dim != layout.size:
            raise InconsistentSubjectsError(
                f"prior has {self.theta_prior.dim} parameters, layout has {layout.size}"
            )
        variances = self.theta_prior.variances
        if np.any(variances[~layout.enabled] != 0) or np.any(self.theta_prior.mean[~layout.enabled] != 0):
            raise InputError("priors enable parameters that the DcmSpec masks switch off")
        if self.lambda_prior.dim != layout.n_regions:
            raise InconsistentSubjectsError("one log-precision per region is required")


def default_priors(spec: DcmSpec, config: Optional[PriorConfig] = None) -> PriorSpec:
    """Shrinkage priors for every enabled slot; disabled slots get variance 0."""
    config = config or PriorConfig()
    layout = ParameterLayout.from_spec(spec)
    variances = np.zeros(layout.size)
    for i, label in enumerate(layout.labels):
        if not layout.enabled[i]:
            continue
        parts = label.split(".")
        field = parts[0]
        if field == "A":
            variances[i] = config.a_self_var if parts[1] == "self" else config.a_offdiag_var
        elif field == "B":
            variances[i] = config.b_diag_var if parts[2] == parts[3] else config.b_offdiag_var
        elif field == "C":
            variances[i] = config.c_var
        else:
            variances[i] = {
                "transit": config.transit_var,
                "decay": config.decay_var,
                "epsilon": config.epsilon_var,
            }[parts[1]]
    n = spec.n_regions
    return PriorSpec(
        theta_prior=GaussianDensity.from_variances(np.zeros(layout.size), variances),
        lambda_prior=GaussianDensity.from_variances(
            np.full(n, config.log_precision_mean), np.full(n, config.log_precision_var)
        ),
    )


def labels_to_indices(all_labels: Sequence[str], subset: Sequence[str]) -> np.ndarray:
    """Positions of ``subset`` inside ``all_labels``."""
    lookup = {label: i for i, label in enumerate(all_labels)}
    missing = [label for label in subset if label not in lookup]
    if missing:
        raise InconsistentSubjectsError(f"unknown parameter labels: {', '.join(missing)}")
    return np.array([lookup[label] for label in subset], dtype=int)
