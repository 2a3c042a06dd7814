"""Bilinear neural dynamics, extended Balloon haemodynamics and BOLD output.

The forward model used both to simulate data and inside model inversion.
Parameter arrays may carry a leading batch axis; the integrator then runs
every parameter set through one Runge-Kutta loop on the microtime grid,
which is how a finite-difference Jacobian costs a single integration.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import expm

from bdcomp.core.exceptions import DimensionMismatchError, DivergedModelError, InputError

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence, None]

# RK4 is stable for real rates up to about 2.78 / h
STABLE_STEP = 2.0
MAX_SUBSTEPS = 64


@dataclass(frozen=True)
class HaemodynamicConstants:
    """Balloon model constants; region-specific parameters scale tau, kappa and epsilon."""

    kappa: float = 0.64
    gamma: float = 0.32
    tau: float = 2.0
    alpha: float = 0.32
    e0: float = 0.4
    v0: float = 4.0
    te: float = 0.04
    nu0: float = 40.3
    r0: float = 25.0

    @property
    def k1(self) -> float:
        return 4.3 * self.nu0 * self.e0 * self.te


@dataclass
class DcmSpec:
    """Network structure and acquisition timing of one subject's model."""

    region_names: List[str]
    input_names: List[str]
    a_mask: np.ndarray
    b_masks: np.ndarray
    c_mask: np.ndarray
    tr: float
    n_volumes: int
    constants: HaemodynamicConstants = field(default_factory=HaemodynamicConstants)

    def __post_init__(self) -> None:
        n, m = len(self.region_names), len(self.input_names)
        self.a_mask = np.array(self.a_mask, dtype=bool).reshape(n, n)
        np.fill_diagonal(self.a_mask, True)
        self.b_masks = np.array(self.b_masks, dtype=bool).reshape(m, n, n)
        self.c_mask = np.array(self.c_mask, dtype=bool).reshape(n, m)
        if self.tr <= 0:
            raise InputError(f"TR must be positive, got {self.tr}")
        if self.n_volumes < 1:
            raise InputError(f"n_volumes must be at least 1, got {self.n_volumes}")
        if len(set(self.region_names)) != n or len(set(self.input_names)) != m:
            raise InputError("region and input names must be unique")

    @property
    def n_regions(self) -> int:
        return len(self.region_names)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    @classmethod
    def create(
        cls,
        region_names: Sequence[str],
        input_names: Sequence[str],
        tr: float,
        n_volumes: int,
        a_mask: Optional[np.ndarray] = None,
        b_masks: Optional[np.ndarray] = None,
        c_mask: Optional[np.ndarray] = None,
        constants: Optional[HaemodynamicConstants] = None,
    ) -> "DcmSpec":
        """Build a spec with full A, diagonal-only B and full C unless masks are given."""
        n, m = len(region_names), len(input_names)
        return cls(
            region_names=list(region_names),
            input_names=list(input_names),
            a_mask=np.ones((n, n), dtype=bool) if a_mask is None else a_mask,
            b_masks=np.stack([np.eye(n, dtype=bool)] * m) if b_masks is None else b_masks,
            c_mask=np.ones((n, m), dtype=bool) if c_mask is None else c_mask,
            tr=tr,
            n_volumes=n_volumes,
            constants=constants or HaemodynamicConstants(),
        )

    def with_timing(self, tr: float, n_volumes: int) -> "DcmSpec":
        return replace(self, tr=tr, n_volumes=n_volumes)

    def reorder_regions(self, order: Sequence[int]) -> "DcmSpec":
        """Same network with regions listed in ``order``."""
        idx = np.asarray(order)
        return replace(
            self,
            region_names=[self.region_names[i] for i in idx],
            a_mask=self.a_mask[np.ix_(idx, idx)],
            b_masks=self.b_masks[:, idx][:, :, idx],
            c_mask=self.c_mask[idx],
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "region_names": list(self.region_names),
            "input_names": list(self.input_names),
            "a_mask": self.a_mask.astype(int).tolist(),
            "b_masks": self.b_masks.astype(int).tolist(),
            "c_mask": self.c_mask.astype(int).tolist(),
            "tr": self.tr,
            "n_volumes": self.n_volumes,
            "constants": asdict(self.constants),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "DcmSpec":
        try:
            return cls(
                region_names=list(payload["region_names"]),
                input_names=list(payload["input_names"]),
                a_mask=np.asarray(payload["a_mask"]),
                b_masks=np.asarray(payload["b_masks"]),
                c_mask=np.asarray(payload["c_mask"]),
                tr=float(payload["tr"]),
                n_volumes=int(payload["n_volumes"]),
                constants=HaemodynamicConstants(**payload.get("constants", {})),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"Invalid DCM spec: {e}") from e


@dataclass
class DcmParams:
    """Neural, haemodynamic and noise parameters of one (or a batch of) model(s)."""

    a: np.ndarray
    a_self: np.ndarray
    b: np.ndarray
    c: np.ndarray
    transit: np.ndarray
    decay: np.ndarray
    epsilon: np.ndarray
    log_precision: np.ndarray

    @classmethod
    def zeros(cls, spec: DcmSpec, batch: Tuple[int, ...] = ()) -> "DcmParams":
        n, m = spec.n_regions, spec.n_inputs
        return cls(
            a=np.zeros(batch + (n, n)),
            a_self=np.zeros(batch + (n,)),
            b=np.zeros(batch + (m, n, n)),
            c=np.zeros(batch + (n, m)),
            transit=np.zeros(batch + (n,)),
            decay=np.zeros(batch + (n,)),
            epsilon=np.zeros(batch + (n,)),
            log_precision=np.zeros(batch + (n,)),
        )

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.a_self.shape[:-1]

    def as_batch(self) -> "DcmParams":
        """View with exactly one leading batch axis."""
        if len(self.batch_shape) == 1:
            return self
        if self.batch_shape:
            raise DimensionMismatchError("only one batch axis is supported")
        return DcmParams(**{k: v[np.newaxis] for k, v in self.__dict__.items()})

    def copy(self) -> "DcmParams":
        return DcmParams(**{k: np.array(v, dtype=float) for k, v in self.__dict__.items()})

    def reorder_regions(self, order: Sequence[int]) -> "DcmParams":
        idx = np.asarray(order)
        return DcmParams(
            a=self.a[..., idx, :][..., idx],
            a_self=self.a_self[..., idx],
            b=self.b[..., idx, :][..., idx],
            c=self.c[..., idx, :],
            transit=self.transit[..., idx],
            decay=self.decay[..., idx],
            epsilon=self.epsilon[..., idx],
            log_precision=self.log_precision[..., idx],
        )

    def check_masks(self, spec: DcmSpec) -> None:
        """Raise when a masked-off entry is non-zero."""
        off = ~spec.a_mask | np.eye(spec.n_regions, dtype=bool)
        if np.any(self.a[..., off] != 0) or np.any(self.b[..., ~spec.b_masks] != 0) or np.any(
            self.c[..., ~spec.c_mask] != 0
        ):
            raise InputError("parameters are non-zero outside the enabled masks")


class Block(NamedTuple):
    """A boxcar on one input."""

    input_index: int
    onset: float
    duration: float


@dataclass
class InputSchedule:
    """Experimental inputs sampled at the microtime step ``dt``."""

    dt: float
    u: np.ndarray
    blocks: Optional[List[Block]] = None

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise InputError(f"microtime step must be positive, got {self.dt}")
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))

    @property
    def n_inputs(self) -> int:
        return int(self.u.shape[0])

    @property
    def n_steps(self) -> int:
        return int(self.u.shape[1])

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    def resampled(self, dt: float, duration: float) -> "InputSchedule":
        """The same experiment on another microtime grid.

        Block schedules are rebuilt exactly; dense ones take the value of the
        step each new grid point falls in, and hold the last value past the end.
        """
        if self.blocks is not None:
            return build_inputs(self.blocks, dt, max(duration, self.duration), n_inputs=self.n_inputs)
        n_steps = int(np.rint(duration / dt))
        source = np.minimum(np.floor(np.arange(n_steps) * dt / self.dt + 1e-9).astype(int), self.n_steps - 1)
        return InputSchedule(dt=dt, u=self.u[:, source])

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"dt": self.dt, "n_inputs": self.n_inputs, "n_steps": self.n_steps}
        if self.blocks is not None:
            payload["blocks"] = [list(b) for b in self.blocks]
        else:
            payload["u"] = self.u.tolist()
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "InputSchedule":
        try:
            dt = float(payload["dt"])
            if "blocks" in payload:
                blocks = [Block(int(i), float(on), float(dur)) for i, on, dur in payload["blocks"]]
                return build_inputs(
                    blocks, dt, int(payload["n_steps"]) * dt, n_inputs=int(payload["n_inputs"])
                )
            return cls(dt=dt, u=np.asarray(payload["u"], dtype=float))
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"Invalid input schedule: {e}") from e


@dataclass
class HaemodynamicState:
    """Vasodilatory signal, flow, volume and deoxyhaemoglobin per region."""

    s: np.ndarray
    f: np.ndarray
    v: np.ndarray
    q: np.ndarray

    @classmethod
    def rest(cls, n_regions: int) -> "HaemodynamicState":
        return cls(np.zeros(n_regions), np.ones(n_regions), np.ones(n_regions), np.ones(n_regions))

    def is_valid(self) -> bool:
        arrays = (self.s, self.f, self.v, self.q)
        return all(np.all(np.isfinite(x)) for x in arrays) and all(
            np.all(x > 0) for x in (self.f, self.v, self.q)
        )


def default_microtime(tr: float) -> float:
    """Integration step: TR/16, capped at 0.1 s."""
    return min(tr / 16.0, 0.1)


def _effective_connectivity(params: DcmParams, u: np.ndarray) -> np.ndarray:
    n = params.a_self.shape[-1]
    eye = np.eye(n)
    b_diag = np.diagonal(params.b, axis1=-2, axis2=-1)
    exponent = params.a_self + np.einsum("...j,...ji->...i", u, b_diag)
    coupling = params.a * (1 - eye) + np.einsum("...j,...jik->...ik", u, params.b * (1 - eye))
    return coupling - 0.5 * eye * np.exp(exponent)[..., :, np.newaxis]


def neural_derivative(z: np.ndarray, u: np.ndarray, params: DcmParams, spec: DcmSpec) -> np.ndarray:
    """Bilinear neural dynamics dz/dt = (A + sum_j u_j B_j) z + C u."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if z.shape[-1] != spec.n_regions or u.shape[-1] != spec.n_inputs:
        raise DimensionMismatchError(
            f"expected {spec.n_regions} regions and {spec.n_inputs} inputs, "
            f"got z{z.shape} and u{u.shape}"
        )
    jac = _effective_connectivity(params, u)
    return np.einsum("...ik,...k->...i", jac, z) + np.einsum("...ij,...j->...i", params.c, u)


def haemo_derivative(
    state: HaemodynamicState,
    z: np.ndarray,
    params: DcmParams,
    constants: Optional[HaemodynamicConstants] = None,
) -> HaemodynamicState:
    """Time derivative of the Balloon state driven by neural activity ``z``."""
    if not state.is_valid():
        raise ValueError("haemodynamic state must be finite with positive f, v, q")
    k = constants or HaemodynamicConstants()
    kappa = k.kappa * np.exp(params.decay)
    tau = k.tau * np.exp(params.transit)
    outflow = state.v ** (1.0 / k.alpha)
    extraction = (1.0 - (1.0 - k.e0) ** (1.0 / state.f)) / k.e0
    return HaemodynamicState(
        s=np.asarray(z) - kappa * state.s - k.gamma * (state.f - 1.0),
        f=state.s.copy(),
        v=(state.f - outflow) / tau,
        q=(state.f * extraction - outflow * state.q / state.v) / tau,
    )


def bold_observation(
    state: HaemodynamicState, params: DcmParams, constants: Optional[HaemodynamicConstants] = None
) -> np.ndarray:
    """Percent signal change predicted from volume and deoxyhaemoglobin."""
    return _bold(state.v, state.q, params.epsilon, constants or HaemodynamicConstants())


def _bold(v: np.ndarray, q: np.ndarray, epsilon: np.ndarray, k: HaemodynamicConstants) -> np.ndarray:
    eps = np.exp(epsilon)
    k2 = eps * k.r0 * k.e0 * k.te
    k3 = 1.0 - eps
    return k.v0 * (k.k1 * (1.0 - q) + k2 * (1.0 - q / v) + k3 * (1.0 - v))


def _haemo_rates(
    w: np.ndarray, z: np.ndarray, kappa: np.ndarray, tau: np.ndarray, k: HaemodynamicConstants
) -> np.ndarray:
    # w: (batch, 4, n) holding s, ln f, ln v, ln q
    s, lf, lv, lq = w[:, 0], w[:, 1], w[:, 2], w[:, 3]
    f = np.exp(lf)
    v = np.exp(lv)
    outflow = np.exp(lv / k.alpha)
    extraction = (1.0 - (1.0 - k.e0) ** (1.0 / f)) / k.e0
    rates = np.empty_like(w)
    rates[:, 0] = z - kappa * s - k.gamma * (f - 1.0)
    rates[:, 1] = s / f
    rates[:, 2] = (f - outflow) / (tau * v)
    rates[:, 3] = (f * extraction / np.exp(lq) - outflow / v) / tau
    return rates


def _haemo_rate_bound(w: np.ndarray, kappa: np.ndarray, tau: np.ndarray, k: HaemodynamicConstants) -> np.ndarray:
    """Row-sum bound on the haemodynamic Jacobian of every batch row, in 1/s."""
    s, lf, lv, lq = w[:, 0], w[:, 1], w[:, 2], w[:, 3]
    f = np.exp(lf)
    outflow_ratio = np.exp(lv * (1.0 / k.alpha - 1.0))
    extraction = (1.0 - (1.0 - k.e0) ** (1.0 / f)) / k.e0
    bounds = np.stack(
        [
            kappa + k.gamma * f,
            (1.0 + np.abs(s)) / f,
            (2.0 * np.exp(lf - lv) + (1.0 / k.alpha - 1.0) * outflow_ratio) / tau,
            (2.0 * f * extraction / np.exp(lq) + (1.0 / k.alpha - 1.0) * outflow_ratio) / tau,
        ]
    )
    return bounds.max(axis=(0, 2))


def _substeps(rate: np.ndarray, dt: float) -> np.ndarray:
    """RK4 sub-steps per microtime step that keep dt * rate inside the stability region.

    Zero marks a row that would need more than ``MAX_SUBSTEPS``; a NaN rate
    gets one step and then fails the finiteness check.
    """
    need = np.ceil(dt * np.nan_to_num(rate, nan=0.0, posinf=np.inf) / STABLE_STEP)
    return np.where(need > MAX_SUBSTEPS, 0, np.maximum(need, 1)).astype(int)


def _neural_generator(jac: np.ndarray, drive: np.ndarray) -> np.ndarray:
    """Augmented matrix [[J, d], [0, 0]] whose exponential advances z under a constant input."""
    n_batch, n, _ = jac.shape
    generator = np.zeros((n_batch, n + 1, n + 1))
    generator[:, :n, :n] = jac
    generator[:, :n, n] = drive
    return generator


def _propagate(propagator: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.einsum("bij,bj->bi", propagator[:, :-1, :-1], z) + propagator[:, :-1, -1]


def _step(
    x: np.ndarray,
    h: Union[float, np.ndarray],
    half_step: np.ndarray,
    kappa: np.ndarray,
    tau: np.ndarray,
    k: HaemodynamicConstants,
) -> np.ndarray:
    """Advance z exactly and the haemodynamic states by one RK4 step of length ``h``.

    ``half_step`` propagates z over h/2; ``h`` is a scalar or one value per row.
    """
    z0 = x[:, 0]
    z_mid = _propagate(half_step, z0)
    z1 = _propagate(half_step, z_mid)
    w = x[:, 1:]
    half = 0.5 * h
    k1 = _haemo_rates(w, z0, kappa, tau, k)
    k2 = _haemo_rates(w + half * k1, z_mid, kappa, tau, k)
    k3 = _haemo_rates(w + half * k2, z_mid, kappa, tau, k)
    k4 = _haemo_rates(w + h * k3, z1, kappa, tau, k)
    return np.concatenate([z1[:, np.newaxis], w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)], axis=1)


def sample_steps(spec: DcmSpec, dt: float) -> np.ndarray:
    """Microtime step index of each volume midpoint."""
    return np.rint((np.arange(spec.n_volumes) + 0.5) * spec.tr / dt).astype(int)


def integrate_batch(
    spec: DcmSpec, params: DcmParams, inputs: InputSchedule
) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate a batch of parameter sets.

    Returns predictions of shape (batch, n_volumes, n_regions) and, per batch
    row, the first microtime step after which the state was non-finite (-1 when
    the trajectory stayed finite). Diverged rows are filled with NaN.

    Inputs are constant over a microtime step, so the linear neural states are
    advanced with the matrix exponential and any self-inhibition the priors
    allow is integrated without a step-size limit. The haemodynamic states use
    RK4, split per batch row into equal sub-steps whenever a row-sum bound on
    their Jacobian would put ``dt`` outside RK4's stability region. A row that
    would need more than ``MAX_SUBSTEPS`` has run away and counts as diverged.
    """
    params = params.as_batch()
    n_batch = params.batch_shape[0]
    if inputs.n_inputs != spec.n_inputs:
        raise DimensionMismatchError(f"schedule has {inputs.n_inputs} inputs, spec has {spec.n_inputs}")
    if params.a_self.shape[-1] != spec.n_regions:
        raise DimensionMismatchError("parameters do not match the number of regions")
    dt = inputs.dt
    if dt > spec.tr:
        raise InputError(f"microtime step {dt} exceeds TR {spec.tr}")
    samples = sample_steps(spec, dt)
    n_steps = int(samples[-1])
    if inputs.n_steps < n_steps or inputs.duration < spec.tr * spec.n_volumes - 1e-9:
        raise InputError(
            f"inputs cover {inputs.duration:.3f} s but the acquisition needs {spec.tr * spec.n_volumes:.3f} s"
        )

    k = spec.constants
    kappa = k.kappa * np.exp(params.decay)
    tau = k.tau * np.exp(params.transit)
    patterns, pattern_of_step = np.unique(inputs.u[:, :n_steps].T, axis=0, return_inverse=True)
    pattern_of_step = np.asarray(pattern_of_step).reshape(-1)
    x = np.zeros((n_batch, 5, spec.n_regions))
    recorded = np.empty((n_batch, spec.n_volumes, 2, spec.n_regions))
    first_bad = np.full(n_batch, -1, dtype=int)
    volume = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        generators = [
            _neural_generator(_effective_connectivity(params, p), np.einsum("bij,j->bi", params.c, p))
            for p in patterns
        ]
        for g in generators:
            broken = ~np.all(np.isfinite(g), axis=(1, 2))
            x[broken] = np.nan
            g[broken] = 0.0
        half_steps = [expm(g * (0.5 * dt)) for g in generators]
        for step in range(n_steps + 1):
            while volume < spec.n_volumes and samples[volume] == step:
                recorded[:, volume] = x[:, 3:5]
                volume += 1
            if step == n_steps:
                break
            p = pattern_of_step[step]
            n_sub = _substeps(_haemo_rate_bound(x[:, 1:], kappa, tau, k), dt)
            x[n_sub == 0] = np.nan
            if n_sub.max() <= 1:
                x = _step(x, dt, half_steps[p], kappa, tau, k)
            else:
                n_sub = np.maximum(n_sub, 1)
                h = dt / n_sub
                sub_steps = expm(generators[p] * (0.5 * h)[:, np.newaxis, np.newaxis])
                for i in range(int(n_sub.max())):
                    rows = n_sub > i
                    x[rows] = _step(
                        x[rows], h[rows][:, np.newaxis, np.newaxis], sub_steps[rows], kappa[rows], tau[rows], k
                    )
            bad = ~np.all(np.isfinite(x), axis=(1, 2)) & (first_bad < 0)
            first_bad[bad] = step + 1

        y = _bold(
            np.exp(recorded[:, :, 0]), np.exp(recorded[:, :, 1]), params.epsilon[:, np.newaxis, :], k
        )
    bad_rows = (first_bad >= 0) | ~np.all(np.isfinite(y), axis=(1, 2))
    first_bad[bad_rows & (first_bad < 0)] = n_steps
    y[bad_rows] = np.nan
    return y, first_bad


def integrate(spec: DcmSpec, params: DcmParams, inputs: InputSchedule) -> np.ndarray:
    """Noiseless BOLD timeseries of shape (n_volumes, n_regions)."""
    if params.batch_shape:
        raise DimensionMismatchError("integrate takes a single parameter set; use integrate_batch")
    y, first_bad = integrate_batch(spec, params, inputs)
    if first_bad[0] >= 0:
        step = int(first_bad[0])
        raise DivergedModelError(
            f"state became non-finite by step {step} (t = {step * inputs.dt:.3f} s)",
            step_index=step,
            time=step * inputs.dt,
        )
    return y[0]


def simulate(
    spec: DcmSpec,
    params: DcmParams,
    inputs: InputSchedule,
    noise_sd: Union[float, Sequence[float], np.ndarray],
    seed: SeedLike,
) -> np.ndarray:
    """Noisy timeseries: ``integrate`` plus seeded I.I.D. Gaussian noise per region."""
    sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (spec.n_regions,))
    if np.any(sd < 0):
        raise InputError("noise standard deviations must be non-negative")
    y = integrate(spec, params, inputs)
    rng = np.random.default_rng(seed)
    return y + rng.standard_normal(y.shape) * sd


def build_inputs(
    blocks: Sequence[Tuple[int, float, float]],
    dt: float,
    total_duration: float,
    n_inputs: Optional[int] = None,
) -> InputSchedule:
    """Boxcar schedule: 1 during blocks, 0 elsewhere; overlaps saturate at 1."""
    if dt <= 0:
        raise InputError(f"microtime step must be positive, got {dt}")
    parsed = [Block(int(i), float(on), float(dur)) for i, on, dur in blocks]
    if n_inputs is None:
        n_inputs = max((b.input_index for b in parsed), default=-1) + 1
    n_steps = int(np.rint(total_duration / dt))
    u = np.zeros((n_inputs, n_steps))
    for block in parsed:
        if block.duration < 0:
            raise InputError(f"block {block} has a negative duration")
        if block.onset < 0 or block.onset + block.duration > total_duration + 1e-9:
            raise InputError(f"block {block} falls outside the {total_duration} s schedule")
        if not 0 <= block.input_index < n_inputs:
            raise InputError(f"block {block} refers to a missing input")
        start = int(np.rint(block.onset / dt))
        stop = int(np.rint((block.onset + block.duration) / dt))
        u[block.input_index, start:stop] = 1.0
    return InputSchedule(dt=dt, u=u, blocks=parsed)
