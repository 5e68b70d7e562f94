"""
Scene model: targets, the linear sensor array, the forward range-Doppler
transform, and synthesis of noisy observation sets.

Conventions:
  - The array lies on the x-axis; targets are strictly in front of it (y > 0).
  - A detection is one (range, Doppler) pair at one sensor. Doppler is the
    radial velocity in m/s (positive = receding).
  - Noise variances are calibrated from the range/Doppler resolution cells and
    the linear SNR: sigma^2 = delta^2 / (kappa * SNR).
  - All types are immutable after construction; simulation functions are pure
    given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

# Table-driven nominal constants for the simulated radar network.
RANGE_RESOLUTION_M = 0.3
DOPPLER_RESOLUTION_MPS = 0.5
MAX_RANGE_M = 19.2
MAX_DOPPLER_MPS = 16.0

# Floor applied to noisy ranges so Detection.range_m stays positive.
_RANGE_FLOOR = 1e-3


class SceneGenerationError(RuntimeError):
    """Rejection sampling could not satisfy the separation constraint."""


@dataclass(frozen=True)
class KinematicState:
    """2D position and velocity of a point target."""

    x: float
    y: float
    vx: float
    vy: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.vx, self.vy)):
            raise ValueError("kinematic state must be finite")
        if self.y <= 0:
            raise ValueError(f"target must lie in front of the array (y > 0), got y={self.y}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy], dtype=float)

    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


def state_distance(a: KinematicState, b: KinematicState) -> float:
    """Euclidean distance in the joint position-velocity space (mixed units)."""
    return math.sqrt(
        (a.x - b.x) ** 2 + (a.y - b.y) ** 2 + (a.vx - b.vx) ** 2 + (a.vy - b.vy) ** 2
    )


@dataclass(frozen=True)
class SensorArray:
    """Linear array of monostatic sensors on the x-axis."""

    positions: Tuple[float, ...]

    def __post_init__(self):
        if len(self.positions) < 2:
            raise ValueError("need at least 2 sensors")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("sensor positions must be strictly increasing")
        object.__setattr__(self, "positions", tuple(float(p) for p in self.positions))

    @classmethod
    def uniform(cls, n_sensors: int, width: float, center: float = 0.0) -> "SensorArray":
        """Evenly spaced array of total width `width`, centered at `center`."""
        half = width / 2.0
        return cls(tuple(np.linspace(center - half, center + half, n_sensors)))

    @property
    def n_sensors(self) -> int:
        return len(self.positions)

    @property
    def width(self) -> float:
        return self.positions[-1] - self.positions[0]

    def baseline(self, i: int, j: int) -> float:
        """Separation |l_i - l_j| between two sensors."""
        return abs(self.positions[i] - self.positions[j])


@dataclass(frozen=True)
class Detection:
    """One range-Doppler pair at one sensor; `is_null` marks a placeholder."""

    range_m: float
    doppler: float
    sensor_index: int
    is_null: bool = False

    def __post_init__(self):
        if not self.is_null and self.range_m <= 0:
            raise ValueError(f"detection range must be positive, got {self.range_m}")

    @classmethod
    def null(cls, sensor_index: int) -> "Detection":
        return cls(range_m=float("nan"), doppler=float("nan"),
                   sensor_index=sensor_index, is_null=True)


@dataclass(frozen=True)
class ObservationSet:
    """Per-sensor unordered detections, with out-of-band truth labels.

    ``truth_labels[i][k]`` is the true target index behind ``detections[i][k]``
    (-1 for a false alarm). Labels exist for evaluation only and are never
    consumed by association code.
    """

    detections: Tuple[Tuple[Detection, ...], ...]
    truth_labels: Optional[Tuple[Tuple[int, ...], ...]] = None

    @property
    def n_sensors(self) -> int:
        return len(self.detections)

    def counts(self) -> Tuple[int, ...]:
        return tuple(len(col) for col in self.detections)

    def n_detections(self) -> int:
        return sum(self.counts())


@dataclass(frozen=True)
class NoiseModel:
    """Observation noise and anomaly model.

    sigma_r/sigma_d are the per-sensor Gaussian stds; p_miss is the per-sensor
    per-target miss probability; p_false_alarm is the expected number of false
    alarms per sensor (Poisson rate). kappa is the dimensionless constant in
    the resolution-cell Fisher information.
    """

    sigma_r: float
    sigma_d: float
    p_miss: float = 0.0
    p_false_alarm: float = 0.0
    snr_db: Optional[float] = None
    kappa: float = 1.0
    r_max: float = MAX_RANGE_M
    d_max: float = MAX_DOPPLER_MPS
    delta_r: float = RANGE_RESOLUTION_M
    delta_d: float = DOPPLER_RESOLUTION_MPS

    def __post_init__(self):
        if self.sigma_r < 0 or self.sigma_d < 0:
            raise ValueError("noise stds must be non-negative")
        if not 0.0 <= self.p_miss <= 1.0:
            raise ValueError("p_miss must be a probability")
        if self.p_false_alarm < 0:
            raise ValueError("p_false_alarm must be non-negative")

    @classmethod
    def from_snr(cls, snr_db: float,
                 resolution: Tuple[float, float] = (RANGE_RESOLUTION_M, DOPPLER_RESOLUTION_MPS),
                 kappa: float = 1.0, p_miss: float = 0.0, p_false_alarm: float = 0.0,
                 r_max: float = MAX_RANGE_M, d_max: float = MAX_DOPPLER_MPS) -> "NoiseModel":
        """Calibrate sigma_r/sigma_d to the resolution-cell bound at this SNR."""
        snr_lin = 10.0 ** (snr_db / 10.0)
        delta_r, delta_d = resolution
        return cls(
            sigma_r=delta_r / math.sqrt(kappa * snr_lin),
            sigma_d=delta_d / math.sqrt(kappa * snr_lin),
            p_miss=p_miss,
            p_false_alarm=p_false_alarm,
            snr_db=snr_db,
            kappa=kappa,
            r_max=r_max,
            d_max=d_max,
            delta_r=delta_r,
            delta_d=delta_d,
        )

    def require_positive(self) -> "NoiseModel":
        if self.sigma_r <= 0 or self.sigma_d <= 0:
            raise ValueError("association requires strictly positive noise stds")
        return self


# ----------------------------------------------------------------------------
# Forward model
# ----------------------------------------------------------------------------

def range_doppler_transform(state: KinematicState, sensor_x: float) -> Tuple[float, float]:
    """Range and Doppler of a target seen from a sensor at (sensor_x, 0).

    r = sqrt((x - l)^2 + y^2); d = ((x - l) vx + y vy) / r.
    """
    dx = state.x - sensor_x
    r = math.hypot(dx, state.y)
    d = (dx * state.vx + state.y * state.vy) / r
    return r, d


def transform_jacobian(state: KinematicState, sensor_x: float) -> np.ndarray:
    """2x4 Jacobian of (r, d) w.r.t. (x, y, vx, vy)."""
    dx = state.x - sensor_x
    r = math.hypot(dx, state.y)
    d = (dx * state.vx + state.y * state.vy) / r
    dr_dx = dx / r
    dr_dy = state.y / r
    return np.array([
        [dr_dx, dr_dy, 0.0, 0.0],
        [(state.vx - d * dr_dx) / r, (state.vy - d * dr_dy) / r, dx / r, state.y / r],
    ])


# ----------------------------------------------------------------------------
# Scene synthesis
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneBounds:
    """Uniform draw ranges for target states (nominal scene box)."""

    x: Tuple[float, float] = (-8.0, 8.0)
    y: Tuple[float, float] = (2.0, 12.0)
    vx: Tuple[float, float] = (-10.0, 10.0)
    vy: Tuple[float, float] = (-10.0, 10.0)


def _separated_at_all_sensors(a: KinematicState, b: KinematicState, array: SensorArray,
                              dr_min: float, dd_min: float) -> bool:
    # "Well-separated" = at every sensor, apart in range OR in Doppler.
    for l in array.positions:
        ra, da = range_doppler_transform(a, l)
        rb, db = range_doppler_transform(b, l)
        if abs(ra - rb) < dr_min and abs(da - db) < dd_min:
            return False
    return True


def simulate_scene(n_targets: int,
                   bounds: Optional[SceneBounds] = None,
                   separation: Optional[Tuple[float, float]] = None,
                   array: Optional[SensorArray] = None,
                   rng_seed=0,
                   max_attempts: int = 20000) -> Tuple[KinematicState, ...]:
    """Draw target states uniformly inside `bounds`.

    With `separation` = (dr_min, dd_min), rejection-sample so that every target
    pair is separated in range or Doppler at every sensor (`array` required).
    Deterministic for a fixed seed.
    """
    if separation is not None and array is None:
        raise ValueError("separation check needs the sensor array")
    bounds = bounds or SceneBounds()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)

    targets = []
    attempts = 0
    while len(targets) < n_targets:
        attempts += 1
        if attempts > max_attempts:
            raise SceneGenerationError(
                f"gave up after {max_attempts} draws: scene too dense for "
                f"separation {separation}")
        cand = KinematicState(
            x=rng.uniform(*bounds.x),
            y=rng.uniform(*bounds.y),
            vx=rng.uniform(*bounds.vx),
            vy=rng.uniform(*bounds.vy),
        )
        if separation is not None:
            dr_min, dd_min = separation
            if not all(_separated_at_all_sensors(cand, t, array, dr_min, dd_min)
                       for t in targets):
                continue
        targets.append(cand)
    return tuple(targets)


def simulate_observations(targets: Sequence[KinematicState],
                          array: SensorArray,
                          noise: NoiseModel,
                          rng_seed=0) -> ObservationSet:
    """Synthesize one snapshot of noisy, anomaly-laden detections.

    Per sensor and target: with probability 1 - p_miss emit the true pair plus
    independent Gaussian noise; then add Poisson(p_false_alarm) false alarms
    uniform over [0, r_max] x [-d_max, d_max]; shuffle the sensor's detection
    order. Noisy ranges are floored at a tiny positive value and Dopplers
    clipped to +-d_max.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    columns = []
    labels = []
    for i, l in enumerate(array.positions):
        col = []
        lab = []
        for k, target in enumerate(targets):
            if noise.p_miss > 0 and rng.random() < noise.p_miss:
                continue
            r, d = range_doppler_transform(target, l)
            if noise.sigma_r > 0:
                r += rng.normal(0.0, noise.sigma_r)
            if noise.sigma_d > 0:
                d += rng.normal(0.0, noise.sigma_d)
            r = max(r, _RANGE_FLOOR)
            d = min(max(d, -noise.d_max), noise.d_max)
            col.append(Detection(range_m=r, doppler=d, sensor_index=i))
            lab.append(k)
        if noise.p_false_alarm > 0:
            for _ in range(rng.poisson(noise.p_false_alarm)):
                col.append(Detection(
                    range_m=max(rng.uniform(0.0, noise.r_max), _RANGE_FLOOR),
                    doppler=rng.uniform(-noise.d_max, noise.d_max),
                    sensor_index=i))
                lab.append(-1)
        order = rng.permutation(len(col))
        columns.append(tuple(col[j] for j in order))
        labels.append(tuple(lab[j] for j in order))
    return ObservationSet(detections=tuple(columns), truth_labels=tuple(labels))
