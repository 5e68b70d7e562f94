"""
Estimation bounds and multi-target evaluation metrics.

The range/Doppler variance floor is delta^2 / (kappa * SNR) per resolution
cell; the position/velocity bound follows from the stacked per-sensor
Jacobians of the forward transform. Evaluation combines localization RMSE,
cardinality error, and a combined OSPA-style score.

Note on the OSPA convention used here: the score divides by the number of
emitted estimates, sums clipped distances over the *valid* estimates only
(valid = within d_bar of some truth in the joint position-velocity norm), and
charges d_bar^2 per unit of cardinality error |N_e - N_T| with N_e the valid
count. Distances mix squared meters and squared m/s unweighted. A
conventional variant (divide by the larger cardinality) is available via
``convention="max"`` for sanity comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .scene import (
    KinematicState,
    NoiseModel,
    SensorArray,
    transform_jacobian,
)

DEFAULT_OSPA_CUTOFF = 5.0


class UnobservableStateError(ValueError):
    """The information matrix for this geometry is singular."""


@dataclass(frozen=True)
class CrbReport:
    """Variance floors: per-sensor range/Doppler and scene position/velocity."""

    sigma_r2: float
    sigma_d2: float
    crb_p: float
    crb_v: float

    @property
    def tau_z(self) -> float:
        """Similarity radius used to deduplicate chain hypotheses."""
        return 10.0 * math.sqrt(self.crb_p + self.crb_v)


@dataclass(frozen=True)
class EvalReport:
    """Per-trial evaluation summary."""

    d_p_rmse: float
    d_v_rmse: float
    ospa: float
    n_valid: int
    cardinality_error: int
    likelihood_evals: int = 0
    fit_evals: int = 0


def crb_range_doppler(noise: NoiseModel,
                      resolution: Tuple[float, float]) -> Tuple[float, float]:
    """(sigma_r^2, sigma_d^2) = resolution^2 / (kappa * linear SNR)."""
    if noise.snr_db is None:
        raise ValueError("noise model carries no SNR")
    snr_lin = 10.0 ** (noise.snr_db / 10.0)
    if noise.kappa * snr_lin <= 0:
        raise ValueError("kappa * SNR must be positive")
    delta_r, delta_d = resolution
    return delta_r ** 2 / (noise.kappa * snr_lin), delta_d ** 2 / (noise.kappa * snr_lin)


def fisher_information(state: KinematicState, array: SensorArray,
                       sigma_r2: float, sigma_d2: float) -> np.ndarray:
    """4x4 information matrix of the stacked range-Doppler observations."""
    weights = np.diag([1.0 / sigma_r2, 1.0 / sigma_d2])
    info = np.zeros((4, 4))
    for l in array.positions:
        jac = transform_jacobian(state, l)
        info += jac.T @ weights @ jac
    return info


def crb_position_velocity(state: KinematicState, array: SensorArray,
                          sigma_r2: float, sigma_d2: float) -> CrbReport:
    """Position/velocity variance floor at a given state and geometry.

    crb_p = trace of the (x, y) block of the inverse information matrix,
    crb_v the (vx, vy) block. Raises UnobservableStateError on singular
    geometry.
    """
    info = fisher_information(state, array, sigma_r2, sigma_d2)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as err:
        raise UnobservableStateError(f"singular information matrix: {err}") from None
    cond = np.linalg.cond(info)
    if not np.isfinite(cond) or cond > 1e14:
        raise UnobservableStateError("information matrix numerically singular")
    return CrbReport(sigma_r2=sigma_r2, sigma_d2=sigma_d2,
                     crb_p=float(cov[0, 0] + cov[1, 1]),
                     crb_v=float(cov[2, 2] + cov[3, 3]))


# ----------------------------------------------------------------------------
# Localization / cardinality metrics
# ----------------------------------------------------------------------------

def _position_err2(est: KinematicState, truth: KinematicState) -> float:
    return (est.x - truth.x) ** 2 + (est.y - truth.y) ** 2


def _velocity_err2(est: KinematicState, truth: KinematicState) -> float:
    return (est.vx - truth.vx) ** 2 + (est.vy - truth.vy) ** 2


def localization_errors(estimates: Sequence[KinematicState],
                        truth: Sequence[KinematicState]) -> Tuple[float, float]:
    """Mean squared nearest-truth position and velocity errors.

    Each estimate is scored against its nearest truth independently (no
    one-to-one assignment). Empty estimates give (0, 0) by convention; the
    cardinality metrics carry that failure.
    """
    if not estimates:
        return 0.0, 0.0
    if not truth:
        raise ValueError("truth set must be non-empty")
    dp = 0.0
    dv = 0.0
    for est in estimates:
        dp += min(_position_err2(est, t) for t in truth)
        dv += min(_velocity_err2(est, t) for t in truth)
    return dp / len(estimates), dv / len(estimates)


def valid_estimates(estimates: Sequence[KinematicState],
                    truth: Sequence[KinematicState],
                    d_bar: float = DEFAULT_OSPA_CUTOFF) -> Tuple[int, ...]:
    """Indices of estimates within d_bar of some truth (joint 4D norm)."""
    out = []
    for i, est in enumerate(estimates):
        d2 = min(_position_err2(est, t) + _velocity_err2(est, t) for t in truth)
        if math.sqrt(d2) < d_bar:
            out.append(i)
    return tuple(out)


def ospa(estimates: Sequence[KinematicState], truth: Sequence[KinematicState],
         d_bar: float = DEFAULT_OSPA_CUTOFF, convention: str = "printed") -> float:
    """Combined localization + cardinality score with cutoff d_bar.

    sqrt( (sum over valid estimates of min(d_c, d_bar)^2
           + |N_e - N_T| * d_bar^2) / D )
    with d_c the squared nearest-truth joint distance, N_e the valid-estimate
    count, and the denominator D the number of emitted estimates
    (convention="printed") or max(#estimates, #truth) (convention="max").
    An empty estimate set saturates to d_bar * sqrt(N_T).
    """
    if d_bar <= 0:
        raise ValueError("d_bar must be positive")
    if convention not in ("printed", "max"):
        raise ValueError(f"unknown OSPA convention {convention!r}")
    n_truth = len(truth)
    if not estimates:
        return d_bar * math.sqrt(n_truth)
    valid = valid_estimates(estimates, truth, d_bar)
    total = 0.0
    for i in valid:
        d_c = min(_position_err2(estimates[i], t) + _velocity_err2(estimates[i], t)
                  for t in truth)
        total += min(d_c, d_bar) ** 2
    total += abs(len(valid) - n_truth) * d_bar ** 2
    denom = len(estimates) if convention == "printed" else max(len(estimates), n_truth)
    return math.sqrt(total / denom)


def evaluate(estimates: Sequence[KinematicState], truth: Sequence[KinematicState],
             d_bar: float = DEFAULT_OSPA_CUTOFF, likelihood_evals: int = 0,
             fit_evals: int = 0) -> EvalReport:
    """Full evaluation bundle for one trial."""
    dp2, dv2 = localization_errors(estimates, truth)
    valid = valid_estimates(estimates, truth, d_bar) if estimates else ()
    return EvalReport(
        d_p_rmse=math.sqrt(dp2),
        d_v_rmse=math.sqrt(dv2),
        ospa=ospa(estimates, truth, d_bar),
        n_valid=len(valid),
        cardinality_error=len(valid) - len(truth),
        likelihood_evals=likelihood_evals,
        fit_evals=fit_evals,
    )


def expected_miss(n_sensors: int, rho: int, p_miss: float) -> float:
    """Binomial per-target miss prediction for a given robustness level.

    Sum over k = 1 .. min(n_sensors - 2, rho + 1) of
    C(n_sensors, k) p^k (1-p)^(n_sensors-k): the probability that a target's
    per-sensor miss count lands in the window the search must absorb.
    Increasing rho widens the window, so the prediction grows with rho.
    """
    if not 0.0 <= p_miss <= 1.0:
        raise ValueError("p_miss must be a probability")
    upper = min(n_sensors - 2, rho + 1)
    total = 0.0
    for k in range(1, upper + 1):
        total += math.comb(n_sensors, k) * p_miss ** k * (1.0 - p_miss) ** (n_sensors - k)
    return total
