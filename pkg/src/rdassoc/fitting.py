"""
Chain geometry: closed-form state prediction from an association chain, the
normalized geometric fitting error, chain likelihood, and Gauss-Newton
refinement.

For a single target seen along a linear array, two features of the
observations are exactly linear in the sensor coordinate l:

    r^2 - l^2 = -2 x l + (x^2 + y^2)        (range-squared feature)
    r * d     = -vx l + (x vx + y vy)       (range-Doppler-product feature)

Fitting a chain's features against these lines yields (x, vx) by least
squares; (y, vy) follow from the per-sensor range equations. The residual sum
of squares, scaled by feature-noise normalizers, is the chain's geometric
fitting error F. F is additive over the chain, hence non-decreasing under
chain extension, which is what makes it usable as a search bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .scene import (
    Detection,
    KinematicState,
    NoiseModel,
    SensorArray,
    range_doppler_transform,
    transform_jacobian,
)

DEFAULT_ALPHA = 0.05

_DEGENERATE_DET = 1e-12


class DegenerateGeometryError(ValueError):
    """The chain's sensor geometry cannot support a linear fit."""


@dataclass(frozen=True)
class Chain:
    """Ordered detections over distinct sensors, attributed to one target."""

    detections: Tuple[Detection, ...]

    def __post_init__(self):
        if len(self.detections) < 2:
            raise ValueError("a scored chain needs at least 2 detections")
        sensors = [det.sensor_index for det in self.detections]
        if any(b <= a for a, b in zip(sensors, sensors[1:])):
            raise ValueError("chain sensors must be strictly increasing")
        if any(det.is_null for det in self.detections):
            raise ValueError("chains hold non-null detections only")

    @property
    def n(self) -> int:
        return len(self.detections)

    @property
    def sensors(self) -> Tuple[int, ...]:
        return tuple(det.sensor_index for det in self.detections)


@dataclass(frozen=True)
class FitNormalization:
    """Scale constants for the two feature residuals of the fitting error."""

    eta1: float  # range-Doppler-product feature, (m^2/s)^2
    eta2: float  # range-squared feature, m^4

    def __post_init__(self):
        if self.eta1 <= 0 or self.eta2 <= 0:
            raise ValueError("normalization constants must be positive")

    @classmethod
    def conservative(cls, noise: NoiseModel,
                     r_max: Optional[float] = None,
                     d_max: Optional[float] = None) -> "FitNormalization":
        """Worst-case normalizers at the scene's maximum range and Doppler."""
        r = noise.r_max if r_max is None else r_max
        d = noise.d_max if d_max is None else d_max
        sr2, sd2 = noise.sigma_r ** 2, noise.sigma_d ** 2
        return cls(
            eta1=sr2 * d * d + r * r * sd2 + sr2 * sd2,
            eta2=4.0 * r * r * sr2,
        )


@dataclass(frozen=True)
class StateFit:
    """A chain's state estimate with its fit diagnostics.

    s1 = (-vx, kappa1) and s2 = (-2x, kappa2) are the fitted line coefficients
    of the two features; fit_error is F; log_likelihood is the full chain
    negative log likelihood (quadratic residual plus length penalty).
    """

    state: KinematicState
    fit_error: float
    log_likelihood: float
    s1: Tuple[float, float]
    s2: Tuple[float, float]


# ----------------------------------------------------------------------------
# Incremental feature sums
#
# Everything the fit needs is expressible in running sums over the chain, so
# partial chains in a graph search can push/pop detections in O(1).
# ----------------------------------------------------------------------------

class ChainFitTracker:
    """Running least-squares state of a growing chain.

    q1 = r*d and q2 = r^2 - l^2 are each regressed on l with an intercept.
    push/pop maintain the sufficient statistics; fitting_error(), state(), and
    quadratic_log_likelihood() read out of them in O(1)/O(n).

    When constructed with a noise model, parallel feature-variance-weighted
    sums are maintained, giving weighted_fitting_error(): the same residual
    with each sensor's feature scaled by its own noise variance. That variant
    is chi-squared-calibrated against the search thresholds, where the scalar
    worst-case normalization is only a loose bound.
    """

    __slots__ = ("array", "noise", "_stack", "n", "sl", "sll",
                 "sq1", "slq1", "sq1q1", "sq2", "slq2", "sq2q2", "sr2",
                 "w1s", "w1l", "w1ll", "w1q", "w1lq", "w1qq",
                 "w2s", "w2l", "w2ll", "w2q", "w2lq", "w2qq")

    def __init__(self, array: SensorArray, noise: Optional[NoiseModel] = None):
        self.array = array
        self.noise = noise
        self._stack = []
        self.n = 0
        self.sl = self.sll = 0.0
        self.sq1 = self.slq1 = self.sq1q1 = 0.0
        self.sq2 = self.slq2 = self.sq2q2 = 0.0
        self.sr2 = 0.0
        self.w1s = self.w1l = self.w1ll = self.w1q = self.w1lq = self.w1qq = 0.0
        self.w2s = self.w2l = self.w2ll = self.w2q = self.w2lq = self.w2qq = 0.0

    def _weights(self, det: Detection) -> Tuple[float, float]:
        sr2 = self.noise.sigma_r ** 2
        sd2 = self.noise.sigma_d ** 2
        # Feature scale floored at one resolution cell so a near-zero noisy
        # range cannot produce an exploding weight.
        r2 = max(det.range_m, self.noise.delta_r) ** 2
        w1 = 1.0 / (sr2 * det.doppler ** 2 + r2 * sd2 + sr2 * sd2)
        w2 = 1.0 / (4.0 * r2 * sr2)
        return w1, w2

    def push(self, det: Detection) -> None:
        l = self.array.positions[det.sensor_index]
        q1 = det.range_m * det.doppler
        q2 = det.range_m * det.range_m - l * l
        self._stack.append(det)
        self.n += 1
        self.sl += l
        self.sll += l * l
        self.sq1 += q1
        self.slq1 += l * q1
        self.sq1q1 += q1 * q1
        self.sq2 += q2
        self.slq2 += l * q2
        self.sq2q2 += q2 * q2
        self.sr2 += det.range_m * det.range_m
        if self.noise is not None:
            w1, w2 = self._weights(det)
            self.w1s += w1
            self.w1l += w1 * l
            self.w1ll += w1 * l * l
            self.w1q += w1 * q1
            self.w1lq += w1 * l * q1
            self.w1qq += w1 * q1 * q1
            self.w2s += w2
            self.w2l += w2 * l
            self.w2ll += w2 * l * l
            self.w2q += w2 * q2
            self.w2lq += w2 * l * q2
            self.w2qq += w2 * q2 * q2

    def pop(self) -> Detection:
        det = self._stack.pop()
        l = self.array.positions[det.sensor_index]
        q1 = det.range_m * det.doppler
        q2 = det.range_m * det.range_m - l * l
        self.n -= 1
        self.sl -= l
        self.sll -= l * l
        self.sq1 -= q1
        self.slq1 -= l * q1
        self.sq1q1 -= q1 * q1
        self.sq2 -= q2
        self.slq2 -= l * q2
        self.sq2q2 -= q2 * q2
        self.sr2 -= det.range_m * det.range_m
        if self.noise is not None:
            w1, w2 = self._weights(det)
            self.w1s -= w1
            self.w1l -= w1 * l
            self.w1ll -= w1 * l * l
            self.w1q -= w1 * q1
            self.w1lq -= w1 * l * q1
            self.w1qq -= w1 * q1 * q1
            self.w2s -= w2
            self.w2l -= w2 * l
            self.w2ll -= w2 * l * l
            self.w2q -= w2 * q2
            self.w2lq -= w2 * l * q2
            self.w2qq -= w2 * q2 * q2
        return det

    def weighted_fitting_error(self) -> float:
        """Per-sensor-normalized feature residual of the current chain."""
        if self.noise is None:
            raise ValueError("tracker was built without a noise model")
        total = 0.0
        for sw, swl, swll, swq, swlq, swqq in (
                (self.w1s, self.w1l, self.w1ll, self.w1q, self.w1lq, self.w1qq),
                (self.w2s, self.w2l, self.w2ll, self.w2q, self.w2lq, self.w2qq)):
            det = swll * sw - swl * swl
            if det <= _DEGENERATE_DET * swll * sw:
                raise DegenerateGeometryError("coincident sensor geometry in chain")
            a = (sw * swlq - swl * swq) / det
            b = (swll * swq - swl * swlq) / det
            total += max(swqq - a * swlq - b * swq, 0.0)
        return total

    @property
    def detections(self) -> Tuple[Detection, ...]:
        return tuple(self._stack)

    def _det(self) -> float:
        return self.n * self.sll - self.sl * self.sl

    def _line_fits(self):
        # Returns (a1, b1, rss1, a2, b2, rss2) for q = a*l + b per feature.
        det = self._det()
        if det <= _DEGENERATE_DET:
            raise DegenerateGeometryError("coincident sensor geometry in chain")
        a1 = (self.n * self.slq1 - self.sl * self.sq1) / det
        b1 = (self.sll * self.sq1 - self.sl * self.slq1) / det
        rss1 = max(self.sq1q1 - a1 * self.slq1 - b1 * self.sq1, 0.0)
        a2 = (self.n * self.slq2 - self.sl * self.sq2) / det
        b2 = (self.sll * self.sq2 - self.sl * self.slq2) / det
        rss2 = max(self.sq2q2 - a2 * self.slq2 - b2 * self.sq2, 0.0)
        return a1, b1, rss1, a2, b2, rss2

    def fitting_error(self, norm: FitNormalization) -> float:
        _, _, rss1, _, _, rss2 = self._line_fits()
        return rss1 / norm.eta1 + rss2 / norm.eta2

    def line_coefficients(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        """((a1, b1), (a2, b2)) slope/intercept of the two feature fits."""
        a1, b1, _, a2, b2, _ = self._line_fits()
        return (a1, b1), (a2, b2)

    def linear_features(self) -> Tuple[float, float]:
        """(x_hat, vx_hat) from the two line fits."""
        a1, _, _, a2, _, _ = self._line_fits()
        return -a2 / 2.0, -a1

    def state(self) -> Optional[KinematicState]:
        """Closed-form full state, or None if geometrically infeasible."""
        x_hat, vx_hat = self.linear_features()
        # mean over the chain of r^2 - (x - l)^2 = y^2
        y2 = (self.sr2 - (self.n * x_hat * x_hat - 2.0 * x_hat * self.sl + self.sll)) / self.n
        if y2 <= 0.0:
            return None
        y_hat = math.sqrt(y2)
        vy_hat = (self.sq1 - vx_hat * (self.n * x_hat - self.sl)) / (self.n * y_hat)
        return KinematicState(x=x_hat, y=y_hat, vx=vx_hat, vy=vy_hat)

    def quadratic_log_likelihood(self, state: KinematicState, noise: NoiseModel) -> float:
        total = 0.0
        inv_r2 = 1.0 / (noise.sigma_r * noise.sigma_r)
        inv_d2 = 1.0 / (noise.sigma_d * noise.sigma_d)
        for det in self._stack:
            r_hat, d_hat = range_doppler_transform(state, self.array.positions[det.sensor_index])
            total += (r_hat - det.range_m) ** 2 * inv_r2 + (d_hat - det.doppler) ** 2 * inv_d2
        return total


def _tracker_for(chain: Chain, array: SensorArray) -> ChainFitTracker:
    t = ChainFitTracker(array)
    for det in chain.detections:
        t.push(det)
    return t


# ----------------------------------------------------------------------------
# Chain-level operations
# ----------------------------------------------------------------------------

def fit_linear_features(chain: Chain, array: SensorArray) -> Tuple[float, float]:
    """Least-squares (x_hat, vx_hat) from the chain's linear features.

    Exact on noiseless single-target chains. Raises DegenerateGeometryError if
    the chain's sensors are (numerically) coincident.
    """
    return _tracker_for(chain, array).linear_features()


def chain_state(chain: Chain, array: SensorArray) -> Optional[KinematicState]:
    """Closed-form state implied by a chain, or None when infeasible.

    None means the association is geometrically inconsistent (the implied
    y^2 is non-positive), not a numerical fault.
    """
    return _tracker_for(chain, array).state()


def fitting_error(chain: Chain, array: SensorArray, norm: FitNormalization) -> float:
    """Normalized geometric fitting error F of a chain.

    Residual of each feature after projecting out its best-fit line, scaled by
    norm. Non-negative, zero for any two-detection chain, and non-decreasing
    under chain extension.
    """
    return _tracker_for(chain, array).fitting_error(norm)


def quadratic_log_likelihood(chain: Chain, state: KinematicState,
                             noise: NoiseModel, array: SensorArray) -> float:
    """Sum of squared observation residuals for `state`, in sigma units."""
    return _tracker_for(chain, array).quadratic_log_likelihood(state, noise.require_positive())


def chain_log_likelihood(chain: Chain, state: KinematicState, noise: NoiseModel,
                         array: SensorArray, alpha: float = DEFAULT_ALPHA) -> float:
    """Chain negative log likelihood: quadratic residual + length penalty.

    The penalty n * log(alpha / (1 - alpha)) is negative, so (under
    minimization) longer chains are preferred over fragments of themselves.
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    quad = _tracker_for(chain, array).quadratic_log_likelihood(state, noise.require_positive())
    return quad + chain.n * math.log(alpha / (1.0 - alpha))


def predict_state(chain: Chain, array: SensorArray,
                  norm: Optional[FitNormalization] = None,
                  noise: Optional[NoiseModel] = None,
                  alpha: float = DEFAULT_ALPHA) -> Optional[StateFit]:
    """Closed-form state prediction with fit diagnostics, or None (rejected).

    fit_error is filled when `norm` is given, log_likelihood when `noise` is
    given; otherwise they are NaN.
    """
    tracker = _tracker_for(chain, array)
    state = tracker.state()
    if state is None:
        return None
    a1, b1, _, a2, b2, _ = tracker._line_fits()
    fit_err = tracker.fitting_error(norm) if norm is not None else float("nan")
    if noise is not None:
        quad = tracker.quadratic_log_likelihood(state, noise.require_positive())
        loglik = quad + chain.n * math.log(alpha / (1.0 - alpha))
    else:
        loglik = float("nan")
    return StateFit(state=state, fit_error=fit_err, log_likelihood=loglik,
                    s1=(a1, b1), s2=(a2, b2))


def gauss_newton_refine(chain: Chain, array: SensorArray, init: KinematicState,
                        noise: NoiseModel, max_iter: int = 20,
                        max_halvings: int = 8, tol: float = 1e-8) -> KinematicState:
    """Gauss-Newton minimization of the chain's quadratic residual.

    Best-effort: on a singular normal matrix, a non-finite iterate, or failure
    to descend, returns the best state seen (never worse than `init`).
    """
    noise.require_positive()
    ls = np.array([array.positions[det.sensor_index] for det in chain.detections])
    r_obs = np.array([det.range_m for det in chain.detections])
    d_obs = np.array([det.doppler for det in chain.detections])
    w_r = 1.0 / noise.sigma_r
    w_d = 1.0 / noise.sigma_d
    n = len(ls)

    def residual(z: np.ndarray) -> np.ndarray:
        dx = z[0] - ls
        r = np.hypot(dx, z[1])
        d = (dx * z[2] + z[1] * z[3]) / r
        return np.concatenate(((r - r_obs) * w_r, (d - d_obs) * w_d))

    def jacobian(z: np.ndarray) -> np.ndarray:
        dx = z[0] - ls
        r = np.hypot(dx, z[1])
        d = (dx * z[2] + z[1] * z[3]) / r
        rx, ry = dx / r, z[1] / r
        jac = np.zeros((2 * n, 4))
        jac[:n, 0] = rx * w_r
        jac[:n, 1] = ry * w_r
        jac[n:, 0] = (z[2] - d * rx) / r * w_d
        jac[n:, 1] = (z[3] - d * ry) / r * w_d
        jac[n:, 2] = rx * w_d
        jac[n:, 3] = ry * w_d
        return jac

    current = init.as_array()
    res = residual(current)
    cost = float(res @ res)
    for _ in range(max_iter):
        jac = jacobian(current)
        try:
            step = np.linalg.solve(jac.T @ jac, -jac.T @ res)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        # Step halving until the quadratic cost stops increasing.
        scale = 1.0
        improved = False
        for _ in range(max_halvings + 1):
            z = current + scale * step
            if z[1] > 0 and np.all(np.isfinite(z)):
                cand_res = residual(z)
                cand_cost = float(cand_res @ cand_res)
                if cand_cost <= cost:
                    current, res, cost = z, cand_res, cand_cost
                    improved = True
                    break
            scale *= 0.5
        if not improved:
            break
        if np.linalg.norm(scale * step) < tol:
            break
    return KinematicState(*current)


# ----------------------------------------------------------------------------
# Calibration statistic
# ----------------------------------------------------------------------------

def feature_residual_error(ranges_obs: Sequence[float], dopplers_obs: Sequence[float],
                           ranges_ref: Sequence[float], dopplers_ref: Sequence[float],
                           noise: NoiseModel, cross_covariance: bool = True) -> float:
    """Feature residuals of an observed chain against reference values,
    normalized per sensor by the feature-noise (co)variances.

    With cross_covariance=True each sensor's residual pair (delta(r*d),
    delta(r^2)) is whitened by its full 2x2 covariance (the two features share
    the range noise), making the statistic chi-squared with 2n degrees of
    freedom in the small-error regime. With False, the diagonal normalizers
    sigma_r^2 d^2 + r^2 sigma_d^2 + sigma_r^2 sigma_d^2 and 4 r^2 sigma_r^2
    are used alone.
    """
    noise.require_positive()
    sr2, sd2 = noise.sigma_r ** 2, noise.sigma_d ** 2
    total = 0.0
    for ro, do, rr, dr in zip(ranges_obs, dopplers_obs, ranges_ref, dopplers_ref):
        e1 = ro * do - rr * dr
        e2 = ro * ro - rr * rr
        c11 = sr2 * dr * dr + rr * rr * sd2 + sr2 * sd2
        c22 = 4.0 * rr * rr * sr2
        if cross_covariance:
            c22 += 2.0 * sr2 * sr2
            c12 = 2.0 * rr * dr * sr2
            det = c11 * c22 - c12 * c12
            total += (c22 * e1 * e1 - 2.0 * c12 * e1 * e2 + c11 * e2 * e2) / det
        else:
            total += e1 * e1 / c11 + e2 * e2 / c22
    return total
