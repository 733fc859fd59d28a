"""Extended Kalman filter over the state ``[alpha_R, alpha_I, theta]``.

The gain components follow the AR(1) model, theta a random walk, and the
measurement is the real/imaginary split of the beamformed observation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import (ArrayGeometry, angle_diff, beam_gain, beam_gain_derivative,
                      wrap_angle)

MAX_INNOVATION_COND = 1e12


class EkfBreakdown(ArithmeticError):
    """Innovation covariance too ill-conditioned to invert."""


def default_p0() -> np.ndarray:
    return np.diag([0.01, 0.01, math.radians(1.0) ** 2])


@dataclass(frozen=True)
class EkfState:
    x: np.ndarray
    p: np.ndarray


@dataclass
class EkfParams:
    rho: float
    q_theta: float
    r: np.ndarray
    p0: np.ndarray = field(default_factory=default_p0)

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.q_theta < 0:
            raise ValueError("q_theta must be non-negative")
        if self.r.shape != (2, 2) or np.any(np.linalg.eigvalsh(self.r) <= 0):
            raise ValueError("r must be a 2x2 positive definite matrix")

    @property
    def noise_std(self) -> float:
        return math.sqrt(self.r[0, 0])

    def to_json(self) -> str:
        return json.dumps({"rho": self.rho, "q_theta": self.q_theta,
                           "r": self.r.tolist(), "p0": self.p0.tolist()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EkfParams:
        d = json.loads(text)
        return cls(d["rho"], d["q_theta"], np.array(d["r"]), np.array(d["p0"]))


def estimate_params(trajectories, noise_std: float, p0=None) -> EkfParams:
    """Calibrate rho, q_theta and r from ground-truth training trajectories.

    rho is the pooled lag-1 autocorrelation of the real gain component;
    q_theta the variance of wrap-aware per-step AoA increments.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empty training dataset")
    if any(len(t) < 2 for t in trajectories):
        raise ValueError("insufficient data: every trajectory needs at least two steps")
    num = den = 0.0
    increments = []
    for t in trajectories:
        a = t.alpha.real
        num += float(np.dot(a[:-1], a[1:]))
        den += float(np.dot(a[:-1], a[:-1]))
        increments.append(angle_diff(t.theta[1:], t.theta[:-1]))
    rho = float(np.clip(num / den, 0.0, 1.0)) if den > 0 else 0.0
    q_theta = float(np.var(np.concatenate(increments)))
    r = np.eye(2) * max(noise_std, 1e-12) ** 2
    return EkfParams(rho, q_theta, r, default_p0() if p0 is None else p0)


def initial_state(alpha: complex, theta: float, params: EkfParams) -> EkfState:
    return EkfState(np.array([alpha.real, alpha.imag, wrap_angle(theta)]), params.p0.copy())


def predict(state: EkfState, params: EkfParams) -> EkfState:
    rho = params.rho
    f = np.diag([rho, rho, 1.0])
    qa = (1.0 - rho * rho) / 2.0
    q = np.diag([qa, qa, params.q_theta])
    x = f @ state.x
    x[2] = wrap_angle(x[2])
    return EkfState(x, f @ state.p @ f.T + q)


def observation_h(x, theta_b: float, geometry: ArrayGeometry) -> np.ndarray:
    y = complex(x[0], x[1]) * beam_gain(x[2], theta_b, geometry)
    return np.array([y.real, y.imag])


def jacobian_h(x, theta_b: float, geometry: ArrayGeometry) -> np.ndarray:
    g = beam_gain(x[2], theta_b, geometry)
    dy = complex(x[0], x[1]) * beam_gain_derivative(x[2], theta_b, geometry)
    return np.array([[g.real, -g.imag, dy.real],
                     [g.imag, g.real, dy.imag]])


def _symmetrize(p):
    return 0.5 * (p + p.T)


def update(state: EkfState, y_observed: complex, theta_b: float, params: EkfParams,
           geometry: ArrayGeometry, joseph: bool = True) -> EkfState:
    """Measurement correction; raises :class:`EkfBreakdown` on a singular innovation."""
    h = jacobian_h(state.x, theta_b, geometry)
    nu = np.array([y_observed.real, y_observed.imag]) - observation_h(state.x, theta_b, geometry)
    s = h @ state.p @ h.T + params.r
    if not np.all(np.isfinite(s)) or np.linalg.cond(s) > MAX_INNOVATION_COND:
        raise EkfBreakdown("innovation covariance is numerically singular")
    k = np.linalg.solve(s, h @ state.p).T
    x = state.x + k @ nu
    x[2] = wrap_angle(x[2])
    ikh = np.eye(3) - k @ h
    if joseph:
        p = ikh @ state.p @ ikh.T + k @ params.r @ k.T
    else:
        p = ikh @ state.p
    return EkfState(x, _symmetrize(p))


class EkfTracker:
    """Stateful adapter exposing the filter through the common tracker interface."""

    name = "ekf"

    def __init__(self, params: EkfParams, geometry: ArrayGeometry):
        self.params = params
        self.geometry = geometry
        self.state: EkfState | None = None

    def begin(self, theta0: float, alpha0: complex) -> None:
        self.state = initial_state(alpha0, theta0, self.params)

    def reacquire(self, theta: float, alpha: complex) -> None:
        self.state = initial_state(alpha, theta, self.params)

    def step(self, y: complex, theta_b: float) -> float:
        prior = predict(self.state, self.params)
        try:
            self.state = update(prior, y, theta_b, self.params, self.geometry)
        except EkfBreakdown:
            self.state = EkfState(prior.x, self.params.p0.copy())
        return float(self.state.x[2])
