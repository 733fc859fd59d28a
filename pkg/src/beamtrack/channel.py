"""Single-beam ULA observation model and synthetic mobile-user trajectories.

Angles are in radians throughout. AoA values are kept in ``[0, 2*pi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# |psi| below this is treated as perfectly aligned
ALIGNED_TOL = 1e-9


def wrap_angle(theta):
    """Wrap angle(s) into ``[0, 2*pi)``."""
    out = np.mod(theta, TWO_PI)
    # np.mod can round tiny negatives up to exactly 2*pi
    out = np.where(out >= TWO_PI, 0.0, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


def angle_diff(a, b):
    """Signed wrap-aware difference ``a - b`` in ``[-pi, pi)``."""
    d = np.mod(np.asarray(a, dtype=float) - b + math.pi, TWO_PI) - math.pi
    if np.ndim(d) == 0:
        return float(d)
    return d


@dataclass(frozen=True)
class ArrayGeometry:
    n_r: int = 8
    d_over_lambda: float = 0.5

    def __post_init__(self):
        if int(self.n_r) != self.n_r or self.n_r < 1:
            raise ValueError(f"n_r must be a positive integer, got {self.n_r}")
        if not self.d_over_lambda > 0:
            raise ValueError("d_over_lambda must be positive")


@dataclass(frozen=True)
class TrajectoryPoint:
    theta: float
    alpha: complex


@dataclass
class Trajectory:
    """Ground-truth AoA and complex gain samples of one UE run."""

    theta: np.ndarray
    alpha: np.ndarray
    step_length_m: float = 0.1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=complex)
        if self.theta.shape != self.alpha.shape or self.theta.ndim != 1:
            raise ValueError("theta and alpha must be 1-D arrays of equal length")
        if len(self.theta) < 2:
            raise ValueError("a trajectory needs at least two points")

    def __len__(self):
        return len(self.theta)

    def __getitem__(self, n) -> TrajectoryPoint:
        return TrajectoryPoint(float(self.theta[n]), complex(self.alpha[n]))

    def decimate(self, factor: int) -> Trajectory:
        """Keep every ``factor``-th sample (a coarser observation density)."""
        factor = int(factor)
        if factor < 1:
            raise ValueError("decimation factor must be >= 1")
        meta = dict(self.meta, decimation=factor)
        return Trajectory(self.theta[::factor], self.alpha[::factor],
                          self.step_length_m * factor, meta)

    def max_step_change(self) -> float:
        return float(np.max(np.abs(angle_diff(self.theta[1:], self.theta[:-1]))))


@dataclass(frozen=True)
class ObservationParams:
    geometry: ArrayGeometry
    noise_std: float
    snr_db: float | None = None

    def __post_init__(self):
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be non-negative")

    @classmethod
    def from_snr(cls, snr_db: float, geometry: ArrayGeometry) -> ObservationParams:
        return cls(geometry, snr_to_noise_std(snr_db), snr_db)


@dataclass(frozen=True)
class GainModel:
    rho: float

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")

    @classmethod
    def from_coherence_length(cls, step_length_m: float, coherence_length_m: float):
        return cls(math.exp(-step_length_m / coherence_length_m))


def snr_to_noise_std(snr_db: float) -> float:
    """Per-dimension noise std for unit mean gain power at ``snr_db``."""
    if snr_db == math.inf:
        return 0.0
    return math.sqrt(1.0 / (2.0 * 10.0 ** (snr_db / 10.0)))


def steering_vector(theta: float, geometry: ArrayGeometry) -> np.ndarray:
    k = np.arange(geometry.n_r)
    phase = TWO_PI * geometry.d_over_lambda * k * math.cos(theta)
    return np.exp(1j * phase) / math.sqrt(geometry.n_r)


def spatial_phase(theta, theta_b, geometry: ArrayGeometry):
    """Inter-element phase offset between arrival and beam direction.

    The beam response is 2*pi periodic in this quantity, so it is returned
    wrapped to ``[-pi, pi)``.
    """
    psi = TWO_PI * geometry.d_over_lambda * (np.cos(theta) - np.cos(theta_b))
    return angle_diff(psi, 0.0)


def dirichlet(psi: float, n: int) -> complex:
    """``(1/n) * sum_k exp(j k psi)`` for wrapped ``psi``, in stable closed form."""
    if n == 1 or abs(psi) < ALIGNED_TOL:
        return 1.0 + 0.0j
    ratio = math.sin(n * psi / 2.0) / math.sin(psi / 2.0)
    return complex(np.exp(0.5j * (n - 1) * psi) * ratio / n)


def dirichlet_derivative(psi: float, n: int) -> complex:
    """Derivative of :func:`dirichlet` with respect to ``psi``."""
    if n == 1:
        return 0.0j
    m = 0.5 * (n - 1)
    if abs(psi) < 1e-2:
        # cancellation-free finite sum of the centred kernel near the removable point
        k = np.arange(n) - m
        s = float(np.sum(np.cos(k * psi)))
        ds = float(-np.sum(k * np.sin(k * psi)))
    else:
        sh, ch = math.sin(psi / 2.0), math.cos(psi / 2.0)
        sn, cn = math.sin(n * psi / 2.0), math.cos(n * psi / 2.0)
        s = sn / sh
        ds = (0.5 * n * cn * sh - 0.5 * sn * ch) / (sh * sh)
    return complex(np.exp(1j * m * psi) * (1j * m * s + ds) / n)


def beam_gain(theta: float, theta_b: float, geometry: ArrayGeometry) -> complex:
    """Response of a beam steered to ``theta_b`` to a wave arriving from ``theta``."""
    return dirichlet(float(spatial_phase(theta, theta_b, geometry)), geometry.n_r)


def beam_gains(theta, theta_b, geometry: ArrayGeometry) -> np.ndarray:
    """Array version of :func:`beam_gain` over broadcast inputs."""
    n = geometry.n_r
    psi = np.asarray(spatial_phase(np.asarray(theta, float), np.asarray(theta_b, float),
                                   geometry), dtype=float)
    if n == 1:
        return np.ones(psi.shape, dtype=complex)
    aligned = np.abs(psi) < ALIGNED_TOL
    safe = np.where(aligned, 1.0, psi)
    ratio = np.sin(n * safe / 2.0) / np.sin(safe / 2.0)
    g = np.exp(0.5j * (n - 1) * safe) * ratio / n
    return np.where(aligned, 1.0 + 0.0j, g)


def beam_gain_derivative(theta: float, theta_b: float, geometry: ArrayGeometry) -> complex:
    """d(beam_gain)/d(theta) at fixed beam direction."""
    psi = float(spatial_phase(theta, theta_b, geometry))
    dpsi = -TWO_PI * geometry.d_over_lambda * math.sin(theta)
    return dirichlet_derivative(psi, geometry.n_r) * dpsi


def complex_noise(std: float, rng: np.random.Generator, size=None):
    """Circularly symmetric complex Gaussian, ``std`` per real dimension."""
    z = rng.normal(0.0, 1.0, size=(2,) if size is None else (2,) + tuple(np.atleast_1d(size)))
    out = std * (z[0] + 1j * z[1])
    return complex(out) if size is None else out


def observe(point: TrajectoryPoint, theta_b: float, params: ObservationParams,
            rng: np.random.Generator) -> complex:
    y = point.alpha * beam_gain(point.theta, theta_b, params.geometry)
    if params.noise_std > 0:
        y += complex_noise(params.noise_std, rng)
    return complex(y)


def evolve_gain(alpha: complex, model: GainModel, rng: np.random.Generator) -> complex:
    """One AR(1) step applied independently to the real and imaginary parts."""
    rho = model.rho
    if rho == 1.0:
        return complex(alpha)
    zeta = rng.normal(0.0, math.sqrt((1.0 - rho * rho) / 2.0), size=2)
    return complex(rho * alpha.real - zeta[0], rho * alpha.imag - zeta[1])


@dataclass
class GeneratorConfig:
    """Scenario for :func:`generate_trajectory`.

    ``start_xy``, ``heading`` and ``anchor_xy`` pin the otherwise random
    geometry. ``mode`` is ``"nlos"`` (random scatterer as AoA anchor) or
    ``"los"`` (the BS at the origin).
    """

    cell_radius_m: float = 60.0
    carrier_ghz: float = 28.0
    path_length_m: float = 20.0
    step_length_m: float = 0.1
    mode: str = "nlos"
    min_anchor_distance_m: float = 5.0
    offset_rate_per_m: float = 0.5
    offset_std_deg: float = 3.0
    coherence_length_m: float = 1.0
    smoothness_deg: float = 10.0
    start_xy: tuple | None = None
    heading: float | None = None
    anchor_xy: tuple | None = None

    def validate(self):
        if not self.cell_radius_m > 0:
            raise ValueError("cell radius must be positive")
        if not self.path_length_m > 0:
            raise ValueError("path length must be positive")
        if not self.step_length_m > 0:
            raise ValueError("step length must be positive")
        if self.mode not in ("nlos", "los"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.coherence_length_m <= 0:
            raise ValueError("coherence length must be positive")

    @property
    def n_points(self) -> int:
        return math.ceil(self.path_length_m / self.step_length_m - 1e-9) + 1


def _uniform_in_disc(radius, rng):
    r = radius * math.sqrt(rng.uniform())
    phi = rng.uniform(0.0, TWO_PI)
    return np.array([r * math.cos(phi), r * math.sin(phi)])


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def generate_trajectory(config: GeneratorConfig, rng: np.random.Generator,
                        max_attempts: int = 100) -> Trajectory:
    """Straight-line UE walk with AoA taken toward an anchor plus an OU offset.

    Gains follow the AR(1) model with ``rho = exp(-step / coherence_length)``
    and unit mean power.
    """
    config.validate()
    n = config.n_points
    step = config.step_length_m
    box = 3.0 * config.cell_radius_m
    bound = math.radians(config.smoothness_deg)

    for attempt in range(max_attempts):
        start = (np.asarray(config.start_xy, dtype=float) if config.start_xy is not None
                 else _uniform_in_disc(config.cell_radius_m, rng))
        heading = (float(config.heading) if config.heading is not None
                   else rng.uniform(0.0, TWO_PI))
        direction = np.array([math.cos(heading), math.sin(heading)])
        pos = start + step * np.arange(n)[:, None] * direction
        if np.any(np.abs(pos) > box):
            raise ValueError("UE path leaves the 3x cell-radius bounding box")

        if config.anchor_xy is not None:
            anchor = np.asarray(config.anchor_xy, dtype=float)
        elif config.mode == "los":
            anchor = np.zeros(2)
        else:
            for _ in range(max_attempts):
                anchor = _uniform_in_disc(config.cell_radius_m, rng)
                if _segment_distance(anchor, pos[0], pos[-1]) >= config.min_anchor_distance_m:
                    break
            else:
                raise ValueError("could not place a scatterer clear of the UE path")

        rel = anchor - pos
        bearing = np.arctan2(rel[:, 1], rel[:, 0])

        sigma = math.radians(config.offset_std_deg)
        offset = np.zeros(n)
        if sigma > 0:
            decay = math.exp(-config.offset_rate_per_m * step)
            kick = sigma * math.sqrt(1.0 - decay * decay)
            offset[0] = rng.normal(0.0, sigma)
            xi = rng.normal(0.0, 1.0, size=n - 1)
            for k in range(1, n):
                offset[k] = decay * offset[k - 1] + kick * xi[k - 1]

        theta = wrap_angle(bearing - heading + offset)

        gm = GainModel.from_coherence_length(step, config.coherence_length_m)
        alpha = np.empty(n, dtype=complex)
        alpha[0] = complex_noise(math.sqrt(0.5), rng)
        for k in range(1, n):
            alpha[k] = evolve_gain(alpha[k - 1], gm, rng)

        meta = {
            "start_xy": [float(start[0]), float(start[1])],
            "heading": float(heading),
            "anchor_xy": [float(anchor[0]), float(anchor[1])],
            "attempts": attempt + 1,
        }
        traj = Trajectory(theta, alpha, step, meta)
        if traj.max_step_change() < bound:
            return traj
    raise ValueError("could not generate a trajectory within the smoothness bound")


def generate_trajectories(config: GeneratorConfig, count: int, seed: int) -> list[Trajectory]:
    """``count`` trajectories, each from its own spawned stream of ``seed``."""
    streams = np.random.SeedSequence(seed).spawn(count)
    out = []
    for i, ss in enumerate(streams):
        traj = generate_trajectory(config, np.random.default_rng(ss))
        traj.meta.update(seed=int(seed), index=i)
        out.append(traj)
    return out
