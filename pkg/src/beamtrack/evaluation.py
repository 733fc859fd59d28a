"""Closed-loop test protocol, outage metrics and parameter sweeps.

A tracker exposes ``begin(theta0, alpha0)``, ``step(y, theta_b) -> theta_hat``
and ``reacquire(theta, alpha)``. At every step the beam points at the
previous estimate; once the wrapped error exceeds the outage threshold the
next step is fed the true angle instead.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .channel import ArrayGeometry, ObservationParams, angle_diff, observe
from .ekf import EkfTracker, estimate_params
from .nn import cosine_loss
from .tracker import MlTracker, TrainConfig, TrainedModel, train

AXES = ("test_snr_db", "n_r", "samples_per_meter", "train_snr_db")
TRACKERS = ("ekf", "ml", "oracle")
SWEEP_COLUMNS = ("axis", "value", "tracker", "p0", "e_bar_incl", "e_bar_excl",
                 "n_steps", "n_outages", "seed")
FIGURE_AXES = {"fig3": "test_snr_db", "fig4": "n_r", "fig5": "samples_per_meter",
               "fig6": "train_snr_db"}


def outage_threshold(n_r: int) -> float:
    """Outage threshold in degrees, ``(2/3) * 360 / n_r`` capped at 180."""
    if n_r < 1:
        raise ValueError("n_r must be >= 1")
    return min(2.0 / 3.0 * 360.0 / n_r, 180.0)


class OracleTracker:
    """Returns the true angle; an upper bound on tracking quality."""

    name = "oracle"

    def __init__(self, trajectory):
        self.theta = trajectory.theta
        self.n = 0

    def begin(self, theta0, alpha0):
        self.n = 0

    def reacquire(self, theta, alpha):
        pass

    def step(self, y, theta_b):
        self.n += 1
        return float(self.theta[self.n])


@dataclass
class EpisodeResult:
    """Per-step records of one test trajectory, indexed n = 1..N-1."""

    trajectory_id: int
    n: np.ndarray
    theta_true: np.ndarray
    theta_hat: np.ndarray
    error: np.ndarray          # wrapped absolute error, radians in [0, pi]
    in_outage: np.ndarray
    reset: np.ndarray
    feedback: np.ndarray       # beam direction / angle input used at step n

    @property
    def n_steps(self):
        return len(self.n)

    @property
    def n_outages(self):
        return int(self.in_outage.sum())


def run_episode(tracker, trajectory, obs: ObservationParams, theta_th_deg: float,
                rng: np.random.Generator, trajectory_id: int = 0) -> EpisodeResult:
    th = math.radians(theta_th_deg)
    n_pts = len(trajectory)
    theta = trajectory.theta
    est = np.empty(n_pts - 1)
    fb = np.empty(n_pts - 1)
    tracker.begin(float(theta[0]), complex(trajectory.alpha[0]))
    prev = float(theta[0])
    for n in range(1, n_pts):
        fb[n - 1] = prev
        y = observe(trajectory[n], prev, obs, rng)
        est[n - 1] = tracker.step(y, prev)
        err = abs(angle_diff(theta[n], est[n - 1]))
        if err > th:
            tracker.reacquire(float(theta[n]), complex(trajectory.alpha[n]))
            prev = float(theta[n])
        else:
            prev = float(est[n - 1])
    err = np.abs(angle_diff(theta[1:], est))
    outage = err > th
    return EpisodeResult(trajectory_id, np.arange(1, n_pts), theta[1:].copy(), est, err,
                         outage, outage.copy(), fb)


def outage_probability(results) -> float:
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    steps = sum(r.n_steps for r in results)
    return sum(r.n_outages for r in results) / steps


def average_error(results, include_outage: bool = True) -> float:
    """Pooled mean cosine loss; NaN when every step is excluded."""
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    total = count = 0.0
    for r in results:
        loss = cosine_loss(r.error)
        keep = np.ones_like(r.in_outage) if include_outage else ~r.in_outage
        total += float(np.sum(loss[keep]))
        count += int(np.sum(keep))
    return total / count if count else float("nan")


# -- sweeps -----------------------------------------------------------------

@dataclass
class EvalConfig:
    n_r: int = 8
    d_over_lambda: float = 0.5
    test_snr_db: float = 10.0
    train_snr_db: float = 7.0
    samples_per_meter: float = 10.0
    eval_seed: int = 1234
    trackers: tuple = ("ekf", "ml")

    def geometry(self):
        return ArrayGeometry(self.n_r, self.d_over_lambda)

    def observation(self):
        return ObservationParams.from_snr(self.test_snr_db, self.geometry())


@dataclass
class SweepResult:
    axis: str
    value: float
    tracker: str
    p0: float
    e_bar_incl: float
    e_bar_excl: float
    n_steps: int
    n_outages: int
    n_episodes: int
    seed: int
    config: dict = field(default_factory=dict)

    def row(self):
        return {k: getattr(self, k) for k in SWEEP_COLUMNS}


class ModelStore:
    """Trains (or reuses) ML models keyed by the observation setup they need."""

    def __init__(self, train_set, base: TrainConfig, models=None, log=None):
        self.train_set = list(train_set)
        self.base = base
        self.models = dict(models or {})
        self.log = log

    @staticmethod
    def key(n_r, d_over_lambda, train_snr_db):
        return (int(n_r), float(d_over_lambda), float(train_snr_db))

    def add(self, model: TrainedModel):
        tc = model.meta.get("train_config", {})
        k = self.key(tc.get("n_r", 8), tc.get("d_over_lambda", 0.5), tc.get("train_snr_db", 7.0))
        self.models[k] = model

    def get(self, n_r, d_over_lambda, train_snr_db) -> TrainedModel:
        k = self.key(n_r, d_over_lambda, train_snr_db)
        if k not in self.models:
            cfg = replace(self.base, n_r=k[0], d_over_lambda=k[1], train_snr_db=k[2])
            if self.log:
                self.log(f"training ML model for n_r={k[0]}, train SNR {k[2]} dB")
            self.models[k] = train(self.train_set, cfg)
        return self.models[k]


def decimation_factor(samples_per_meter: float, step_length_m: float) -> int:
    factor = 1.0 / (samples_per_meter * step_length_m)
    k = round(factor)
    if k < 1 or abs(factor - k) > 1e-6:
        raise ValueError(f"{samples_per_meter} samples/m is not a decimation of "
                         f"{step_length_m} m sampling")
    return int(k)


def _episode_job(args):
    kind, payload, traj, obs, th, seed, tid = args
    if kind == "ekf":
        tracker = EkfTracker(payload, obs.geometry)
    elif kind == "ml":
        tracker = MlTracker(payload)
    else:
        tracker = OracleTracker(traj)
    rng = np.random.default_rng(np.random.SeedSequence([seed, tid]))
    return run_episode(tracker, traj, obs, th, rng, tid)


def evaluate(cfg: EvalConfig, test_set, train_set, store: ModelStore | None = None,
             parallel: int = 1) -> dict[str, list[EpisodeResult]]:
    """Run every requested tracker over the test set at one operating point."""
    for kind in cfg.trackers:
        if kind not in TRACKERS:
            raise ValueError(f"unknown tracker {kind!r}")
    step = test_set[0].step_length_m
    k = decimation_factor(cfg.samples_per_meter, step)
    tests = [t.decimate(k) for t in test_set] if k > 1 else list(test_set)
    obs = cfg.observation()
    th = outage_threshold(cfg.n_r)
    out = {}
    for kind in cfg.trackers:
        payload = None
        if kind == "ekf":
            trains = [t.decimate(k) for t in train_set] if k > 1 else train_set
            payload = estimate_params(trains, obs.noise_std)
        elif kind == "ml":
            if store is None:
                raise ValueError("the ML tracker needs a model store")
            payload = store.get(cfg.n_r, cfg.d_over_lambda, cfg.train_snr_db)
        jobs = [(kind, payload, t, obs, th, cfg.eval_seed, i) for i, t in enumerate(tests)]
        if parallel > 1:
            with ProcessPoolExecutor(parallel) as ex:
                out[kind] = list(ex.map(_episode_job, jobs, chunksize=8))
        else:
            out[kind] = [_episode_job(j) for j in jobs]
    return out


def summarize(axis, value, kind, results, cfg: EvalConfig) -> SweepResult:
    return SweepResult(axis, value, kind, outage_probability(results),
                       average_error(results, True), average_error(results, False),
                       sum(r.n_steps for r in results), sum(r.n_outages for r in results),
                       len(results), cfg.eval_seed, asdict(cfg))


def sweep(axis: str, values, base: EvalConfig, test_set, train_set,
          store: ModelStore | None = None, parallel: int = 1, log=None) -> list[SweepResult]:
    """Evaluate each tracker at every value of one axis.

    The n_r and train_snr_db axes use an ML model trained for that setup.
    """
    if axis not in AXES:
        raise ValueError(f"invalid sweep axis {axis!r}; expected one of {AXES}")
    out = []
    for v in values:
        v = int(v) if axis == "n_r" else float(v)
        cfg = replace(base, **{axis: v})
        if log:
            log(f"{axis} = {v}")
        res = evaluate(cfg, test_set, train_set, store, parallel)
        out.extend(summarize(axis, v, kind, res[kind], cfg) for kind in cfg.trackers)
    return out


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def write_sweep_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in results:
            w.writerow({k: _fmt(v) for k, v in r.row().items()})


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_episode_csv(path, results, tracker: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tracker", "traj_id", "n", "theta_true", "theta_hat", "abs_error",
                    "in_outage", "reset", "feedback"])
        for r in results:
            for j in range(r.n_steps):
                w.writerow([tracker, r.trajectory_id, int(r.n[j]), repr(float(r.theta_true[j])),
                            repr(float(r.theta_hat[j])), repr(float(r.error[j])),
                            int(r.in_outage[j]), int(r.reset[j]), repr(float(r.feedback[j]))])


def write_figure_csv(path, figure: str, results) -> None:
    """Plot data for one figure: panel (a) is P0, panel (b) the two E_bar variants.

    ``fig6`` rows additionally carry the test SNR, since that figure draws one
    curve per test SNR over the training-SNR axis.
    """
    cols = ["figure", "x_axis", "x", "tracker", "p0", "e_bar_incl", "e_bar_excl"]
    if figure == "fig6":
        cols.insert(4, "test_snr_db")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in results:
            row = [figure, r.axis, _fmt(r.value), r.tracker, repr(r.p0), repr(r.e_bar_incl),
                   repr(r.e_bar_excl)]
            if figure == "fig6":
                row.insert(4, repr(float(r.config["test_snr_db"])))
            w.writerow(row)
