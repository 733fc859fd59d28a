"""Recurrent AoA tracker: FC-20 -> LSTM-40 -> FC-20 -> linear head.

Inputs per step are ``[Re(y), Im(y), theta_prev]``; outputs are
``[theta_hat, alpha_hat_re, alpha_hat_im]``. Training uses the noisy-true
previous angle as beam direction and feedback input.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import ArrayGeometry, ObservationParams, beam_gains, complex_noise, wrap_angle
from .nn import (AdamState, DenseLayer, LstmCell, LstmState, adam_step, clip_by_global_norm,
                 cosine_loss, cosine_loss_grad, dense_backward, dense_forward, lstm_backward,
                 lstm_forward, lstm_step)

WEIGHTS_MAGIC = b"BTNN"
WEIGHTS_SCHEMA = 1
PARAM_ORDER = ("fc1.w", "fc1.b", "lstm.w", "lstm.b", "fc2.w", "fc2.b", "head.w", "head.b")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class NetworkArch:
    input_dim: int = 3
    fc1_units: int = 20
    lstm_units: int = 40
    fc2_units: int = 20
    output_dim: int = 3
    # "relative": the head's angle output is added to the angle input
    angle_output: str = "relative"

    def __post_init__(self):
        if self.angle_output not in ("relative", "absolute"):
            raise ValueError(f"unknown angle_output {self.angle_output!r}")


@dataclass
class TrainConfig:
    sigma_psi_deg: float = 5.0
    train_snr_db: float = 7.0
    n_r: int = 8
    d_over_lambda: float = 0.5
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    alpha_weight: float = 0.1
    patience: int = 10
    min_rel_improvement: float = 1e-4
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.sigma_psi_deg < 0:
            raise ValueError("sigma_psi_deg must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Network:
    def __init__(self, arch: NetworkArch, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.arch = arch
        self.fc1 = DenseLayer.init(arch.input_dim, arch.fc1_units, rng)
        self.lstm = LstmCell.init(arch.fc1_units, arch.lstm_units, rng)
        self.fc2 = DenseLayer.init(arch.lstm_units, arch.fc2_units, rng)
        self.head = DenseLayer.init(arch.fc2_units, arch.output_dim, rng)

    @property
    def params(self) -> list:
        return self.fc1.params + self.lstm.params + self.fc2.params + self.head.params

    def set_params(self, params) -> None:
        shapes = [p.shape for p in self.params]
        if [np.shape(p) for p in params] != shapes:
            raise ValueError("parameter shapes do not match the architecture")
        (self.fc1.w, self.fc1.b, self.lstm.w, self.lstm.b,
         self.fc2.w, self.fc2.b, self.head.w, self.head.b) = [np.asarray(p, float) for p in params]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def load_flat(self, vec) -> None:
        out, off = [], 0
        for p in self.params:
            out.append(np.asarray(vec[off: off + p.size], dtype=float).reshape(p.shape))
            off += p.size
        if off != len(vec):
            raise ValueError(f"expected {off} parameters, got {len(vec)}")
        self.set_params(out)

    def step(self, state: LstmState, x):
        a1 = dense_forward(self.fc1, x)
        state, h = lstm_step(self.lstm, state, a1)
        out = dense_forward(self.head, dense_forward(self.fc2, h))
        if self.arch.angle_output == "relative":
            out[..., 0] += x[..., 2]
        return state, out

    def forward(self, xs, state0=None):
        """Sequence forward over ``xs`` of shape ``(T, B, input_dim)``."""
        a1 = dense_forward(self.fc1, xs)
        hs, lcache = lstm_forward(self.lstm, a1, state0)
        a2 = dense_forward(self.fc2, hs)
        out = dense_forward(self.head, a2)
        if self.arch.angle_output == "relative":
            out[..., 0] += xs[..., 2]
        return out, (xs, a1, hs, lcache, a2)

    def backward(self, cache, dout) -> list:
        xs, a1, hs, lcache, a2 = cache
        da2, dw4, db4 = dense_backward(self.head, a2, dout)
        dhs, dw3, db3 = dense_backward(self.fc2, hs, da2)
        da1, dw2, db2, _ = lstm_backward(self.lstm, lcache, dhs)
        _, dw1, db1 = dense_backward(self.fc1, xs, da1)
        return [dw1, db1, dw2, db2, dw3, db3, dw4, db4]


@dataclass
class TrainedModel:
    arch: NetworkArch
    network: Network
    meta: dict = field(default_factory=dict)


# -- features ---------------------------------------------------------------

def make_training_sequence(trajectory, config: TrainConfig, obs: ObservationParams,
                           rng: np.random.Generator):
    """Features ``[Re y, Im y, theta_trn[n-1]]`` and labels ``[theta, a_re, a_im]`` for n >= 1.

    The beam is pointed at the perturbed previous angle
    ``theta[n-1] + psi``, psi ~ N(0, sigma_psi^2) drawn independently per step.
    """
    theta, alpha = trajectory.theta, trajectory.alpha
    n = len(theta) - 1
    psi = rng.normal(0.0, math.radians(config.sigma_psi_deg), size=n)
    theta_trn = wrap_angle(theta[:-1] + psi)
    y = alpha[1:] * beam_gains(theta[1:], theta_trn, obs.geometry)
    if obs.noise_std > 0:
        y = y + complex_noise(obs.noise_std, rng, size=n)
    features = np.column_stack([y.real, y.imag, theta_trn])
    labels = np.column_stack([theta[1:], alpha[1:].real, alpha[1:].imag])
    return features, labels


def sequence_loss(out, labels, mask, alpha_weight):
    """Summed losses and output gradient (not yet divided by the step count)."""
    delta = labels[..., 0] - out[..., 0]
    ang = cosine_loss(delta) * mask
    da = (out[..., 1:] - labels[..., 1:]) * mask[..., None]
    alp = np.sum(da * da, axis=-1)
    dout = np.empty_like(out)
    dout[..., 0] = cosine_loss_grad(delta) * mask
    dout[..., 1:] = 2.0 * alpha_weight * da
    return float(ang.sum()), float(alp.sum()), dout


def _stack(seqs):
    t_len = max(len(f) for f, _ in seqs)
    b = len(seqs)
    feats = np.zeros((t_len, b, seqs[0][0].shape[1]))
    labels = np.zeros((t_len, b, seqs[0][1].shape[1]))
    mask = np.zeros((t_len, b))
    for j, (f, lab) in enumerate(seqs):
        feats[: len(f), j] = f
        labels[: len(f), j] = lab
        mask[: len(f), j] = 1.0
    return feats, labels, mask


def _chunk_grads(net, seqs, alpha_weight):
    feats, labels, mask = _stack(seqs)
    out, cache = net.forward(feats)
    ang, alp, dout = sequence_loss(out, labels, mask, alpha_weight)
    return net.backward(cache, dout), ang, alp, float(mask.sum())


def train(trajectories, config: TrainConfig, arch: NetworkArch | None = None,
          log=None) -> TrainedModel:
    """Fit the tracker with Adam on the cosine angle loss plus weighted gain MSE.

    Training noise (label perturbation and observation noise) is redrawn
    every epoch from streams keyed by ``(seed, epoch, trajectory index)``.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empty training set")
    arch = arch or NetworkArch()
    obs = ObservationParams.from_snr(config.train_snr_db, _geometry(config))
    net = Network(arch, np.random.default_rng(np.random.SeedSequence([config.seed, 0])))
    adam = AdamState.init(net.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                          eps=config.eps)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    curve = []
    best, since_best = math.inf, 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = order_rng.permutation(len(trajectories))
            tot_ang = tot_alp = tot_n = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start: start + config.batch_size]
                seqs = [make_training_sequence(
                    trajectories[i], config, obs,
                    np.random.default_rng(np.random.SeedSequence([config.seed, 2, epoch, int(i)])))
                    for i in idx]
                if pool is None:
                    parts = [_chunk_grads(net, seqs, config.alpha_weight)]
                else:
                    chunks = [seqs[k::config.workers] for k in range(config.workers)]
                    parts = list(pool.map(lambda c: _chunk_grads(net, c, config.alpha_weight),
                                          [c for c in chunks if c]))
                count = sum(p[3] for p in parts)
                grads = [sum(p[0][k] for p in parts) / count for k in range(len(PARAM_ORDER))]
                grads, _ = clip_by_global_norm(grads, config.clip_norm)
                params, adam = adam_step(net.params, grads, adam)
                net.set_params(params)
                tot_ang += sum(p[1] for p in parts)
                tot_alp += sum(p[2] for p in parts)
                tot_n += count
            ang, alp = tot_ang / tot_n, tot_alp / tot_n
            if not (math.isfinite(ang) and math.isfinite(alp)) or not np.all(np.isfinite(net.flat())):
                raise TrainingDiverged(epoch)
            curve.append((epoch, ang, alp))
            if log is not None:
                log(epoch, ang, alp)
            total = ang + config.alpha_weight * alp
            if total < best * (1.0 - config.min_rel_improvement):
                best, since_best = total, 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    meta = {"train_config": asdict(config), "loss_curve": curve,
            "n_train_sequences": len(trajectories)}
    return TrainedModel(arch, net, meta)


def _geometry(config: TrainConfig):
    return ArrayGeometry(config.n_r, config.d_over_lambda)


# -- inference --------------------------------------------------------------

def initial_runtime_state(model: TrainedModel) -> LstmState:
    return LstmState.zeros(model.arch.lstm_units)


def track_step(model: TrainedModel, runtime_state: LstmState, y: complex, theta_prev: float):
    """One closed-loop step; returns ``(state', theta_hat, alpha_hat)``."""
    x = np.array([y.real, y.imag, theta_prev])
    state, out = model.network.step(runtime_state, x)
    return state, wrap_angle(float(out[0])), complex(out[1], out[2])


class MlTracker:
    """Stateful adapter around :func:`track_step`.

    The LSTM memory survives re-acquisitions; only the angle feedback is
    replaced by the true angle.
    """

    name = "ml"

    def __init__(self, model: TrainedModel):
        self.model = model
        self.state = initial_runtime_state(model)

    def begin(self, theta0, alpha0):
        self.state = initial_runtime_state(self.model)

    def reacquire(self, theta, alpha):
        pass

    def step(self, y, theta_b):
        self.state, theta_hat, _ = track_step(self.model, self.state, y, theta_b)
        return theta_hat


# -- weights file -----------------------------------------------------------

def save_model(path, model: TrainedModel) -> None:
    """Weights file: ``b"BTNN"``, uint32 header length, JSON header, float64 LE blob.

    The blob concatenates parameters in ``PARAM_ORDER``, each row-major.
    """
    shapes = [list(p.shape) for p in model.network.params]
    header = {"schema_version": WEIGHTS_SCHEMA, "arch": asdict(model.arch),
              "param_order": list(PARAM_ORDER), "param_shapes": shapes,
              "seed": model.meta.get("train_config", {}).get("seed"), "meta": model.meta}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(model.network.flat().astype("<f8").tobytes())


def load_model(path) -> TrainedModel:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8: 8 + hlen].decode("utf-8"))
    if header.get("schema_version") != WEIGHTS_SCHEMA:
        raise ValueError(f"{path}: unsupported weights schema")
    arch = NetworkArch(**header["arch"])
    net = Network(arch)
    net.load_flat(np.frombuffer(data, dtype="<f8", offset=8 + hlen))
    if not np.all(np.isfinite(net.flat())):
        raise ValueError(f"{path}: non-finite weights")
    return TrainedModel(arch, net, header["meta"])
