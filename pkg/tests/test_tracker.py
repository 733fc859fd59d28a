import math

import numpy as np
import pytest

from beamtrack.channel import (ArrayGeometry, GeneratorConfig, ObservationParams, Trajectory,
                               angle_diff, beam_gains, generate_trajectories)
from beamtrack.nn import LstmState, cosine_loss
from beamtrack.tracker import (PARAM_ORDER, MlTracker, Network, NetworkArch, TrainConfig,
                               TrainedModel, initial_runtime_state, load_model,
                               make_training_sequence, save_model, sequence_loss, track_step,
                               train)

NOISELESS = ObservationParams(ArrayGeometry(8), 0.0)


def ramp(n=30, start=0.5, slope=0.01):
    theta = start + slope * np.arange(n)
    alpha = np.exp(1j * 0.1 * np.arange(n))
    return Trajectory(theta, alpha)


def zero_model(angle_output):
    arch = NetworkArch(angle_output=angle_output)
    net = Network(arch)
    net.set_params([np.zeros_like(p) for p in net.params])
    return TrainedModel(arch, net)


def network_loss_and_grads(net, feats, labels, mask, w_alpha):
    out, cache = net.forward(feats)
    ang, alp, dout = sequence_loss(out, labels, mask, w_alpha)
    return ang + w_alpha * alp, net.backward(cache, dout)


def test_network_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    arch = NetworkArch(3, 4, 5, 3, 3)
    net = Network(arch, rng)
    feats = rng.normal(size=(6, 2, 3))
    labels = rng.normal(size=(6, 2, 3))
    mask = np.ones((6, 2))
    mask[4:, 1] = 0.0
    _, grads = network_loss_and_grads(net, feats, labels, mask, 0.1)
    h = 1e-5
    for name, p, g in zip(PARAM_ORDER, net.params, grads):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp, _ = network_loss_and_grads(net, feats, labels, mask, 0.1)
            p[idx] = old - h
            fm, _ = network_loss_and_grads(net, feats, labels, mask, 0.1)
            p[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        err = np.abs(num - g) / np.maximum(np.maximum(np.abs(num), np.abs(g)), 1e-6)
        assert err.max() < 1e-4, name


class TestTrainingSequence:
    def test_noiseless_degenerate(self):
        t = ramp()
        f, lab = make_training_sequence(t, TrainConfig(sigma_psi_deg=0.0), NOISELESS,
                                        np.random.default_rng(0))
        y = t.alpha[1:] * beam_gains(t.theta[1:], t.theta[:-1], NOISELESS.geometry)
        np.testing.assert_array_equal(f[:, 0], y.real)
        np.testing.assert_array_equal(f[:, 1], y.imag)

    def test_count_and_alignment(self):
        t = ramp(40)
        f, lab = make_training_sequence(t, TrainConfig(sigma_psi_deg=0.0), NOISELESS,
                                        np.random.default_rng(0))
        assert len(f) == len(lab) == 39
        # feature row k carries theta[k], label row k is theta[k+1]
        np.testing.assert_allclose(f[:, 2], t.theta[:-1])
        np.testing.assert_allclose(lab[:, 0], t.theta[1:])
        np.testing.assert_allclose(lab[:, 1] + 1j * lab[:, 2], t.alpha[1:])

    def test_label_noise_std(self):
        n = 100_001
        t = Trajectory(np.full(n, 0.05), np.ones(n))
        f, _ = make_training_sequence(t, TrainConfig(sigma_psi_deg=5.0), NOISELESS,
                                      np.random.default_rng(1))
        d = angle_diff(f[:, 2], 0.05)
        assert math.degrees(np.std(d)) == pytest.approx(5.0, rel=0.02)
        assert np.all((f[:, 2] >= 0) & (f[:, 2] < 2 * math.pi))


class TestInference:
    def test_dead_network_absolute(self):
        m = zero_model("absolute")
        _, theta, alpha = track_step(m, initial_runtime_state(m), 0.3 + 2j, 1.7)
        assert theta == 0.0 and alpha == 0

    def test_dead_network_relative_holds_input(self):
        m = zero_model("relative")
        _, theta, _ = track_step(m, initial_runtime_state(m), 0.3 + 2j, 1.7)
        assert theta == 1.7

    def test_pure_function(self):
        m = TrainedModel(NetworkArch(), Network(NetworkArch(), np.random.default_rng(2)))
        s0 = LstmState(np.full(40, 0.1), np.full(40, -0.2))
        a = track_step(m, s0, 0.5 - 0.5j, 2.0)
        b = track_step(m, s0, 0.5 - 0.5j, 2.0)
        assert a[1] == b[1] and a[2] == b[2]
        np.testing.assert_array_equal(a[0].h, b[0].h)
        np.testing.assert_array_equal(s0.h, 0.1)

    def test_output_wrapped(self):
        rng = np.random.default_rng(3)
        m = TrainedModel(NetworkArch(), Network(NetworkArch(), rng))
        m.network.head.b[0] = 40.0
        st = initial_runtime_state(m)
        for _ in range(20):
            st, theta, _ = track_step(m, st, complex(*rng.normal(size=2)), rng.uniform(0, 7))
            assert 0.0 <= theta < 2 * math.pi

    def test_bad_angle_output(self):
        with pytest.raises(ValueError):
            NetworkArch(angle_output="degrees")


class TestTraining:
    @pytest.fixture(scope="class")
    @staticmethod
    def small_set():
        return generate_trajectories(GeneratorConfig(path_length_m=5.0), 40, seed=3)

    def test_constant_theta_noiseless(self):
        rng = np.random.default_rng(4)
        trajs = [Trajectory(np.full(21, rng.uniform(0, 2 * math.pi)),
                            np.exp(1j * rng.uniform(0, 6, 21))) for _ in range(50)]
        cfg = TrainConfig(sigma_psi_deg=0.0, train_snr_db=math.inf, epochs=50, seed=1)
        m = train(trajs, cfg)
        assert m.meta["loss_curve"][-1][1] < 1e-3

    def test_single_epoch_is_finite(self, small_set):
        m = train(small_set, TrainConfig(epochs=1))
        assert np.all(np.isfinite(m.network.flat()))
        assert math.isfinite(m.meta["loss_curve"][0][1])

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], TrainConfig(epochs=1))

    def test_deterministic(self, small_set, tmp_path):
        cfg = TrainConfig(epochs=2, seed=9)
        save_model(tmp_path / "a.bin", train(small_set, cfg))
        save_model(tmp_path / "b.bin", train(small_set, cfg))
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_parallel_workers_close_to_serial(self, small_set):
        a = train(small_set, TrainConfig(epochs=2, seed=9))
        b = train(small_set, TrainConfig(epochs=2, seed=9, workers=3))
        np.testing.assert_allclose(a.network.flat(), b.network.flat(), atol=1e-9)

    def test_loss_curve_decreases(self):
        trajs = generate_trajectories(GeneratorConfig(), 200, seed=3)
        m = train(trajs, TrainConfig(epochs=30, seed=2, patience=100))
        losses = np.array([a + 0.1 * b for _, a, b in m.meta["loss_curve"]])
        assert losses[-1] < losses[0] / 2
        assert np.all(losses[1:] <= 1.05 * losses[:-1])

    def test_trained_beats_untrained(self):
        cfg = GeneratorConfig(path_length_m=5.0, offset_std_deg=0.5)
        trajs = generate_trajectories(cfg, 60, seed=5)
        tc = TrainConfig(epochs=40, lr=3e-3, train_snr_db=20.0, sigma_psi_deg=2.0, seed=3)
        trained = train(trajs[:50], tc)
        untrained = train(trajs[:50], TrainConfig(epochs=1, lr=1e-12, seed=3))

        def closed_loop_loss(model):
            losses = []
            for t in trajs[50:]:
                state, prev = initial_runtime_state(model), t.theta[0]
                for n in range(1, len(t)):
                    y = t.alpha[n] * beam_gains(t.theta[n], prev, ArrayGeometry(8))
                    state, prev, _ = track_step(model, state, complex(y), prev)
                    losses.append(cosine_loss(t.theta[n] - prev))
            return np.mean(losses)

        assert closed_loop_loss(trained) * 10 <= closed_loop_loss(untrained)


class TestWeightsFile:
    def test_roundtrip(self, tmp_path):
        m = TrainedModel(NetworkArch(), Network(NetworkArch(), np.random.default_rng(0)),
                         {"train_config": {"seed": 4}})
        save_model(tmp_path / "w.bin", m)
        m2 = load_model(tmp_path / "w.bin")
        assert m2.arch == m.arch
        np.testing.assert_array_equal(m2.network.flat(), m.network.flat())

    def test_layout_is_canonical(self, tmp_path):
        m = TrainedModel(NetworkArch(), Network(NetworkArch(), np.random.default_rng(0)))
        save_model(tmp_path / "w.bin", m)
        raw = (tmp_path / "w.bin").read_bytes()
        hlen = int.from_bytes(raw[4:8], "little")
        blob = np.frombuffer(raw[8 + hlen:], dtype="<f8")
        np.testing.assert_array_equal(blob[: 20 * 3], m.network.fc1.w.ravel())
        assert len(blob) == sum(p.size for p in m.network.params)

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_model(tmp_path / "x.bin")


def test_ml_tracker_keeps_memory_on_reacquire():
    m = TrainedModel(NetworkArch(), Network(NetworkArch(), np.random.default_rng(1)))
    tr = MlTracker(m)
    tr.begin(1.0, 1 + 0j)
    tr.step(0.5 + 0.5j, 1.0)
    h = tr.state.h.copy()
    tr.reacquire(2.0, 1 + 0j)
    np.testing.assert_array_equal(tr.state.h, h)
