import hashlib

import numpy as np
import pytest

from beamtrack.channel import GeneratorConfig, generate_trajectories
from beamtrack.dataset import Dataset, read_csv, read_dataset, write_csv, write_dataset


@pytest.fixture(scope="module")
def trajs():
    return generate_trajectories(GeneratorConfig(path_length_m=2.0), 5, seed=7)


def test_roundtrip_is_exact(trajs, tmp_path):
    write_dataset(tmp_path / "d.bin", Dataset(trajs, 3, 7, {"count": 5}))
    ds = read_dataset(tmp_path / "d.bin")
    assert (len(ds.train), len(ds.test), ds.seed, ds.config) == (3, 2, 7, {"count": 5})
    for a, b in zip(trajs, ds.trajectories):
        assert a.theta.tobytes() == b.theta.tobytes()
        assert a.alpha.tobytes() == b.alpha.tobytes()
        assert a.meta == b.meta and a.step_length_m == b.step_length_m


def test_same_seed_same_checksum(tmp_path):
    digests = []
    for k in range(2):
        t = generate_trajectories(GeneratorConfig(path_length_m=2.0), 4, seed=3)
        write_dataset(tmp_path / f"{k}.bin", Dataset(t, 2, 3))
        digests.append(hashlib.sha256((tmp_path / f"{k}.bin").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_single_record(trajs, tmp_path):
    write_dataset(tmp_path / "one.bin", Dataset(trajs[:1], 1))
    assert len(read_dataset(tmp_path / "one.bin")) == 1


def test_rejects_bad_files(trajs, tmp_path):
    (tmp_path / "x.bin").write_bytes(b"JUNKJUNK")
    with pytest.raises(ValueError, match="not a trajectory"):
        read_dataset(tmp_path / "x.bin")
    write_dataset(tmp_path / "d.bin", Dataset(trajs, 3))
    with open(tmp_path / "d.bin", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(ValueError, match="trailing"):
        read_dataset(tmp_path / "d.bin")


def test_csv_roundtrip(trajs, tmp_path):
    write_csv(tmp_path / "t.csv", trajs)
    back = read_csv(tmp_path / "t.csv")
    assert len(back) == len(trajs)
    for a, b in zip(trajs, back):
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.alpha, b.alpha)
