"""Trajectory dataset archive and CSV export.

Archive layout (all integers little-endian)::

    b"BTDS"                      magic
    uint32                       header length in bytes
    header                       UTF-8 JSON: schema_version, seed, config,
                                 step_length_m, n_train, n_test, meta[]
    repeated per trajectory:
        uint32                   number of points N
        float64[N, 3]            (theta_rad, alpha_re, alpha_im) rows

The CSV export has columns ``traj_id, step, theta_rad, alpha_re, alpha_im``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import Trajectory

MAGIC = b"BTDS"
SCHEMA_VERSION = 1


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    n_train: int
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def train(self) -> list[Trajectory]:
        return self.trajectories[: self.n_train]

    @property
    def test(self) -> list[Trajectory]:
        return self.trajectories[self.n_train:]

    def __len__(self):
        return len(self.trajectories)


def write_dataset(path, ds: Dataset) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "seed": ds.seed,
        "config": ds.config,
        "n_train": ds.n_train,
        "n_test": len(ds) - ds.n_train,
        "step_length_m": [t.step_length_m for t in ds.trajectories],
        "meta": [t.meta for t in ds.trajectories],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in ds.trajectories:
            rows = np.column_stack([t.theta, t.alpha.real, t.alpha.imag])
            fh.write(struct.pack("<I", len(rows)))
            fh.write(rows.astype("<f8").tobytes())


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a trajectory dataset archive")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8: 8 + hlen].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {header.get('schema_version')}")
    off = 8 + hlen
    trajectories = []
    for step, meta in zip(header["step_length_m"], header["meta"]):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        rows = np.frombuffer(data, dtype="<f8", count=3 * n, offset=off).reshape(n, 3)
        off += 24 * n
        trajectories.append(Trajectory(rows[:, 0].copy(), rows[:, 1] + 1j * rows[:, 2],
                                       step, meta))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after last record")
    return Dataset(trajectories, header["n_train"], header["seed"], header["config"])


def write_csv(path, trajectories) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "step", "theta_rad", "alpha_re", "alpha_im"])
        for i, t in enumerate(trajectories):
            for n in range(len(t)):
                w.writerow([i, n, repr(float(t.theta[n])), repr(float(t.alpha[n].real)),
                            repr(float(t.alpha[n].imag))])


def read_csv(path, step_length_m: float = 0.1) -> list[Trajectory]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["traj_id"]), []).append(
                (int(r["step"]), float(r["theta_rad"]), float(r["alpha_re"]), float(r["alpha_im"])))
    out = []
    for tid in sorted(rows):
        arr = np.array(sorted(rows[tid]))
        out.append(Trajectory(arr[:, 1], arr[:, 2] + 1j * arr[:, 3], step_length_m, {"index": tid}))
    return out


def write_summary_csv(path, ds: Dataset) -> None:
    """One row per trajectory: split, geometry and AoA range."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "split", "n_points", "start_x", "start_y", "heading_rad",
                    "theta_first_rad", "theta_last_rad", "max_step_change_deg"])
        for i, t in enumerate(ds.trajectories):
            sx, sy = t.meta.get("start_xy", [float("nan")] * 2)
            w.writerow([i, "train" if i < ds.n_train else "test", len(t), repr(sx), repr(sy),
                        repr(t.meta.get("heading", float("nan"))), repr(float(t.theta[0])),
                        repr(float(t.theta[-1])), repr(float(np.degrees(t.max_step_change())))])
