"""Run configuration: one JSON document with a section per stage.

Missing fields take their defaults, unknown fields are rejected. The global
``seed`` drives trajectory generation and network training; evaluation
keeps its own ``eval.eval_seed`` so that episodes see common noise across
trackers and runs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .channel import GeneratorConfig
from .evaluation import FIGURE_AXES, TRACKERS, EvalConfig
from .tracker import NetworkArch, TrainConfig

DEFAULT_GRIDS = {
    "fig3": [-5.0, 0.0, 5.0, 7.0, 10.0, 15.0],
    "fig4": [4, 8, 16, 32],
    "fig5": [1.0, 2.0, 5.0, 10.0],
    "fig6": [0.0, 5.0, 7.0, 10.0, 15.0],
}


@dataclass
class GenerationSection:
    count: int = 2500
    n_train: int = 1750
    scenario: GeneratorConfig = field(default_factory=GeneratorConfig)


@dataclass
class SweepSection:
    figures: list = field(default_factory=lambda: list(DEFAULT_GRIDS))
    grids: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRIDS.items()})
    # fig6 draws one training-SNR curve per test SNR
    fig6_test_snr_db: list = field(default_factory=lambda: [0.0, 10.0])


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    parallel: int = 1
    deterministic: bool = False
    generation: GenerationSection = field(default_factory=GenerationSection)
    network: NetworkArch = field(default_factory=NetworkArch)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=lambda: EvalConfig(trackers=TRACKERS))
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self):
        g = self.generation
        if g.count < 1:
            raise ValueError("generation.count must be >= 1")
        if not 0 <= g.n_train <= g.count:
            raise ValueError("generation.n_train must lie in [0, count]")
        g.scenario.validate()
        if self.parallel < 1:
            raise ValueError("parallel must be >= 1")
        for kind in self.eval.trackers:
            if kind not in TRACKERS:
                raise ValueError(f"unknown tracker {kind!r}")
        for fig in self.sweep.figures:
            if fig not in FIGURE_AXES:
                raise ValueError(f"unknown figure {fig!r}; expected one of {sorted(FIGURE_AXES)}")
            if not self.sweep.grids.get(fig):
                raise ValueError(f"empty grid for {fig}")

    def effective_parallel(self) -> int:
        return 1 if self.deterministic else self.parallel

    def training_config(self) -> TrainConfig:
        workers = 1 if self.deterministic else self.training.workers
        return replace(self.training, seed=self.seed, workers=workers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"]["trackers"] = list(self.eval.trackers)
        return d


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            kw[name] = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list) and name in ("trackers", "start_xy", "anchor_xy"):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    return cls(**kw)


_SECTIONS = {
    (RunConfig, "generation"): GenerationSection,
    (RunConfig, "network"): NetworkArch,
    (RunConfig, "training"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "sweep"): SweepSection,
    (GenerationSection, "scenario"): GeneratorConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    if "eval" not in data:
        data["eval"] = {"trackers": list(TRACKERS)}
    elif "trackers" not in data["eval"]:
        data["eval"] = {**data["eval"], "trackers": list(TRACKERS)}
    sweep = data.get("sweep")
    if isinstance(sweep, dict) and "grids" in sweep:
        data["sweep"] = {**sweep, "grids": {**DEFAULT_GRIDS, **sweep["grids"]}}
    cfg = _build(RunConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path=None, **overrides) -> RunConfig:
    """Read ``path`` (if any) and apply non-None ``overrides`` to top-level fields."""
    data = json.loads(Path(path).read_text()) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(data)


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.resolved.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
