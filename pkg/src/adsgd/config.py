"""Experiment configuration: JSON file <-> validated ``ExperimentSpec``."""
from __future__ import annotations

import itertools
import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .channel import PowerConfig
from .compute import GradientOracle, StragglerModel, make_task, LossTask
from .engine import ChannelConfig, RunConfig
from .topology import BaseTopology, LinkFailureModel


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class TopologySection(_Section):
    kind: Literal["complete-mesh", "ring", "torus-2d"] = "ring"
    node_count: int = Field(9, ge=1)
    failure: Literal["always-on", "gain-threshold", "delay-tolerance"] = "always-on"
    h_min: float = Field(0.0, ge=0)
    delay_tolerance: float = Field(1.0, ge=0)
    link_time_rate: float = Field(1.0, gt=0)

    def base(self) -> BaseTopology:
        return BaseTopology(self.kind, self.node_count)

    def failure_model(self) -> LinkFailureModel:
        return LinkFailureModel(self.failure, self.h_min, self.delay_tolerance, self.link_time_rate)


class ChannelSection(_Section):
    noise_std: float = Field(0.0, ge=0)
    max_power: float = Field(1.0, gt=0)
    alignment_mode: Literal["fixed-gamma", "power-constrained"] = "fixed-gamma"
    gamma: float = Field(1.0, gt=0)
    alpha: float = Field(1.0, gt=0)
    schedule_mode: Literal["sequential", "coloring"] = "sequential"
    inversion_floor: float = Field(1e-3, ge=0)
    slot_time: float = Field(0.0, ge=0)

    def channel_config(self) -> ChannelConfig:
        power = PowerConfig(self.max_power, self.alignment_mode, self.gamma, self.alpha)
        return ChannelConfig(self.noise_std, power, self.schedule_mode, self.inversion_floor, self.slot_time)


class ComputeSection(_Section):
    task: Literal["quadratic", "logistic", "tiny-mlp"] = "quadratic"
    dimension: int = Field(10, ge=2)
    data_seed: int = 0
    # quadratic
    curvature_min: float = Field(0.1, ge=0)
    curvature_max: float = Field(1.0, gt=0)
    heterogeneity: float = Field(1.0, ge=0)
    # logistic / tiny-mlp
    samples_per_device: int = Field(200, ge=1)
    separation: float = Field(1.0, ge=0)
    label_skew: float = Field(0.8, ge=0, le=1)
    anisotropy: float = Field(1.0, ge=1)
    test_size: int = Field(500, ge=1)
    l2: float = Field(1e-3, ge=0)
    hidden: int = Field(8, ge=1)
    # oracle
    batch_size: Optional[int] = Field(16, ge=1)
    noise_std: float = Field(0.0, ge=0)
    noise_kind: Literal["gaussian", "sphere"] = "gaussian"
    clip: Optional[float] = Field(None, gt=0)
    # stragglers
    rho: Union[float, list[float]] = 0.0
    straggler_mode: Literal["bernoulli", "timing-derived"] = "bernoulli"
    t_min: float = Field(0.25, ge=0)
    mu: float = Field(1.0, gt=0)

    @field_validator("rho")
    @classmethod
    def _rho_range(cls, v):
        vals = v if isinstance(v, list) else [v]
        if any(not 0 <= r < 1 for r in vals):
            raise ValueError("straggle probabilities must lie in [0, 1)")
        return v

    def build_task(self, m: int) -> LossTask:
        return make_task(
            self.task, m, self.dimension, self.data_seed,
            curvature=(self.curvature_min, self.curvature_max), heterogeneity=self.heterogeneity,
            samples_per_device=self.samples_per_device, separation=self.separation,
            label_skew=self.label_skew, anisotropy=self.anisotropy, test_size=self.test_size,
            l2=self.l2, hidden=self.hidden,
        )

    def oracle(self, task: LossTask) -> GradientOracle:
        batch = None if self.task == "quadratic" else self.batch_size
        return GradientOracle(task, batch, self.clip, self.noise_std, self.noise_kind)

    def straggler_model(self, m: int) -> StragglerModel:
        rho = self.rho if isinstance(self.rho, list) else [self.rho] * m
        if len(rho) != m:
            raise ConfigError(f"compute.rho has {len(rho)} entries for {m} devices")
        return StragglerModel(tuple(rho), self.t_min, self.mu, self.straggler_mode)


class EngineSection(_Section):
    iterations: int = Field(200, ge=0)
    zeta: Union[float, Literal["theorem"]] = 0.5
    eta: Union[float, list[float], Literal["theorem"]] = 0.05
    scheduler: Literal["async", "sync", "sync-barrier"] = "async"
    t_max: Optional[float] = Field(None, gt=0)
    round_period: float = Field(1.0, gt=0)
    init: Literal["zeros", "random", "random-shared"] = "zeros"
    init_scale: float = Field(1.0, ge=0)
    wall_budget: Optional[float] = Field(None, gt=0)

    @field_validator("zeta")
    @classmethod
    def _zeta_range(cls, v):
        if v != "theorem" and not 0 < v <= 1:
            raise ValueError("zeta must lie in (0, 1]")
        return v

    def run_config(self, seed: int, keep_trace: bool = False) -> RunConfig:
        eta = self.eta if not isinstance(self.eta, list) else tuple(self.eta)
        return RunConfig(
            self.iterations, self.zeta, eta, self.scheduler, self.t_max, self.round_period,
            self.init, self.init_scale, seed, keep_trace, self.wall_budget,
        )


class AnalysisSection(_Section):
    gap_samples: int = Field(2000, ge=1)
    consensus_samples: int = Field(2000, ge=1)
    probe_count: int = Field(16, ge=1)
    oracle_samples: int = Field(2000, ge=1)
    bounds: bool = False
    target_quantile: float = Field(0.6, ge=0, le=1)
    # sweep-point override selecting, per seed, the run whose accuracy trace fixes the target
    target_reference: Optional[dict[str, Any]] = None


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    kind: Literal["train", "spectral-gap"] = "train"
    topology: TopologySection = Field(default_factory=TopologySection)
    channel: ChannelSection = Field(default_factory=ChannelSection)
    compute: ComputeSection = Field(default_factory=ComputeSection)
    engine: EngineSection = Field(default_factory=EngineSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)
    sweep: dict[str, list[Any]] = Field(default_factory=dict)
    seeds: list[int] = Field(default_factory=lambda: [0])
    output: Optional[str] = None

    @model_validator(mode="after")
    def _sweep_keys_exist(self):
        for key in self.sweep:
            section, _, fld = key.partition(".")
            sec = getattr(self, section, None) if section in _SECTIONS else None
            if sec is None or fld not in type(sec).model_fields:
                raise ValueError(f"sweep key {key!r} does not address a config field (use 'section.field')")
            if not self.sweep[key]:
                raise ValueError(f"sweep key {key!r} has an empty value list")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        for key, val in (self.analysis.target_reference or {}).items():
            if key not in self.sweep or val not in self.sweep[key]:
                raise ValueError(f"analysis.target_reference {key}={val!r} is not a point of the sweep")
        return self

    def grid(self) -> list[dict[str, Any]]:
        """Cross product of the sweep values, one dict per point (sorted keys)."""
        keys = sorted(self.sweep)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(self.sweep[k] for k in keys))]

    def run_count(self) -> int:
        return len(self.grid()) * len(self.seeds)

    def at(self, point: dict[str, Any]) -> "ExperimentSpec":
        """Copy with the sweep point applied and the sweep (and its target reference) cleared."""
        data = self.model_dump()
        for key, val in point.items():
            section, _, fld = key.partition(".")
            data[section][fld] = val
        data["sweep"] = {}
        data["analysis"]["target_reference"] = None
        return ExperimentSpec.model_validate(data)


_SECTIONS = ("topology", "channel", "compute", "engine", "analysis")


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {path}: {err['msg']}")
    return "\n".join(lines)


def parse_config(source: str | Path | dict) -> ExperimentSpec:
    """Load and validate an experiment config (path to JSON, JSON text or dict)."""
    if isinstance(source, dict):
        data = source
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config:\n{_format_errors(exc)}") from exc


def write_config(spec: ExperimentSpec, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(spec.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path
