"""Experiment configuration: frozen dataclasses, strict JSON loading, stable hashing.

Unknown keys and wrongly typed values are rejected, since a silently ignored
ablation flag would invalidate an experiment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    """Per-stage settings of one view backbone."""

    dims: tuple = (32, 48, 64)
    depths: tuple = (1, 1, 1)
    groups: tuple = (2, 2, 4)

    @property
    def n_stages(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    patch: int = 8
    main: StreamConfig = StreamConfig()
    side: StreamConfig = StreamConfig(dims=(16, 24, 32), depths=(1, 1, 1), groups=(1, 2, 2))
    n_side_views: int = 1
    backbone_mlp_ratio: int = 2
    fusion: bool = True
    # per-stage fusion switches; empty means every stage
    fusion_stages: tuple = ()
    fusion_heads: int = 2
    decoder_dim: int = 64
    decoder_depth: int = 8
    decoder_heads: int = 4
    decoder_mlp_ratio: int = 2
    readout: str = "learnable_vector"
    pred_init_std: float = 0.02
    residuals: bool = True
    n_waypoints: int = 4
    control_hidden: int = 64
    latent_dim: int = 8
    n_commands: int = 6
    speed_scale: float = 10.0
    point_scale: float = 10.0
    detach_estimator_inputs: bool = False

    @property
    def n_stages(self) -> int:
        return self.main.n_stages

    def stage_grid(self, stage: int) -> int:
        """Token grid side length at ``stage``."""
        return self.image_size // self.patch // (2 ** stage)

    def stage_tokens(self, stage: int) -> int:
        return self.stage_grid(stage) ** 2

    @property
    def n_pred(self) -> int:
        return 2 if self.readout == "learnable_vector" else 0

    def fuse_at(self, stage: int) -> bool:
        if not self.fusion:
            return False
        return bool(self.fusion_stages[stage]) if self.fusion_stages else True

    def validate(self) -> "ModelConfig":
        m, s = self.main, self.side
        if m.n_stages != s.n_stages or m.n_stages < 1:
            raise ConfigError("main and side backbones need the same positive stage count")
        for sc, tag in ((m, "main"), (s, "side")):
            if not (len(sc.dims) == len(sc.depths) == len(sc.groups)):
                raise ConfigError(f"{tag}: dims/depths/groups lengths differ")
            for d, g in zip(sc.dims, sc.groups):
                if g < 1 or d % g:
                    raise ConfigError(f"{tag}: dim {d} not divisible by group count {g}")
                if d % self.fusion_heads:
                    raise ConfigError(f"{tag}: dim {d} not divisible by fusion_heads {self.fusion_heads}")
            if any(x < 0 for x in sc.depths):
                raise ConfigError(f"{tag}: negative depth")
        for dm, ds in zip(m.dims, s.dims):
            if dm < ds:
                raise ConfigError("main-view dims must be >= side-view dims")
        factor = self.patch * 2 ** (self.n_stages - 1)
        if self.image_size % factor:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch*2^(stages-1) = {factor}")
        if self.fusion_stages and len(self.fusion_stages) != self.n_stages:
            raise ConfigError("fusion_stages needs one flag per stage")
        if self.decoder_depth < 1:
            raise ConfigError("decoder_depth must be >= 1")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_dim not divisible by decoder_heads")
        if self.readout not in ("learnable_vector", "mean_pool"):
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.n_waypoints < 1 or self.n_side_views < 1:
            raise ConfigError("n_waypoints and n_side_views must be >= 1")
        if self.backbone_mlp_ratio < 1 or self.decoder_mlp_ratio < 1:
            raise ConfigError("mlp ratios must be >= 1")
        return self


def tiny_model() -> ModelConfig:
    """Smallest config that still exercises every component; used by the gradient and overfit suites."""
    return ModelConfig(
        patch=16,
        main=StreamConfig(dims=(16, 16), depths=(1, 1), groups=(2, 2)),
        side=StreamConfig(dims=(8, 8), depths=(1, 1), groups=(1, 2)),
        fusion_heads=2,
        decoder_dim=16,
        decoder_depth=2,
        decoder_heads=2,
        control_hidden=16,
    )


def scaled_backbone(cfg: ModelConfig, factor: float) -> ModelConfig:
    """Scale every backbone width by ``factor`` (rounded to a multiple of 8)."""
    def sc(s: StreamConfig) -> StreamConfig:
        return dataclasses.replace(s, dims=tuple(max(8, int(round(d * factor / 8)) * 8) for d in s.dims))
    return dataclasses.replace(cfg, main=sc(cfg.main), side=sc(cfg.side))


@dataclass(frozen=True)
class ScheduleConfig:
    # full-scale recipe: 60 epochs at 5e-4, 60 at 1e-4, halving every 30
    base_lrs: tuple = (5e-4, 1e-4)
    phase_epochs: int = 60
    halve_every: int = 30


@dataclass(frozen=True)
class LossWeights:
    speed: float = 1.0
    feature: float = 1.0
    waypoint: float = 1.0
    control: float = 1.0
    estimator: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    # full-scale reference: batch 256, 120 epochs
    epochs: int = 12
    batch_size: int = 32
    schedule: ScheduleConfig = ScheduleConfig(phase_epochs=6, halve_every=3)
    weights: LossWeights = LossWeights()
    weight_decay: float = 1e-7
    seed: int = 0
    checkpoint_every: int = 1
    estimator_delay: int = 0
    max_steps: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if any(w < 0 for w in dataclasses.astuple(self.weights)):
            raise ConfigError("loss weights must be >= 0")
        if any(lr <= 0 for lr in self.schedule.base_lrs) or not self.schedule.base_lrs:
            raise ConfigError("learning rates must be positive")
        if self.schedule.phase_epochs < 1 or self.schedule.halve_every < 1:
            raise ConfigError("schedule epochs must be >= 1")
        return self


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float
    kd: float


@dataclass(frozen=True)
class ControlConfig:
    longitudinal: PidGains = PidGains(1.0, 0.05, 0.0)
    lateral: PidGains = PidGains(0.8, 0.0, 0.2)
    integral_clamp: float = 10.0
    waypoint_dt: float = 0.5
    brake_speed: float = 0.4
    brake_ratio: float = 1.1
    max_throttle: float = 0.75
    mode: str = "dynamic"
    static_alpha: float = 0.5
    k_c: float = 1.0
    k_w: float = 1.0
    coactivation_brake: float = 0.3

    def validate(self) -> "ControlConfig":
        if self.mode not in ("dynamic", "static_tcp"):
            raise ConfigError(f"unknown control mode {self.mode!r}")
        if not 0.0 <= self.static_alpha <= 1.0:
            raise ConfigError("static_alpha must lie in [0, 1]")
        if self.k_c <= 0 or self.k_w <= 0:
            raise ConfigError("k_c and k_w must be positive")
        if self.waypoint_dt <= 0:
            raise ConfigError("waypoint_dt must be positive")
        return self


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    wheelbase: float = 2.9
    max_steer_angle: float = 0.7
    max_accel: float = 4.0
    max_decel: float = 8.0
    drag: float = 0.01
    cruise_speed: float = 6.0
    road_half_width: float = 3.5
    blocked_time: float = 90.0
    off_route_distance: float = 30.0
    finish_tolerance: float = 2.0
    timeout_slack: float = 60.0
    target_lookahead: float = 12.0
    penalties: dict = field(default_factory=lambda: {
        "collision_pedestrian": 0.50,
        "collision_vehicle": 0.60,
        "collision_static": 0.65,
        "red_light": 0.70,
        "stop_sign": 0.80,
    })
    sample_hz: float = 2.0
    noise_prob: float = 0.02
    noise_steer: float = 0.25
    noise_duration: float = 1.0

    def validate(self) -> "SimConfig":
        if self.dt <= 0 or self.wheelbase <= 0:
            raise ConfigError("dt and wheelbase must be positive")
        for k, v in self.penalties.items():
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"penalty {k} must lie in (0, 1]")
        if self.sample_hz <= 0:
            raise ConfigError("sample_hz must be positive")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    control: ControlConfig = ControlConfig()
    sim: SimConfig = SimConfig()

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.train.validate()
        self.control.validate()
        self.sim.validate()
        return self


# ---------------------------------------------------------------------------
# (de)serialisation


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    return conv(cfg)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path}.{f.name}" if path else f.name)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def _coerce(tp, value, path: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string")
        return value
    if tp is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list")
        return tuple(value)
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected object")
        return dict(value)
    return value


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    if "penalties" in data.get("sim", {}):
        merged = dict(SimConfig().penalties)
        extra = sorted(set(cfg.sim.penalties) - set(merged))
        if extra:
            raise ConfigError(f"sim.penalties: unknown key(s) {', '.join(extra)}")
        merged.update(cfg.sim.penalties)
        cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, penalties=merged))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def tiny_experiment(**train_overrides) -> ExperimentConfig:
    return ExperimentConfig(model=tiny_model(), train=dataclasses.replace(TrainConfig(), **train_overrides)).validate()
