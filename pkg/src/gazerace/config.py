"""Flat, validated workbench configuration with desk and paper-scale presets."""

import json
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path

from gazerace.attention_net import AttentionNetConfig
from gazerace.dagger import DaggerSchedule
from gazerace.policy import MODALITIES, PolicyConfig
from gazerace.render import CameraModel
from gazerace.sim.track import TRACK_NAMES

PRESET_DIR = Path(__file__).resolve().parent / "data"


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # camera and rendering
    width: int = 128
    height: int = 96
    hfov: float = 80.0
    uptilt: float = 25.0
    # tracks and references
    track: str = "figure8"  # gaze data and attention training
    policy_track: str = "oval"  # DAgger training, evaluate, shadow-eval and bench
    n_references: int = 18
    speed_min: float = 4.0
    speed_max: float = 6.0
    reference_offset: float = 0.3
    train_reference_seed: int = 1
    test_reference_seed: int = 2
    start_jitter: float = 0.1
    # synthetic gaze data
    gen_frames: int = 2000
    gaze_half_window: int = 12
    # attention network
    att_epochs: int = 5
    att_batch: int = 16
    att_lr: float = 2e-4
    att_base_channels: int = 16
    att_augment: bool = True
    att_val_fraction: float = 0.2
    # policy and DAgger
    modality: str = "attention"
    dagger_iterations: int = 3
    dagger_rollouts: int = 6
    dagger_epochs: int = 10
    noise_p_start: float = 0.05
    noise_p_end: float = 0.25
    noise_thrust_sigma: float = 1.0
    noise_rate_sigma: float = 0.3
    tau_thrust: float = 2.0
    tau_rate: float = 0.5
    tau_growth: float = 1.5
    policy_lr: float = 1e-3
    policy_batch: int = 64
    # evaluation and benchmarking
    eval_reps: int = 10
    eval_references: int = 0  # 0 = all references
    bench_ticks: int = 500
    latency_budget_ms: float = 40.0
    jobs: int = 1

    _POSITIVE = ("width", "height", "n_references", "gen_frames", "att_epochs", "att_batch", "att_base_channels",
                 "dagger_iterations", "dagger_rollouts", "dagger_epochs", "policy_batch", "eval_reps",
                 "bench_ticks", "jobs", "att_lr", "policy_lr", "latency_budget_ms", "speed_min", "speed_max")

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            expected = type(f.default)
            if expected is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
                setattr(self, f.name, v)
            if not isinstance(v, expected) or (expected is int and isinstance(v, bool)):
                raise ConfigError(f"{f.name}: expected {expected.__name__}, got {v!r}")
        for name in self._POSITIVE:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)!r}")
        for name in ("gaze_half_window", "eval_references", "start_jitter", "reference_offset",
                     "noise_thrust_sigma", "noise_rate_sigma", "tau_thrust", "tau_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative, got {getattr(self, name)!r}")
        if self.track not in TRACK_NAMES or self.policy_track not in TRACK_NAMES:
            raise ConfigError(f"track/policy_track: expected one of {TRACK_NAMES}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality: expected one of {MODALITIES}, got {self.modality!r}")
        if not 0 < self.hfov < 180:
            raise ConfigError(f"hfov: must lie in (0, 180), got {self.hfov}")
        if self.speed_min > self.speed_max:
            raise ConfigError("speed_min: exceeds speed_max")
        if not 0 < self.att_val_fraction < 1:
            raise ConfigError("att_val_fraction: must lie in (0, 1)")
        for name in ("noise_p_start", "noise_p_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name}: must lie in [0, 1]")
        try:
            self.attention_config()
            self.policy_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        return asdict(self)

    def camera(self) -> CameraModel:
        return CameraModel(self.width, self.height, self.hfov, self.uptilt)

    def attention_config(self) -> AttentionNetConfig:
        return AttentionNetConfig(self.width, self.height, self.att_base_channels, self.att_epochs, self.att_batch,
                                  self.att_lr, self.att_augment, self.att_val_fraction)

    def policy_config(self, modality=None) -> PolicyConfig:
        att = AttentionNetConfig(self.width, self.height).feature_length
        return PolicyConfig(modality=modality or self.modality, image_size=(self.width, self.height), attention_features=att)

    def schedule(self) -> DaggerSchedule:
        return DaggerSchedule(self.dagger_iterations, self.dagger_rollouts, self.dagger_epochs, self.noise_p_start,
                              self.noise_p_end, self.noise_thrust_sigma, self.noise_rate_sigma, self.tau_thrust,
                              self.tau_rate, self.tau_growth, self.policy_lr, self.policy_batch, self.start_jitter)


def config_from_dict(d: dict) -> Config:
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    known = {f.name for f in fields(Config)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    try:
        return Config(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None) -> Config:
    """Load a JSON config (UTF-8). Bare names ``desk``/``paper`` resolve to the bundled presets."""
    if path is None:
        return Config()
    p = Path(path)
    if not p.exists() and (PRESET_DIR / f"{p.stem}.json").exists() and p.name in (p.stem, p.stem + ".json"):
        p = PRESET_DIR / f"{p.stem}.json"
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(d)


def config_schema() -> dict:
    """Every key with its type and default."""
    out = {}
    for f in fields(Config):
        default = f.default if f.default is not MISSING else None
        out[f.name] = {"type": type(default).__name__, "default": default}
    return out
