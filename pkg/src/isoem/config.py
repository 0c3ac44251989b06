"""
Run configuration: one declarative document shared by every subcommand.

A config file (JSON, or TOML) holds any of the sections below; every field
has a default, unknown sections or keys are rejected, and ``--set
section.key=value`` flags override the file. The resolved document is
serialisable and loading it again gives an identical run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from isoem.errors import ConfigError
from isoem.evaluate import EvalConfig
from isoem.losses import LossConfig
from isoem.model import PROFILES, ModelConfig
from isoem.reconstruct import ReconstructionOptions
from isoem.synth import DegradationConfig, PatchSamplingConfig
from isoem.trainer import TrainConfig


@dataclass
class IOConfig:
    input: Optional[str] = None
    output: Optional[str] = None
    format: Optional[str] = None
    output_format: Optional[str] = None
    output_dtype: Optional[str] = None
    dataset: str = "/volume"
    spacing_nm: Optional[list] = None
    normalize: bool = True
    lo_pct: float = 0.0
    hi_pct: float = 100.0
    checkpoint: Optional[str] = None
    resume: Optional[str] = None
    metrics_log: Optional[str] = None
    identity_model: bool = False
    save_volumes: bool = False
    pair_count: int = 100
    workers: int = 0


@dataclass
class PhantomConfig:
    size: list = field(default_factory=lambda: [64, 64, 64])
    structure_scale: float = 6.0
    spacing_nm: float = 15.0
    seed: int = 0


@dataclass
class ModelSection:
    profile: str = "default"
    base_channels: Optional[int] = None
    levels: Optional[int] = None
    window_size: Optional[int] = None
    heads_per_level: Optional[list] = None
    glen_expansion: Optional[float] = None
    blocks_per_level: Optional[int] = None
    attn_residual: Optional[bool] = None
    init_seed: int = 0

    def build(self) -> ModelConfig:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown model profile {self.profile!r}; expected one of {sorted(PROFILES)}")
        base = PROFILES[self.profile].to_dict()
        for key in base:
            value = getattr(self, key)
            if value is not None:
                base[key] = value
        return ModelConfig(**base)


SECTIONS = {
    "io": IOConfig,
    "phantom": PhantomConfig,
    "sampling": PatchSamplingConfig,
    "degradation": DegradationConfig,
    "model": ModelSection,
    "loss": LossConfig,
    "train": TrainConfig,
    "reconstruct": ReconstructionOptions,
    "eval": EvalConfig,
}

# training length when train.total_steps is left null
PROFILE_STEPS = {"default": 50_000, "tiny": 500}

# output locations do not affect results and are left out of embedded provenance
_LOCATION_KEYS = {("io", "output"), ("io", "metrics_log")}


@dataclass
class RunConfig:
    io: IOConfig = field(default_factory=IOConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    sampling: PatchSamplingConfig = field(default_factory=PatchSamplingConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(total_steps=None))
    reconstruct: ReconstructionOptions = field(default_factory=ReconstructionOptions)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config document must be a mapping of sections")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        sections = {}
        for name, klass in SECTIONS.items():
            values = data.get(name, {}) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section [{name}] must be a mapping")
            known = {f.name for f in dataclasses.fields(klass)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
            if name == "train" and "total_steps" not in values:
                values = {**values, "total_steps": None}
            try:
                sections[name] = klass(**values)
            except TypeError as exc:
                raise ConfigError(f"invalid [{name}] section: {exc}") from exc
        return cls(**sections)

    def to_dict(self, locations: bool = True) -> dict:
        out = {}
        for name in SECTIONS:
            values = _plain(dataclasses.asdict(getattr(self, name)))
            if not locations:
                values = {k: v for k, v in values.items() if (name, k) not in _LOCATION_KEYS}
            out[name] = values
        return out

    def to_json(self, locations: bool = True) -> str:
        return json.dumps(self.to_dict(locations), indent=2, sort_keys=True)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        data = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r} in override {dotted!r}")
            data[section][key] = value
        return RunConfig.from_dict(data)

    def model_config(self) -> ModelConfig:
        return self.model.build()

    def train_config(self) -> TrainConfig:
        """The train section with a null ``total_steps`` filled from the model profile."""
        if self.train.total_steps is not None:
            return self.train
        steps = PROFILE_STEPS.get(self.model.profile, PROFILE_STEPS["default"])
        return dataclasses.replace(self.train, total_steps=steps)


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value``; the value is read as JSON, falling back to a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
