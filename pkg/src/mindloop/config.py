"""Experiment configuration: one dataclass tree, canonical JSON round-trip."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .dataset import SynthesisConfig
from .errors import ConfigError

RECON_MODES = ("decoded", "upper-bound")
ROIS = ("all", "lvc", "hvc")


@dataclass
class ExperimentConfig:
    """Everything a full run needs; field names double as CLI option names."""

    seed: int = 0
    data: SynthesisConfig = field(default_factory=SynthesisConfig)

    text_seed: int = 1
    visual_seed: int = 0
    feature_layers: tuple = (1, 2, 3)

    ae_seed: int = 3
    ae_epochs: int = 6
    ae_lr: float = 2e-3

    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    denoiser_seed: int = 5
    denoiser_epochs: int = 40
    denoiser_polish_epochs: int = 15
    denoiser_lr: float = 2e-3
    denoiser_polish_lr: float = 5e-4
    sample_steps: int = 10

    ridge_lambda: float = 1.0
    voxels_per_target: int | None = None
    k_percent: float = 25.0
    roi: str = "all"

    mode: str = "decoded"
    ablate: str = "none"
    align_lr: float = 0.05
    align_steps: int = 100
    align_tol: float = 1e-4
    align_window: int = 5

    def validate(self) -> None:
        self.data.validate()
        if self.mode not in RECON_MODES:
            raise ConfigError(f"mode must be one of {RECON_MODES}, got {self.mode!r}")
        if self.roi not in ROIS:
            raise ConfigError(f"roi must be one of {ROIS}, got {self.roi!r}")
        if self.ablate not in ("none", "c", "z", "zclip"):
            raise ConfigError(f"unknown ablation {self.ablate!r}")
        if self.diffusion_steps < 1:
            raise ConfigError("diffusion_steps must be positive")
        if not (1 <= self.sample_steps <= self.diffusion_steps):
            raise ConfigError(
                f"sample_steps must be in 1..{self.diffusion_steps}, got {self.sample_steps}"
            )
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda must be non-negative")
        if not (0 < self.k_percent <= 100):
            raise ConfigError(f"k_percent must be in (0, 100], got {self.k_percent}")
        if self.voxels_per_target is not None and self.voxels_per_target < 1:
            raise ConfigError("voxels_per_target must be positive")
        if len(self.feature_layers) == 0:
            raise ConfigError("need at least one feature layer")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["feature_layers"] = list(self.feature_layers)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "data" in raw and isinstance(raw["data"], dict):
            data_known = {f.name for f in dataclasses.fields(SynthesisConfig)}
            data_unknown = set(raw["data"]) - data_known
            if data_unknown:
                raise ConfigError(f"unknown data config keys: {sorted(data_unknown)}")
            raw["data"] = SynthesisConfig(**raw["data"])
        if "feature_layers" in raw:
            raw["feature_layers"] = tuple(int(x) for x in raw["feature_layers"])
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def canonical_json(obj) -> str:
    """Stable serialisation used for everything written to a run directory."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
