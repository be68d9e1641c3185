"""One JSON config document covering every tunable component.

Shape:
    {
      "plant": {...},      # PlantConfig
      "bins": {...},       # BinSpec
      "network": {...},    # NetworkSpec
      "training": {...},   # TrainConfig
      "inversion": {...}   # InversionParams
    }

Missing sections or keys fall back to defaults; unknown keys are rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .forward import TrainConfig
from .inversion import InversionParams
from .nn import NetworkSpec
from .pipeline import BinSpec
from .plant import PlantConfig


@dataclass
class AppConfig:
    plant: PlantConfig = field(default_factory=PlantConfig)
    bins: BinSpec = field(default_factory=BinSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    inversion: InversionParams = field(default_factory=InversionParams)

    def to_dict(self) -> dict:
        return {
            "plant": self.plant.to_dict(),
            "bins": self.bins.to_dict(),
            "network": self.network.to_dict(),
            "training": self.training.to_dict(),
            "inversion": self.inversion.to_dict(),
        }


def _merged(defaults: dict, overrides: dict, section: str) -> dict:
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ValueError(f"unknown keys in config section '{section}': {sorted(unknown)}")
    return {**defaults, **overrides}


def load_config(path: str | Path | None) -> AppConfig:
    if path is None:
        return AppConfig()
    doc = json.loads(Path(path).read_text())
    known_sections = {"plant", "bins", "network", "training", "inversion"}
    unknown = set(doc) - known_sections
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    base = AppConfig()
    return AppConfig(
        plant=PlantConfig.from_dict(_merged(base.plant.to_dict(), doc.get("plant", {}), "plant")),
        bins=BinSpec.from_dict(_merged(base.bins.to_dict(), doc.get("bins", {}), "bins")),
        network=NetworkSpec.from_dict(
            _merged(base.network.to_dict(), doc.get("network", {}), "network")
        ),
        training=TrainConfig.from_dict(
            _merged(base.training.to_dict(), doc.get("training", {}), "training")
        ),
        inversion=InversionParams.from_dict(
            _merged(base.inversion.to_dict(), doc.get("inversion", {}), "inversion")
        ),
    )


def save_config(config: AppConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
