#!/usr/bin/env python3
"""
Run Configuration

Aggregates the per-module dataclass configs into one RunConfig loaded from a
YAML or JSON document. Sections that are absent fall back to dataclass
defaults; unknown sections or keys are rejected.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from chord_inference import ChordInferenceParams
from corpus_pipeline import PipelineConfig
from latent_ops import LatentConfig
from render import RenderOptions
from vae_core import ModelConfig, TrainConfig

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG_NAME = "run_config.json"


class ConfigError(ValueError):
    """Raised for unreadable documents, unknown keys or invalid values"""


@dataclass
class RunConfig:
    """Every tunable of a run, grouped by module"""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    chords: ChordInferenceParams = field(default_factory=ChordInferenceParams)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    render: RenderOptions = field(default_factory=RenderOptions)
    seed: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the seed applied to every seeded section"""
        return replace(self, seed=seed, model=replace(self.model, seed=seed),
                       train=replace(self.train, seed=seed))


SECTIONS = {f.name: f for f in fields(RunConfig) if f.name != "seed"}


def _build_section(name: str, values: Any):
    section_type = SECTIONS[name].default_factory
    if values is None:
        return section_type()
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{name}' must be a mapping")
    known = {f.name for f in fields(section_type)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {', '.join(unknown)}")
    try:
        return section_type(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value in section '{name}': {e}") from e


def config_from_dict(document: Optional[Dict[str, Any]]) -> RunConfig:
    document = document or {}
    if not isinstance(document, dict):
        raise ConfigError("Configuration document must be a mapping")
    unknown = sorted(set(document) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"Unknown configuration sections: {', '.join(unknown)}")
    config = RunConfig(**{name: _build_section(name, document.get(name)) for name in SECTIONS})
    seed = document.get("seed")
    if seed is not None:
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        config = config.with_seed(seed)
    return config


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply 'section.key' overrides; command-line flags win over the file"""
    document = config.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section == "seed" and not key:
            document["seed"] = value
            continue
        if section not in SECTIONS or not key:
            raise ConfigError(f"Unknown override '{dotted}'")
        document[section][key] = value
    return config_from_dict(document)


def load_run_config(path: Optional[str] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load a YAML/JSON run configuration, or defaults when no path is given"""
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Configuration file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
        config = config_from_dict(document)
        logger.info(f"Loaded configuration from {path}")
    else:
        config = RunConfig()
        logger.info("Using default configuration")
    return apply_overrides(config, overrides or {})


def save_run_config(config: RunConfig, directory: str) -> str:
    """Echo the effective configuration into an output directory"""
    Path(directory).mkdir(parents=True, exist_ok=True)
    path = os.path.join(directory, EFFECTIVE_CONFIG_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return path


def main():
    """Print the default configuration"""
    print(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
