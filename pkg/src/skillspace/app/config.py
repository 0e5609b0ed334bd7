"""Experiment configuration: one serializable record per run, resolved
from defaults, an optional YAML file, and command-line overrides (in that
order). The resolved copy is written into the run directory so any run
can be re-executed from its own artifacts."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, model_validator

RUN_DIR_ENV = "R2S2_RUN_DIR"

STAGES = ("primitive", "ensemble", "planner", "eval", "teleop")
SKILLS = ("loco", "body", "hand")
TASKS = ("single-point", "dual-point", "shelf", "box")
VARIANTS = ("latent", "primary", "flat")
ENSEMBLE_MODES = ("full", "il_only", "rl_only", "seq")

DEFAULT_UPDATES = {"primitive": 16000, "ensemble": 4000, "planner": 2000}


def run_root(cli_value=None):
    """Output root precedence: explicit flag, then env var, then ./runs."""
    if cli_value:
        return Path(cli_value)
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


class ExperimentConfig(BaseModel):
    stage: Literal["primitive", "ensemble", "planner", "eval", "teleop"]
    skill: Optional[Literal["loco", "body", "hand"]] = None
    task: Optional[Literal["single-point", "dual-point", "shelf", "box"]] = None
    variant: Literal["latent", "primary", "flat"] = "latent"
    mode: Literal["full", "il_only", "rl_only", "seq"] = "full"
    seed: int = 0
    updates: Optional[int] = None
    n_envs: int = 16
    lr: float = 3e-4
    trials: int = 1000
    port: int = 8765

    @model_validator(mode="after")
    def _stage_requirements(self):
        if self.stage == "primitive" and self.skill is None:
            raise ValueError("primitive stage needs a skill (loco|body|hand)")
        if self.stage in ("planner", "eval") and self.task is None:
            raise ValueError(f"{self.stage} stage needs a task")
        if self.updates is not None and self.updates < 1:
            raise ValueError("updates must be positive")
        if self.n_envs < 1:
            raise ValueError("n_envs must be positive")
        return self

    def resolved_updates(self):
        return self.updates if self.updates is not None \
            else DEFAULT_UPDATES.get(self.stage, 0)


def load_config_file(path):
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return data


def build_config(stage, file_path=None, **overrides):
    """Merge file values under CLI overrides; unset overrides (None) do
    not shadow file values."""
    data = load_config_file(file_path) if file_path else {}
    data["stage"] = stage
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    return ExperimentConfig(**data)


def write_resolved(cfg: ExperimentConfig, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = {**cfg.model_dump(), "updates": cfg.resolved_updates()}
    with open(run_dir / "config.yaml", "w") as f:
        yaml.safe_dump(resolved, f, sort_keys=True)
    return run_dir / "config.yaml"
