"""Run configuration loaded from JSON and validated before any compute."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SyntheticFamily, TaskSpec
from .evolution import AgentConfig
from .seeding import SeedConfig


class ConfigError(ValueError):
    pass


def _build(cls, raw, what: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{what} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {what}: {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


@dataclass
class RunConfig:
    store_dir: str
    output_dir: str
    tasks: list[TaskSpec]
    seeding: SeedConfig
    agent: AgentConfig
    replicas: int = 1
    source: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate task ids")
        if self.seeding.base_task not in ids:
            raise ConfigError(f"base task {self.seeding.base_task} is not defined")
        if self.agent.target_task not in ids:
            raise ConfigError(f"target task {self.agent.target_task} is not defined")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        allowed = {"store_dir", "output_dir", "tasks", "seeding", "agent", "replicas"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"unknown keys in run config: {unknown}")
        missing = sorted({"store_dir", "output_dir", "tasks", "seeding", "agent"} - set(raw))
        if missing:
            raise ConfigError(f"missing keys in run config: {missing}")
        tasks = []
        for i, t in enumerate(raw["tasks"]):
            t = dict(t)
            if t.get("family") is not None:
                t["family"] = _build(SyntheticFamily, t["family"], f"tasks[{i}].family")
            tasks.append(_build(TaskSpec, t, f"tasks[{i}]"))
        try:
            return cls(raw["store_dir"], raw["output_dir"], tasks, _build(SeedConfig, raw["seeding"], "seeding"),
                       _build(AgentConfig, raw["agent"], "agent"), raw.get("replicas", 1), source=raw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {"store_dir": self.store_dir, "output_dir": self.output_dir,
                "tasks": [t.to_dict() for t in self.tasks], "seeding": asdict(self.seeding),
                "agent": asdict(self.agent), "replicas": self.replicas}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    return RunConfig.from_dict(raw)
