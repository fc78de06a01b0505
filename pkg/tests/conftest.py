import json
from pathlib import Path

import numpy as np
import pytest

from multipath.config import RunConfig
from multipath.data import SyntheticFamily, TaskSpec
from multipath.seeding import SeedConfig, seed_store
from multipath.store import RepresentationCache, SystemStore

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk_benchmark.json"

ACCEPTANCE: list[tuple[str, bool, str]] = []

TEX = ("dots", "diagonal", "gradient", "vstripes")


def tiny_tasks() -> list[TaskSpec]:
    small = {"train": 256, "validation": 96, "test": 96}
    return [
        TaskSpec("tgt", 4, 8, 3, seed=2, split_sizes=small,
                 family=SyntheticFamily(("disc", "square", "triangle", "cross"), TEX, noise=0.2, palette_seed=1)),
        TaskSpec("aux", 4, 8, 3, seed=3, split_sizes=small,
                 family=SyntheticFamily(("square", "cross", "disc", "triangle"), TEX, noise=0.2, palette_seed=1)),
        TaskSpec("base", 6, 8, 3, seed=4, split_sizes=small,
                 family=SyntheticFamily(("disc", "square", "triangle", "cross", "ring", "diamond"),
                                        ("solid", "checker"), palette_seed=3)),
    ]


def tiny_seed_config() -> SeedConfig:
    return SeedConfig("base", hidden=[16], trunk_steps=150, finetune_steps=80, batch_size=32)


def build_tiny_store() -> SystemStore:
    store = SystemStore()
    for t in tiny_tasks():
        store.add_task(t)
    seed_store(store, tiny_seed_config())
    return store


@pytest.fixture(scope="session")
def tiny_store_master():
    return build_tiny_store()


@pytest.fixture
def tiny_store(tiny_store_master):
    return tiny_store_master.copy()


@pytest.fixture
def tiny_cache(tiny_store):
    return RepresentationCache(tiny_store)


def tiny_config_dict(tmp_path) -> dict:
    return {
        "store_dir": str(tmp_path / "store"),
        "output_dir": str(tmp_path / "run"),
        "replicas": 2,
        "tasks": [t.to_dict() for t in tiny_tasks()],
        "seeding": {"base_task": "base", "hidden": [16], "trunk_steps": 150, "finetune_steps": 80},
        "agent": {"target_task": "tgt", "cycles": 2, "samples_per_cycle": 3, "workers": 1, "seed": 5,
                  "train_steps": 60},
    }


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_config_dict(tmp_path)))
    return path


def desk_config() -> RunConfig:
    return RunConfig.from_dict(json.loads(DESK_CONFIG.read_text()))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in ACCEPTANCE:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)
