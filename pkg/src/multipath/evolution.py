"""The multipath agent: parent selection, mutation, evolutionary cycles and
independent replicas."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hparams import SEARCH_SPACE, Hyperparams, neighbors
from .multipath import DEFAULT_EMA_DECAY, DEFAULT_MAIN_WEIGHT, MultipathModel, new_model, publish
from .nn import zero_dense
from .store import (RepresentationCache, StoreError, SystemStore, load_checkpoint, read_blob,
                    read_manifest, save_checkpoint, write_blob)
from .trainer import evaluate, main_weight_mean, train_and_score

log = logging.getLogger(__name__)

ABLATIONS = ("none", "standard_aggregation", "sum_aggregation", "zero_bias_init", "unit_lr_multiplier")
MAX_DUPLICATE_RESAMPLES = 10
REPORT_KEYS = ("cycle", "best_model", "best_validation", "best_test", "population", "main_weight", "num_paths")
HISTORY_KEYS = ("cycle", "model_id", "parent_id", "score", "kept", "support_path_ids", "router_params")


class InsufficientPathsError(StoreError):
    pass


@dataclass
class AgentConfig:
    target_task: str
    main_path_id: str | None = None
    cycles: int = 15
    samples_per_cycle: int = 16
    workers: int = 4
    max_paths: int = 3
    default_num_paths: int = 2
    support_path_exclusions: list[str] = field(default_factory=list)
    forced_first_support: str | None = None
    ablation_mode: str = "none"
    seed: int = 0
    mutation_probability: float = 0.25
    w_main_star: float = DEFAULT_MAIN_WEIGHT
    ema_routing: bool = False
    ema_decay: float = DEFAULT_EMA_DECAY
    train_steps: int = 2000
    batch_size: int = 32

    def __post_init__(self):
        if self.ablation_mode not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation_mode!r}; choose from {ABLATIONS}")
        if not 2 <= self.default_num_paths <= self.max_paths:
            raise ValueError("need 2 <= default_num_paths <= max_paths")
        if self.forced_first_support and self.forced_first_support in self.support_path_exclusions:
            raise ValueError("the forced support path is excluded")
        if self.forced_first_support and self.forced_first_support == self.main_path_id:
            raise ValueError("the forced support path is the main path")
        if not 0 <= self.mutation_probability <= 1:
            raise ValueError("mutation_probability must be in [0, 1]")

    @property
    def mode(self) -> str:
        if self.ablation_mode == "standard_aggregation":
            return "standard"
        if self.ablation_mode == "sum_aggregation":
            return "sum"
        return "ema_decoupled" if self.ema_routing else "decoupled"

    def tunable(self) -> list[str]:
        names = list(SEARCH_SPACE)
        if self.ablation_mode in ("unit_lr_multiplier", "sum_aggregation"):
            names.remove("router_lr_multiplier")
        return names

    def default_hyperparams(self) -> Hyperparams:
        hp = Hyperparams(train_steps=self.train_steps, batch_size=self.batch_size)
        if self.ablation_mode == "unit_lr_multiplier":
            hp = hp.with_(router_lr_multiplier=1.0)
        return hp


def select_parent(population: list[MultipathModel], rng) -> MultipathModel | None:
    """Walk the population best-first, accepting each model with
    probability 0.5**num_offsprings.  ``None`` means start from a randomly
    initialised model."""
    for model in sorted(population, key=lambda m: (-m.score, m.created)):
        if rng.random() < 0.5 ** model.num_offsprings:
            return model
    return None


def selection_probabilities(offsprings: list[int]) -> list[float]:
    """Closed-form probability of each rank being chosen, plus the random-init share."""
    out, remaining = [], 1.0
    for k in offsprings:
        p = 0.5 ** k
        out.append(remaining * p)
        remaining *= 1 - p
    return out + [remaining]


class MultipathAgent:
    def __init__(self, store: SystemStore, config: AgentConfig, cache: RepresentationCache | None = None,
                 name: str | None = None):
        if config.target_task not in store.tasks:
            raise StoreError(f"unknown target task {config.target_task}")
        self.store = store
        self.config = config
        self.cache = cache or RepresentationCache(store)
        self.name = name or f"{config.target_task}-mp"
        self.main_path_id = config.main_path_id or self._find_main_path()
        if config.forced_first_support and config.forced_first_support not in store.paths:
            raise StoreError(f"unknown forced support path {config.forced_first_support}")
        self.population: list[MultipathModel] = []
        self.seen_genomes: set = set()
        self.cycle = 0
        self.counter = 0
        self.reports: list[dict] = []
        self.published: list[str] = []
        self.history: list[dict] = []
        # called as on_trained(model, record) after each model is scored
        self.on_trained = None

    def _find_main_path(self) -> str:
        for pid, path in self.store.paths.items():
            if path.task_id == self.config.target_task:
                return pid
        raise StoreError(f"no path for target task {self.config.target_task}")

    # -- sampling -----------------------------------------------------------
    def eligible_supports(self) -> list[str]:
        excluded = set(self.config.support_path_exclusions) | {self.main_path_id}
        return [p for p in sorted(self.store.paths) if p not in excluded]

    def _next_id(self) -> str:
        self.counter += 1
        return f"{self.name}{self.counter:04d}"

    def best(self) -> MultipathModel | None:
        if not self.population:
            return None
        return min(self.population, key=lambda m: (-m.score, m.created))

    def random_init_model(self, rng) -> MultipathModel:
        cfg = self.config
        eligible = self.eligible_supports()
        if not eligible:
            raise InsufficientPathsError(f"no eligible support paths for {cfg.target_task}")
        best = self.best()
        hp = best.hyperparams if best is not None else cfg.default_hyperparams()
        wanted = cfg.default_num_paths - 1
        supports = []
        if cfg.forced_first_support:
            supports.append(cfg.forced_first_support)
            eligible = [p for p in eligible if p != cfg.forced_first_support]
        k = min(wanted - len(supports), len(eligible))
        if k > 0:
            supports += [eligible[i] for i in rng.choice(len(eligible), size=k, replace=False)]
        model = new_model(self.store, self._next_id(), cfg.target_task, self.main_path_id, supports, hp,
                          cfg.mode, cfg.w_main_star, cfg.ablation_mode == "zero_bias_init")
        model.ema_decay = cfg.ema_decay
        model.created = self.counter
        return model

    def _candidates(self, model: MultipathModel) -> list[tuple]:
        cfg = self.config
        cands = [("hp", name) for name in cfg.tunable()]
        addable = [p for p in self.eligible_supports() if p not in model.support_path_ids]
        if model.num_paths < cfg.max_paths and addable:
            cands.append(("add",))
        if model.num_paths > 2 and self._removable(model):
            cands.append(("remove",))
        return cands

    def _removable(self, model: MultipathModel) -> list[int]:
        forced = self.config.forced_first_support
        return [i for i, p in enumerate(model.support_path_ids) if not (i == 0 and p == forced)]

    def mutate(self, parent: MultipathModel, rng) -> MultipathModel:
        """Child of ``parent`` with at least one mutation applied.

        The child owns deep copies of every trainable array it inherits.
        """
        cfg = self.config
        child = parent.clone(self._next_id())
        child.created = self.counter
        cands = self._candidates(parent)
        fired = [c for c in cands if rng.random() < cfg.mutation_probability]
        if not fired:
            fired = [cands[rng.integers(len(cands))]]
        structural = [c for c in fired if c[0] in ("add", "remove")]
        if len(structural) == 2:
            fired.remove(structural[rng.integers(2)])
        changes = {}
        for c in fired:
            if c[0] == "hp":
                options = neighbors(c[1], getattr(child.hyperparams, c[1]))
                changes[c[1]] = options[rng.integers(len(options))]
        child.hyperparams = child.hyperparams.with_(**changes)
        for c in fired:
            if c[0] == "add":
                addable = [p for p in self.eligible_supports() if p not in child.support_path_ids]
                pid = addable[rng.integers(len(addable))]
                child.support_path_ids.append(pid)
                in_dim = self.store.tasks[self.store.paths[pid].task_id].num_classes
                child.connectors.append(zero_dense(in_dim, self.store.tasks[cfg.target_task].num_classes))
                child.reset_router()
            elif c[0] == "remove":
                options = self._removable(child)
                i = options[rng.integers(len(options))]
                del child.support_path_ids[i]
                del child.connectors[i]
                child.reset_router()
        parent.num_offsprings += 1
        return child

    def sample_model(self, rng) -> MultipathModel:
        """Select a parent and derive a child, avoiding already-seen genomes."""
        for attempt in range(MAX_DUPLICATE_RESAMPLES + 1):
            parent = select_parent(self.population, rng)
            child = self.random_init_model(rng) if parent is None else self.mutate(parent, rng)
            if child.genome() not in self.seen_genomes:
                break
            log.debug("duplicate genome for %s (attempt %d)", child.model_id, attempt)
            if parent is not None and attempt < MAX_DUPLICATE_RESAMPLES:
                # a discarded child does not count as offspring
                parent.num_offsprings -= 1
        self.seen_genomes.add(child.genome())
        return child

    # -- cycles -------------------------------------------------------------
    def _train(self, model: MultipathModel):
        seed = np.random.SeedSequence([self.config.seed, model.created])
        return train_and_score(model, self.cache, seed)

    def _warm_cache(self) -> None:
        # fill the cache before workers share it
        for pid in self.store.paths:
            for split in ("train", "validation", "test"):
                self.cache.get_split(pid, split, self.config.target_task)

    def run_cycle(self) -> dict:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, self.cycle, 7])
        batch = []
        for _ in range(cfg.samples_per_cycle):
            parent_before = None
            child = self.sample_model(rng)
            if child.parent_id is not None:
                parent_before = next(m for m in self.population if m.model_id == child.parent_id)
            batch.append((child, parent_before))
        self._warm_cache()
        models = [c for c, _ in batch]
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                records = list(pool.map(self._train, models))
        else:
            records = [self._train(m) for m in models]
        for (child, parent), rec in zip(batch, records):
            if self.on_trained is not None:
                self.on_trained(child, rec)
            kept = parent is None or child.score > parent.score
            self.history.append({"cycle": self.cycle, "model_id": child.model_id, "parent_id": child.parent_id,
                                 "score": child.score, "kept": kept,
                                 "support_path_ids": list(child.support_path_ids),
                                 "router_params": child.router is not None})
            if kept:
                self.population.append(child)
        best = self.best()
        if best.test_score is None:
            best.test_score = evaluate(best, self.cache, "test")
        if best.model_id not in self.store.models:
            publish(self.store, best)
            self.published.append(best.model_id)
        report = {
            "cycle": self.cycle,
            "best_model": best.model_id,
            "best_validation": best.score,
            "best_test": best.test_score,
            "population": len(self.population),
            "main_weight": main_weight_mean(best, self.cache),
            "num_paths": best.num_paths,
        }
        self.reports.append(report)
        self.cycle += 1
        log.info("cycle %(cycle)d best %(best_model)s val %(best_validation).4f test %(best_test).4f", report)
        return report

    def run(self, cycles: int | None = None) -> list[dict]:
        for _ in range(self.config.cycles if cycles is None else cycles):
            self.run_cycle()
        return self.reports

    # -- persistence ----------------------------------------------------------
    def save(self, directory) -> Path:
        directory = Path(directory)
        population = []
        for m in self.population:
            entry = m.to_record()
            entry["blob"] = write_blob(directory, f"agent__{m.model_id}", m.params())
            population.append(entry)
        state = {
            "config": asdict(self.config), "name": self.name, "main_path_id": self.main_path_id,
            "cycle": self.cycle, "counter": self.counter, "reports": self.reports,
            "published": self.published, "history": self.history,
            "seen_genomes": [[list(s), list(h)] for s, h in sorted(self.seen_genomes, key=repr)],
            "population": population,
        }
        save_checkpoint(self.store, directory, extra={"agent": state})
        return directory

    @classmethod
    def load(cls, directory, cache: RepresentationCache | None = None) -> "MultipathAgent":
        directory = Path(directory)
        store = load_checkpoint(directory)
        state = read_manifest(directory).get("extra", {}).get("agent")
        if state is None:
            raise StoreError(f"{directory} holds no agent state")
        agent = cls(store, AgentConfig(**state["config"]), cache, state["name"])
        agent.main_path_id = state["main_path_id"]
        agent.cycle, agent.counter = state["cycle"], state["counter"]
        # the manifest is written with sorted keys; restore column order
        agent.reports = [{k: r[k] for k in REPORT_KEYS} for r in state["reports"]]
        agent.history = [{k: h[k] for k in HISTORY_KEYS} for h in state["history"]]
        agent.published = state["published"]
        agent.seen_genomes = {(tuple(s), tuple(h)) for s, h in state["seen_genomes"]}
        for entry in state["population"]:
            entry = dict(entry)
            params = read_blob(directory, entry.pop("blob"), f"population model {entry['model_id']}")
            agent.population.append(MultipathModel.from_record(entry, params))
        return agent


# -- replicas ------------------------------------------------------------------

def replica_seed(seed: int, replica: int) -> int:
    return int(np.random.SeedSequence([seed, replica]).generate_state(1)[0])


def sem(values) -> float:
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(len(values)))


def aggregate_reports(per_replica: list[list[dict]]) -> list[dict]:
    """Per-cycle mean, s.e.m. and max of the best validation/test accuracy."""
    rows = []
    for cycle in range(min(len(r) for r in per_replica)):
        val = [r[cycle]["best_validation"] for r in per_replica]
        test = [r[cycle]["best_test"] for r in per_replica]
        rows.append({"cycle": cycle, "n": len(val),
                     "val_mean": float(np.mean(val)), "val_sem": sem(val), "val_max": float(np.max(val)),
                     "test_mean": float(np.mean(test)), "test_sem": sem(test), "test_max": float(np.max(test))})
    return rows


def run_replicas(store: SystemStore, config: AgentConfig, n_replicas: int,
                 cache: RepresentationCache | None = None, derive_seeds: bool = True,
                 on_replica=None) -> tuple[list[MultipathAgent], list[dict]]:
    """Run ``n_replicas`` agents, each on its own copy of ``store``."""
    if n_replicas < 1:
        raise ValueError("need at least one replica")
    agents = []
    for r in range(n_replicas):
        replica_store = store.copy()
        cfg = AgentConfig(**{**asdict(config),
                             "seed": replica_seed(config.seed, r) if derive_seeds else config.seed})
        shared = RepresentationCache(replica_store)
        if cache is not None:
            # frozen paths are shared between replicas, so are their outputs
            shared._rows, shared._filled = cache._rows, cache._filled
        agent = MultipathAgent(replica_store, cfg, shared)
        agent.run()
        agents.append(agent)
        if on_replica is not None:
            on_replica(r, agent)
    return agents, aggregate_reports([a.reports for a in agents])


def reports_to_tsv(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for row in rows:
        lines.append("\t".join(_fmt(row[k]) for k in keys))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
