"""Populate an empty store with frozen single-task paths.

A trunk is trained on a base task; every other task then gets either a
fine-tuned clone of the trunk or the shared trunk plus a new head.  This is
the stand-in for the pre-existing system that multipath agents extend.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import PreprocessConfig, adapt, log_preprocess_simplifications, preprocess
from .nn import dense, init_dense
from .store import ModuleDef, PathSpec, RepresentationCache, StoreError, SystemStore
from .trainer import accuracy, lr_schedule, sgd_apply

log = logging.getLogger(__name__)


@dataclass
class SeedConfig:
    base_task: str
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    activation: str = "relu"
    trunk_steps: int = 1500
    finetune_steps: int = 400
    # per-task overrides
    task_steps: dict[str, int] = field(default_factory=dict)
    finetune_trunk: dict[str, bool] = field(default_factory=dict)
    train_subset: dict[str, int] = field(default_factory=dict)
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    warmup_ratio: float = 0.05
    seed: int = 0
    preprocess: dict = field(default_factory=dict)


def path_id_for(task_id: str) -> str:
    return f"{task_id}.path"


def _train(store, task_id, modules: list[ModuleDef], trainable: set[str], steps, cfg: SeedConfig, rng,
           resolution, channels, n_train=None):
    data = store.task_data(task_id)
    x_all, y_all = data.split("train")
    if n_train:
        x_all, y_all = x_all[:n_train], y_all[:n_train]
    pp = PreprocessConfig(**cfg.preprocess)
    log_preprocess_simplifications(pp, channels)
    params = {f"{m.module_id}:{k}": v.copy() for m in modules if m.module_id in trainable
              for k, v in m.params.items()}
    velocity: dict = {}
    n = len(y_all)
    for step in range(steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        imgs = np.stack([preprocess(x_all[i], pp, rng, train_mode=True) for i in idx])
        x = ad.Tensor(adapt(imgs, resolution, channels).reshape(len(idx), -1))
        tape = ad.Tape()
        leaves = {k: tape.watch(v) for k, v in params.items()}
        for m in modules:
            p = {k: leaves.get(f"{m.module_id}:{k}", ad.Tensor(v)) for k, v in m.params.items()}
            x = dense(x, p, m.activation)
        loss = ad.cross_entropy_loss(x, y_all[idx])
        names = list(leaves)
        grads = dict(zip(names, ad.backward(loss, [leaves[k] for k in names])))
        lr = lr_schedule(step, steps, cfg.learning_rate, cfg.warmup_ratio)
        params = sgd_apply(params, grads, velocity, lr, cfg.momentum, True)
    for m in modules:
        if m.module_id in trainable:
            m.params = {k: params[f"{m.module_id}:{k}"] for k in m.params}
            m.last_trained_task = task_id


def seed_store(store: SystemStore, cfg: SeedConfig) -> list[str]:
    """Train and publish one frozen path per registered task."""
    if store.paths:
        raise StoreError("store already holds paths; refusing to seed again")
    if cfg.base_task not in store.tasks:
        raise StoreError(f"unknown base task {cfg.base_task}")
    rng = np.random.default_rng(cfg.seed)
    base = store.tasks[cfg.base_task]
    res, ch = base.resolution, base.channels
    dims = [res * res * ch, *cfg.hidden]
    trunk = [ModuleDef(f"trunk/dense{i}", "dense", init_dense(rng, a, b), cfg.activation)
             for i, (a, b) in enumerate(zip(dims, dims[1:]))]
    order = [cfg.base_task] + sorted(t for t in store.tasks if t != cfg.base_task)
    published = []
    for task_id in order:
        spec = store.tasks[task_id]
        head = ModuleDef(f"{task_id}/head", "head", init_dense(rng, dims[-1], spec.num_classes))
        steps = cfg.task_steps.get(task_id, cfg.trunk_steps if task_id == cfg.base_task else cfg.finetune_steps)
        if task_id == cfg.base_task:
            chain = trunk + [head]
            trainable = {m.module_id for m in chain}
        elif cfg.finetune_trunk.get(task_id, True):
            chain = [ModuleDef(f"{task_id}/dense{i}", "dense", {k: v.copy() for k, v in m.params.items()},
                               m.activation, parent_module_id=m.module_id) for i, m in enumerate(trunk)]
            chain.append(head)
            trainable = {m.module_id for m in chain}
        else:
            chain = [store.modules[m.module_id] for m in trunk] + [head]
            trainable = {head.module_id}
        _train(store, task_id, chain, trainable, steps, cfg, rng, res, ch, cfg.train_subset.get(task_id))
        new = [m for m in chain if m.module_id not in store.modules]
        pid = store.publish_path(PathSpec(path_id_for(task_id), task_id, [m.module_id for m in chain], res, ch), new)
        published.append(pid)
    cache = RepresentationCache(store)
    for pid in published:
        tid = store.paths[pid].task_id
        store.path_scores[pid] = {
            split: accuracy(cache.get_split(pid, split), store.task_data(tid).labels[split])
            for split in ("validation", "test")
        }
        log.info("seeded %s: val %.3f test %.3f", pid, *store.path_scores[pid].values())
    return published
