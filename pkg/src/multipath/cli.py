"""Command line: seed | evolve | eval | report.

Exit codes: 0 success, 2 configuration error, 3 runtime error.  Set
MULTIPATH_LOG_LEVEL (DEBUG, INFO, WARNING) to control verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy

from .config import ConfigError, RunConfig, load_config
from .evolution import ABLATIONS, MultipathAgent, aggregate_reports, replica_seed, reports_to_tsv
from .multipath import published_model
from .report import collect_variants, summary_table
from .seeding import seed_store
from .store import (CheckpointError, RepresentationCache, StoreError, SystemStore, export_graph,
                    load_checkpoint, save_checkpoint)
from .trainer import evaluate, evaluate_path

log = logging.getLogger("multipath")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version
    try:
        own = version("multipath")
    except PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "multipath": own}


# -- seed -------------------------------------------------------------------

def cmd_seed(args) -> int:
    cfg = load_config(args.config)
    store_dir = Path(args.store or cfg.store_dir)
    if (store_dir / "manifest.json").exists():
        raise StoreError(f"{store_dir} already holds a seeded store; refusing to seed again")
    store = SystemStore()
    for spec in cfg.tasks:
        store.add_task(spec)
    paths = seed_store(store, cfg.seeding)
    save_checkpoint(store, store_dir)
    (store_dir / "system.dot").write_text(export_graph(store))
    for pid in paths:
        s = store.path_scores[pid]
        print(f"{pid}\tvalidation {s['validation']:.4f}\ttest {s['test']:.4f}")
    return EXIT_OK


# -- evolve -----------------------------------------------------------------

def _agent_config(cfg: RunConfig, args):
    agent = cfg.agent
    kw = {}
    if args.ablate:
        kw["ablation_mode"] = args.ablate.replace("-", "_")
    if args.force_support:
        kw["forced_first_support"] = args.force_support
    for name in ("cycles", "samples_per_cycle", "workers", "seed", "train_steps"):
        value = getattr(args, name)
        if value is not None:
            kw[name] = value
    try:
        return replace(agent, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


class _TrainLog:
    def __init__(self, path: Path, append: bool):
        self.fh = open(path, "a" if append else "w")
        if not append:
            self.fh.write("model_id\tstep\tloss\tlr\n")

    def __call__(self, model, record):
        self.fh.writelines(f"{model.model_id}\t{s}\t{loss!r}\t{lr!r}\n" for s, loss, lr in record.log)
        self.fh.flush()

    def close(self):
        self.fh.close()


def cmd_evolve(args) -> int:
    cfg = load_config(args.config)
    agent_cfg = _agent_config(cfg, args)
    replicas = args.replicas or cfg.replicas
    out = Path(args.output or cfg.output_dir)
    store_dir = Path(args.store or cfg.store_dir)
    base = load_checkpoint(store_dir)
    if agent_cfg.target_task not in base.tasks:
        raise ConfigError(f"target task {agent_cfg.target_task} not in store {store_dir}")
    if agent_cfg.forced_first_support and agent_cfg.forced_first_support not in base.paths:
        raise ConfigError(f"unknown path {agent_cfg.forced_first_support}")
    out.mkdir(parents=True, exist_ok=True)
    shared = RepresentationCache(base)
    seeds = [agent_cfg.seed if args.same_seed else replica_seed(agent_cfg.seed, r) for r in range(replicas)]
    manifest = {"config": cfg.to_dict(), "config_sha256": cfg.digest(), "agent": asdict(agent_cfg),
                "replicas": replicas, "replica_seeds": seeds, "store": str(store_dir), "argv": sys.argv[1:],
                "versions": _versions()}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    agents = []
    for r in range(replicas):
        rdir = out / f"replica{r}"
        state = rdir / "agent"
        if args.resume and (state / "manifest.json").exists():
            agent = MultipathAgent.load(state)
            if agent.config.seed != seeds[r]:
                raise ConfigError(f"replica {r} checkpoint was run with a different seed")
            agent.config.cycles = agent_cfg.cycles
            log.info("replica %d resumed at cycle %d", r, agent.cycle)
        else:
            rdir.mkdir(parents=True, exist_ok=True)
            agent = MultipathAgent(base.copy(), replace(agent_cfg, seed=seeds[r]))
        agent.cache._rows, agent.cache._filled = shared._rows, shared._filled
        train_log = _TrainLog(rdir / "train_log.tsv", append=agent.cycle > 0)
        agent.on_trained = train_log
        try:
            while agent.cycle < agent.config.cycles:
                agent.run_cycle()
                agent.save(state)
        finally:
            train_log.close()
        (rdir / "cycles.tsv").write_text(reports_to_tsv(agent.reports))
        (rdir / "models.tsv").write_text(reports_to_tsv(
            [{**h, "support_path_ids": ",".join(h["support_path_ids"])} for h in agent.history]))
        (rdir / "system.dot").write_text(export_graph(agent.store))
        agents.append(agent)
    rows = [{"replica": r, **row} for r, a in enumerate(agents) for row in a.reports]
    (out / "replicas.tsv").write_text(reports_to_tsv(rows))
    curve = aggregate_reports([a.reports for a in agents])
    (out / "curves.tsv").write_text(reports_to_tsv(curve))
    (out / "system.dot").write_text(export_graph(agents[0].store))
    final = curve[-1] if curve else None
    if final:
        print(f"cycle {final['cycle']}: validation {100 * final['val_mean']:.2f} ±{100 * final['val_sem']:.2f} "
              f"(max {100 * final['val_max']:.2f}), test {100 * final['test_mean']:.2f} "
              f"±{100 * final['test_sem']:.2f} (max {100 * final['test_max']:.2f})")
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(args) -> int:
    store = load_checkpoint(args.store)
    cache = RepresentationCache(store)
    if args.id in store.models:
        acc = evaluate(published_model(store, args.id), cache, args.split)
    elif args.id in store.paths:
        acc = evaluate_path(cache, args.id, args.split)
    else:
        raise UsageError(f"unknown model or path id {args.id!r}")
    print(repr(acc))
    return EXIT_OK


# -- report -----------------------------------------------------------------

def cmd_report(args) -> int:
    for d in args.runs:
        if not (Path(d) / "replicas.tsv").exists():
            raise UsageError(f"{d} has no replicas.tsv; is it an evolve output directory?")
    print(summary_table(collect_variants(args.runs), args.reference), end="")
    if args.dot:
        src = Path(args.runs[0]) / "system.dot"
        Path(args.dot).write_text(src.read_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multipath", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("seed", help="train and publish one frozen path per task")
    s.add_argument("--config", required=True)
    s.add_argument("--store", help="override the config's store directory")
    s.set_defaults(func=cmd_seed)

    e = sub.add_parser("evolve", help="run multipath agent replicas")
    e.add_argument("--config", required=True)
    e.add_argument("--store")
    e.add_argument("--output")
    e.add_argument("--ablate", choices=[a.replace("_", "-") for a in ABLATIONS if a != "none"])
    e.add_argument("--force-support", metavar="PATH_ID")
    e.add_argument("--replicas", type=int)
    e.add_argument("--cycles", type=int)
    e.add_argument("--samples-per-cycle", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--train-steps", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--same-seed", action="store_true", help="give every replica the base seed")
    e.add_argument("--resume", action="store_true", help="continue replicas from their last saved cycle")
    e.set_defaults(func=cmd_evolve)

    v = sub.add_parser("eval", help="accuracy of a published model or path")
    v.add_argument("--store", required=True, help="checkpoint directory")
    v.add_argument("--id", required=True)
    v.add_argument("--split", choices=("validation", "test"), default="test")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="compare evolve runs")
    r.add_argument("runs", nargs="+", help="evolve output directories, one per variant")
    r.add_argument("--reference", help="variant the p-values compare against")
    r.add_argument("--dot", help="write the first run's system graph here")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MULTIPATH_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StoreError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
