import numpy as np
import pytest

from multipath.evolution import (AgentConfig, InsufficientPathsError, MultipathAgent, aggregate_reports,
                                 run_replicas, select_parent, selection_probabilities)
from multipath.hparams import SEARCH_SPACE, Hyperparams
from multipath.multipath import new_model


def agent_cfg(**kw):
    base = dict(target_task="tgt", cycles=2, samples_per_cycle=4, workers=1, seed=11, train_steps=40)
    return AgentConfig(**{**base, **kw})


def population(store, offsprings, scores=None):
    out = []
    for i, k in enumerate(offsprings):
        m = new_model(store, f"p{i}", "tgt", "tgt.path", ["aux.path"])
        m.score = scores[i] if scores else 1.0 - 0.1 * i
        m.num_offsprings = k
        m.created = i
        out.append(m)
    return out


def test_fresh_best_is_always_selected(tiny_store):
    pop = population(tiny_store, [0, 3])
    rng = np.random.default_rng(0)
    assert all(select_parent(pop, rng) is pop[0] for _ in range(200))


def test_empty_population_gives_random_init():
    assert select_parent([], np.random.default_rng(0)) is None


def test_selection_closed_form():
    assert selection_probabilities([1, 0]) == [0.5, 0.5, 0.0]
    p = selection_probabilities([2, 1, 3])
    assert p == pytest.approx([0.25, 0.375, 0.046875, 0.328125])
    assert sum(p) == pytest.approx(1.0)


def test_selection_monte_carlo_small(tiny_store):
    pop = population(tiny_store, [1, 0])
    rng = np.random.default_rng(1)
    picks = [select_parent(pop, rng).model_id for _ in range(20000)]
    assert picks.count("p0") / 20000 == pytest.approx(0.5, abs=0.02)


def test_ties_break_by_creation(tiny_store):
    pop = population(tiny_store, [0, 0], scores=[0.5, 0.5])
    pop.reverse()
    assert select_parent(pop, np.random.default_rng(0)).model_id == "p0"


def test_config_validation():
    with pytest.raises(ValueError):
        agent_cfg(default_num_paths=4)
    with pytest.raises(ValueError):
        agent_cfg(ablation_mode="nope")
    with pytest.raises(ValueError):
        agent_cfg(forced_first_support="aux.path", support_path_exclusions=["aux.path"])
    with pytest.raises(ValueError):
        agent_cfg(main_path_id="tgt.path", forced_first_support="tgt.path")


def test_random_init_defaults(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg())
    m = agent.random_init_model(np.random.default_rng(0))
    assert m.hyperparams == Hyperparams(train_steps=40)
    assert m.main_path_id == "tgt.path" and len(m.support_path_ids) == 1
    assert m.support_path_ids[0] in ("aux.path", "base.path")


def test_random_init_copies_best_hyperparams(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg())
    pop = population(tiny_store, [5, 5])
    pop[0].hyperparams = Hyperparams(learning_rate=0.5, train_steps=40)
    agent.population = pop
    assert agent.random_init_model(np.random.default_rng(0)).hyperparams.learning_rate == 0.5


def test_forced_support_and_exclusions(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg(forced_first_support="base.path", default_num_paths=3))
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = agent.random_init_model(rng)
        assert m.support_path_ids == ["base.path", "aux.path"]
    agent = MultipathAgent(tiny_store, agent_cfg(support_path_exclusions=["aux.path"], default_num_paths=3))
    assert agent.random_init_model(rng).support_path_ids == ["base.path"]
    agent = MultipathAgent(tiny_store, agent_cfg(support_path_exclusions=["aux.path", "base.path"]))
    with pytest.raises(InsufficientPathsError):
        agent.random_init_model(rng)


def test_mutation_adjacency_and_offsprings(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg(mutation_probability=1.0))
    parent = population(tiny_store, [0])[0]
    parent.hyperparams = Hyperparams(learning_rate=0.0001, train_steps=40)
    child = agent.mutate(parent, np.random.default_rng(0))
    assert child.hyperparams.learning_rate == 0.0002
    assert parent.num_offsprings == 1 and child.parent_id == parent.model_id
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(50):
        p = population(tiny_store, [0])[0]
        seen.add(agent.mutate(p, rng).hyperparams.learning_rate)
    assert seen == {0.01, 0.05}


def test_mutation_respects_path_cap(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg(max_paths=3))
    parent = new_model(tiny_store, "p", "tgt", "tgt.path", ["aux.path", "base.path"])
    kinds = [c[0] for c in agent._candidates(parent)]
    assert "add" not in kinds and "remove" in kinds
    small = new_model(tiny_store, "q", "tgt", "tgt.path", ["aux.path"])
    kinds = [c[0] for c in agent._candidates(small)]
    assert "add" in kinds and "remove" not in kinds


def test_support_change_resets_router_and_copies(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg(mutation_probability=0.0))
    parent = new_model(tiny_store, "p", "tgt", "tgt.path", ["aux.path"])
    parent.router["w"][:] = 0.3
    parent.connectors[0]["w"][:] = 0.7
    rng = np.random.default_rng(0)
    for _ in range(40):
        child = agent.mutate(parent, rng)
        child.connectors[0]["w"][0, 0] = -5.0
        assert parent.connectors[0]["w"][0, 0] == 0.7
        if child.support_path_ids != parent.support_path_ids:
            assert child.num_paths == 3 and np.all(child.router["w"] == 0)
            assert np.all(child.connectors[1]["w"] == 0)
            break
    else:
        pytest.fail("no structural mutation in 40 tries")


def test_forced_support_never_removed(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg(forced_first_support="aux.path", mutation_probability=1.0))
    parent = new_model(tiny_store, "p", "tgt", "tgt.path", ["aux.path", "base.path"])
    rng = np.random.default_rng(0)
    for _ in range(30):
        child = agent.mutate(parent, rng)
        assert child.support_path_ids[0] == "aux.path"


def test_unit_lr_ablation_pins_multiplier(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg(ablation_mode="unit_lr_multiplier", mutation_probability=1.0))
    assert "router_lr_multiplier" not in agent.config.tunable()
    m = agent.random_init_model(np.random.default_rng(0))
    assert m.hyperparams.router_lr_multiplier == 1.0
    assert agent.mutate(m, np.random.default_rng(0)).hyperparams.router_lr_multiplier == 1.0


def test_cycle_invariants(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg(cycles=3))
    reports = agent.run()
    best = [r["best_validation"] for r in reports]
    assert best == sorted(best)
    by_id = {m.model_id: m for m in agent.population}
    for m in agent.population:
        if m.parent_id is not None:
            assert m.score > by_id[m.parent_id].score
    for r in reports:
        assert r["best_model"] in tiny_store.models
    for m in agent.population:
        for name, values in SEARCH_SPACE.items():
            assert getattr(m.hyperparams, name) in values
    assert reports[-1]["best_test"] == tiny_store.models[reports[-1]["best_model"]]["test_score"]


def test_cycle_determinism_across_worker_counts(tiny_store_master):
    runs = []
    for workers in (1, 1, 3):
        agent = MultipathAgent(tiny_store_master.copy(), agent_cfg(workers=workers))
        runs.append(agent.run())
    assert runs[0] == runs[1] == runs[2]


def test_sum_ablation_has_no_router(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg(ablation_mode="sum_aggregation"))
    agent.run()
    assert all(m.router is None and m.mode == "sum" for m in agent.population)
    assert all(not h["router_params"] for h in agent.history)


def test_save_and_resume(tiny_store_master, tmp_path):
    straight = MultipathAgent(tiny_store_master.copy(), agent_cfg(cycles=3))
    straight.run()
    first = MultipathAgent(tiny_store_master.copy(), agent_cfg(cycles=3))
    first.run(1)
    first.save(tmp_path / "a")
    resumed = MultipathAgent.load(tmp_path / "a")
    resumed.run(2)
    assert resumed.reports == straight.reports
    assert resumed.history == straight.history


def test_replicas_aggregate(tiny_store_master):
    agents, rows = run_replicas(tiny_store_master, agent_cfg(cycles=1), 1)
    assert rows[0]["val_mean"] == agents[0].reports[0]["best_validation"] and rows[0]["val_sem"] == 0
    agents, rows = run_replicas(tiny_store_master, agent_cfg(cycles=1), 3, derive_seeds=False)
    assert rows[0]["val_sem"] == 0 and rows[0]["n"] == 3
    assert not tiny_store_master.models


def test_aggregate_reports_math():
    reps = [[{"best_validation": v, "best_test": t}] for v, t in [(0.5, 0.4), (0.7, 0.6), (0.6, 0.8)]]
    (row,) = aggregate_reports(reps)
    assert row["val_mean"] == pytest.approx(0.6) and row["val_max"] == 0.7
    assert row["val_sem"] == pytest.approx(np.std([0.5, 0.7, 0.6], ddof=1) / np.sqrt(3))


def test_offspring_counts_match_children(tiny_store):
    agent = MultipathAgent(tiny_store, agent_cfg(cycles=3, samples_per_cycle=6))
    agent.run()
    children = {}
    for h in agent.history:
        if h["parent_id"] is not None:
            children[h["parent_id"]] = children.get(h["parent_id"], 0) + 1
    for m in agent.population:
        assert m.num_offsprings == children.get(m.model_id, 0)
