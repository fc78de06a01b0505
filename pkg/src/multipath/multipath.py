"""Multipath models: frozen main and support paths joined by trainable
connectors and a per-sample router."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .hparams import Hyperparams
from .nn import dense, zero_dense
from .store import ModuleDef, RepresentationCache, StoreError, SystemStore

AGGREGATION_MODES = ("decoupled", "standard", "sum", "ema_decoupled")
DEFAULT_MAIN_WEIGHT = 0.8
DEFAULT_EMA_DECAY = 0.99
NORMALIZATION_TOL = 1e-6


class ContractError(ValueError):
    pass


def init_router_bias(w_main_star: float, num_paths: int) -> np.ndarray:
    """Bias giving the main path weight ``w_main_star`` and the support
    paths an equal share of the rest, when the router kernel is zero."""
    if not 0.0 < w_main_star < 1.0:
        raise ValueError(f"main path weight must be in (0, 1), got {w_main_star}")
    if num_paths < 2:
        raise ValueError("need at least one support path")
    b = np.zeros(num_paths)
    b[0] = math.log((num_paths - 1) / (1.0 / w_main_star - 1.0))
    return b


def init_router(main_dim: int, num_paths: int, w_main_star: float = DEFAULT_MAIN_WEIGHT,
                zero_bias: bool = False) -> dict[str, np.ndarray]:
    params = zero_dense(main_dim, num_paths)
    if not zero_bias:
        params["b"] = init_router_bias(w_main_star, num_paths)
    return params


def prior_weights(num_paths: int, w_main_star: float = DEFAULT_MAIN_WEIGHT, zero_bias: bool = False) -> np.ndarray:
    if zero_bias:
        return np.full(num_paths, 1.0 / num_paths)
    return np.array([w_main_star] + [(1 - w_main_star) / (num_paths - 1)] * (num_paths - 1))


def scale_router_gradient(o: ad.Tensor, lr_multiplier: float) -> ad.Tensor:
    """Forward identity, backward scaled by ``lr_multiplier``.

    Same expression as ``l*o + (1-l)*stop(o)``, arranged as
    ``stop(o) + l*(o - stop(o))`` so the forward value is exactly ``o``.
    """
    frozen = ad.stopgradient(o)
    return frozen + ad.scale(o - frozen, lr_multiplier)


def route(router: dict[str, ad.Tensor], main_logits: ad.Tensor, lr_multiplier: float = 1.0) -> ad.Tensor:
    """Per-sample path weights conditioned on the main path logits."""
    if main_logits.shape[-1] != router["w"].shape[0]:
        raise ad.ShapeError(f"router expects {router['w'].shape[0]} inputs, got {main_logits.shape[-1]}")
    o = ad.softmax(ad.linear(main_logits, router["w"], router["b"]), axis=-1)
    return scale_router_gradient(o, lr_multiplier)


def aggregate(reps: list[ad.Tensor], weights: ad.Tensor | None, mode: str = "decoupled",
              ema: np.ndarray | None = None) -> ad.Tensor:
    """Combine per-path logits ``reps`` (each ``b x c``) with per-sample ``weights``.

    decoupled: forward ``R.w``; the paths get the gradient of ``R.1`` and the
    router the gradient of ``stop(R).w``.  standard: plain ``R.w``.  sum:
    ``R.1``, weights ignored.  ema_decoupled: like decoupled but the paths
    see ``R.(w / ema)`` in the backward pass.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    shapes = {r.shape for r in reps}
    if len(shapes) != 1:
        raise ad.ShapeError(f"representations differ in shape: {sorted(shapes)}")
    stacked = ad.stack(reps, axis=-1)
    if mode == "sum":
        return ad.sum(stacked, axis=2)
    b, _, m = stacked.shape
    if weights is None or weights.shape != (b, m):
        raise ad.ShapeError(f"weights must be {(b, m)}, got {None if weights is None else weights.shape}")
    if np.max(np.abs(weights.data.sum(axis=1) - 1.0)) > NORMALIZATION_TOL:
        raise ContractError("routing weights are not normalised")
    if mode == "standard":
        return ad.batched_matvec(stacked, weights)
    forward = ad.batched_matvec(ad.stopgradient(stacked), weights)
    if mode == "decoupled":
        unweighted = ad.sum(stacked, axis=2)
    else:
        if ema is None:
            raise ValueError("ema_decoupled needs the moving averages")
        ratio = ad.constant(weights.data / ema)
        unweighted = ad.batched_matvec(stacked, ratio)
    # evaluates to +0.0 exactly, so the forward value is untouched
    return forward + (unweighted - ad.stopgradient(unweighted))


def update_ema(ema: np.ndarray, weights: np.ndarray, decay: float = DEFAULT_EMA_DECAY) -> np.ndarray:
    return decay * ema + (1.0 - decay) * weights.mean(axis=0)


@dataclass
class MultipathModel:
    model_id: str
    task_id: str
    main_path_id: str
    support_path_ids: list[str]
    connectors: list[dict[str, np.ndarray]]
    router: dict[str, np.ndarray] | None
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    mode: str = "decoupled"
    w_main_star: float = DEFAULT_MAIN_WEIGHT
    zero_bias_init: bool = False
    ema: np.ndarray | None = None
    ema_decay: float = DEFAULT_EMA_DECAY
    score: float | None = None
    test_score: float | None = None
    parent_id: str | None = None
    num_offsprings: int = 0
    created: int = 0

    def __post_init__(self):
        if self.mode not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if len(self.support_path_ids) < 1:
            raise ContractError("a multipath model needs at least one support path")
        if len(set(self.support_path_ids)) != len(self.support_path_ids):
            raise ContractError("duplicate support paths")
        if self.main_path_id in self.support_path_ids:
            raise ContractError("the main path cannot also be a support path")
        if len(self.connectors) != len(self.support_path_ids):
            raise ContractError("one connector per support path")
        if (self.router is None) != (self.mode == "sum"):
            raise ContractError("a router is used by every mode except sum")
        if self.mode == "ema_decoupled" and self.ema is None:
            self.ema = prior_weights(self.num_paths, self.w_main_star, self.zero_bias_init)

    @property
    def num_paths(self) -> int:
        return 1 + len(self.support_path_ids)

    def genome(self) -> tuple:
        return (tuple(self.support_path_ids), self.hyperparams.genome_key())

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, c in enumerate(self.connectors):
            out[f"connector{i}.w"], out[f"connector{i}.b"] = c["w"], c["b"]
        if self.router is not None:
            out["router.w"], out["router.b"] = self.router["w"], self.router["b"]
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            owner, key = name.split(".")
            target = self.router if owner == "router" else self.connectors[int(owner[len("connector"):])]
            target[key] = np.array(value, dtype=np.float64, copy=True)

    def clone(self, model_id: str) -> "MultipathModel":
        child = copy.deepcopy(self)
        child.model_id = model_id
        child.score = child.test_score = None
        child.parent_id = self.model_id
        child.num_offsprings = 0
        return child

    def reset_router(self) -> None:
        if self.router is not None:
            main_dim = self.router["w"].shape[0]
            self.router = init_router(main_dim, self.num_paths, self.w_main_star, self.zero_bias_init)
        if self.mode == "ema_decoupled":
            self.ema = prior_weights(self.num_paths, self.w_main_star, self.zero_bias_init)

    def to_record(self) -> dict:
        return {
            "model_id": self.model_id, "task_id": self.task_id,
            "main_path_id": self.main_path_id, "support_path_ids": list(self.support_path_ids),
            "hyperparams": self.hyperparams.to_dict(), "mode": self.mode,
            "w_main_star": self.w_main_star, "zero_bias_init": self.zero_bias_init,
            "ema": None if self.ema is None else self.ema.tolist(), "ema_decay": self.ema_decay,
            "score": self.score, "test_score": self.test_score, "parent_id": self.parent_id,
            "num_offsprings": self.num_offsprings, "created": self.created,
        }

    @classmethod
    def from_record(cls, rec: dict, params: dict[str, np.ndarray]) -> "MultipathModel":
        n = len(rec["support_path_ids"])
        connectors = [{"w": params[f"connector{i}.w"].copy(), "b": params[f"connector{i}.b"].copy()}
                      for i in range(n)]
        router = None
        if "router.w" in params:
            router = {"w": params["router.w"].copy(), "b": params["router.b"].copy()}
        return cls(rec["model_id"], rec["task_id"], rec["main_path_id"], list(rec["support_path_ids"]),
                   connectors, router, Hyperparams.from_dict(rec["hyperparams"]), rec["mode"],
                   rec["w_main_star"], rec["zero_bias_init"],
                   None if rec["ema"] is None else np.array(rec["ema"]), rec["ema_decay"],
                   rec["score"], rec["test_score"], rec["parent_id"], rec["num_offsprings"], rec["created"])

    def module_defs(self) -> list[ModuleDef]:
        """Connector and router modules, named after this model, for publishing."""
        mods = [ModuleDef(f"{self.model_id}/connector{i}", "connector", dict(c),
                          last_trained_task=self.task_id, parent_module_id=pid)
                for i, (pid, c) in enumerate(zip(self.support_path_ids, self.connectors))]
        if self.router is not None:
            mods.append(ModuleDef(f"{self.model_id}/router", "router", dict(self.router),
                                  last_trained_task=self.task_id))
        return mods


def new_model(store: SystemStore, model_id: str, task_id: str, main_path_id: str, support_path_ids,
              hyperparams: Hyperparams | None = None, mode: str = "decoupled",
              w_main_star: float = DEFAULT_MAIN_WEIGHT, zero_bias_init: bool = False) -> MultipathModel:
    """Fresh model: zero connectors, router biased towards the main path."""
    if not support_path_ids:
        raise ContractError("a multipath model needs at least one support path")
    for pid in [main_path_id, *support_path_ids]:
        if pid not in store.paths:
            raise StoreError(f"unknown path {pid}")
        for mod in store.path_modules(pid):
            if not mod.frozen:
                raise ContractError(f"path {pid} is not frozen")
    if store.paths[main_path_id].task_id != task_id:
        raise ContractError(f"main path {main_path_id} does not solve task {task_id}")
    out_dim = store.tasks[task_id].num_classes
    connectors = [zero_dense(store.tasks[store.paths[p].task_id].num_classes, out_dim) for p in support_path_ids]
    router = None
    if mode != "sum":
        router = init_router(out_dim, 1 + len(support_path_ids), w_main_star, zero_bias_init)
    return MultipathModel(model_id, task_id, main_path_id, list(support_path_ids), connectors, router,
                          hyperparams or Hyperparams(), mode, w_main_star, zero_bias_init)


def forward(model: MultipathModel, main: ad.Tensor, supports: list[ad.Tensor],
            params: dict[str, ad.Tensor] | None = None, lr_multiplier: float | None = None):
    """Aggregated logits and routing weights (``None`` in sum mode).

    ``params`` maps parameter names to tensors (tape leaves when training);
    by default the model's own arrays are used as constants.
    """
    if params is None:
        params = {k: ad.Tensor(v) for k, v in model.params().items()}
    if lr_multiplier is None:
        lr_multiplier = model.hyperparams.router_lr_multiplier
    reps = [main]
    for i, s in enumerate(supports):
        reps.append(dense(s, {"w": params[f"connector{i}.w"], "b": params[f"connector{i}.b"]}))
    if model.mode == "sum":
        return aggregate(reps, None, "sum"), None
    weights = route({"w": params["router.w"], "b": params["router.b"]}, main, lr_multiplier)
    return aggregate(reps, weights, model.mode, model.ema), weights


def path_inputs(model: MultipathModel, cache: RepresentationCache, split: str, indices):
    """Cached frozen-path logits for samples of the model's task."""
    main = cache.get_batch(model.main_path_id, split, indices, model.task_id)
    supports = [cache.get_batch(p, split, indices, model.task_id) for p in model.support_path_ids]
    return main, supports


def assemble_and_forward(model: MultipathModel, cache: RepresentationCache, split: str, indices):
    """Eval-mode logits and routing weights as numpy arrays."""
    if cache.store.paths[model.main_path_id].task_id != model.task_id:
        raise ContractError("main path does not belong to the model's task")
    main, supports = path_inputs(model, cache, split, indices)
    logits, weights = forward(model, ad.Tensor(main), [ad.Tensor(s) for s in supports])
    return logits.data, None if weights is None else weights.data


def publish(store: SystemStore, model: MultipathModel) -> str:
    """Freeze ``model``'s connectors and router into ``store``."""
    mods = model.module_defs()
    record = model.to_record()
    record["connector_ids"] = [m.module_id for m in mods if m.kind == "connector"]
    record["router_id"] = next((m.module_id for m in mods if m.kind == "router"), None)
    return store.publish_model(record, mods)


def published_model(store: SystemStore, model_id: str) -> MultipathModel:
    """Rebuild a published model from its record and frozen modules."""
    if model_id not in store.models:
        raise StoreError(f"unknown model {model_id}")
    rec = store.models[model_id]
    params = {}
    for i, cid in enumerate(rec["connector_ids"]):
        params[f"connector{i}.w"] = store.modules[cid].params["w"]
        params[f"connector{i}.b"] = store.modules[cid].params["b"]
    if rec.get("router_id"):
        params["router.w"] = store.modules[rec["router_id"]].params["w"]
        params["router.b"] = store.modules[rec["router_id"]].params["b"]
    fields_ = {k: v for k, v in rec.items() if k not in ("connector_ids", "router_id")}
    return MultipathModel.from_record(fields_, params)
