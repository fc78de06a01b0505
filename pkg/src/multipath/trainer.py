"""Training and scoring of sampled multipath models."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .hparams import SEARCH_SPACE
from .multipath import MultipathModel, forward, path_inputs, update_ema
from .store import FrozenModuleError, RepresentationCache

log = logging.getLogger(__name__)

NUM_EVALS = 4


def lr_schedule(step: int, total_steps: int, peak_lr: float, warmup_ratio: float) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay towards zero."""
    if warmup_ratio not in SEARCH_SPACE["warmup_ratio"]:
        raise ValueError(f"warmup ratio {warmup_ratio} not in {SEARCH_SPACE['warmup_ratio']}")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = math.ceil(warmup_ratio * total_steps)
    if step < warm:
        return peak_lr * step / warm
    progress = (step - warm) / max(1, total_steps - warm)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_apply(params: dict, grads: dict, velocity: dict, lr, momentum: float, nesterov: bool,
              frozen=()) -> dict:
    """One momentum SGD step.  ``lr`` is a float or a per-parameter dict.

    ``velocity`` is updated in place; new parameter arrays are returned so
    callers never write into arrays they do not own.
    """
    bad = sorted(set(grads) & set(frozen))
    if bad:
        raise FrozenModuleError(f"attempt to update frozen parameters: {bad}")
    out = dict(params)
    for name, g in grads.items():
        v = momentum * velocity.get(name, 0.0) + g
        velocity[name] = v
        step = momentum * v + g if nesterov else v
        rate = lr[name] if isinstance(lr, dict) else lr
        out[name] = params[name] - rate * step
    return out


@dataclass
class ScoreRecord:
    val_accuracies: list[float] = field(default_factory=list)
    best_index: int = 0
    best_params: dict = field(default_factory=dict)
    best_ema: np.ndarray | None = None
    test_accuracy: float | None = None
    diverged: bool = False
    optimizer_state_keys: list[str] = field(default_factory=list)
    log: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def score(self) -> float:
        return max(self.val_accuracies) if self.val_accuracies else 0.0


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    # argmax breaks ties towards the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def model_logits(model: MultipathModel, cache: RepresentationCache, split: str, indices=None):
    labels = cache.store.task_data(model.task_id).labels[split]
    if indices is None:
        indices = np.arange(len(labels))
    main, supports = path_inputs(model, cache, split, indices)
    logits, weights = forward(model, ad.Tensor(main), [ad.Tensor(s) for s in supports])
    return logits.data, None if weights is None else weights.data


def evaluate(model: MultipathModel, cache: RepresentationCache, split: str) -> float:
    if split not in ("validation", "test"):
        raise ValueError(f"evaluate expects validation or test, got {split!r}")
    logits, _ = model_logits(model, cache, split)
    return accuracy(logits, cache.store.task_data(model.task_id).labels[split])


def evaluate_path(cache: RepresentationCache, path_id: str, split: str, task_id: str | None = None) -> float:
    task_id = task_id or cache.store.paths[path_id].task_id
    logits = cache.get_split(path_id, split, task_id)
    return accuracy(logits, cache.store.task_data(task_id).labels[split])


def main_weight_mean(model: MultipathModel, cache: RepresentationCache, split: str = "validation") -> float:
    """Average routing weight of the main path; 1/|P| stand-in for sum mode."""
    _, weights = model_logits(model, cache, split)
    if weights is None:
        return 1.0 / model.num_paths
    return float(weights[:, 0].mean())


def eval_points(steps: int) -> list[int]:
    return [steps * (k + 1) // NUM_EVALS for k in range(NUM_EVALS)]


def train_and_score(model: MultipathModel, cache: RepresentationCache, seed, steps: int | None = None,
                    connector_lr_scale: float = 1.0, lr_multiplier: float | None = None) -> ScoreRecord:
    """Train the connectors and router of ``model`` in place and score it.

    Validation accuracy is measured at 4 evenly spaced points; the model is
    left holding the parameters of the best one.  A non-finite loss stops
    training and scores the model 0.  ``connector_lr_scale`` and
    ``lr_multiplier`` override the connector rate and the router gradient
    scale, for ablations outside the search space.
    """
    hp = model.hyperparams
    steps = hp.train_steps if steps is None else steps
    rng = np.random.default_rng(seed)
    labels = cache.store.task_data(model.task_id).labels["train"]
    n = len(labels)
    main_all, supports_all = path_inputs(model, cache, "train", np.arange(n))
    params = {k: v.copy() for k, v in model.params().items()}
    velocity: dict = {}
    lr_scale = {k: (connector_lr_scale if k.startswith("connector") else 1.0) for k in params}
    record = ScoreRecord()
    points = eval_points(steps)

    def checkpoint():
        model.set_params(params)
        acc = evaluate(model, cache, "validation")
        record.val_accuracies.append(acc)
        if acc > record.val_accuracies[record.best_index] or len(record.val_accuracies) == 1:
            record.best_index = len(record.val_accuracies) - 1
            record.best_params = {k: v.copy() for k, v in params.items()}
            record.best_ema = None if model.ema is None else model.ema.copy()

    for _ in range(points.count(0)):
        checkpoint()
    batch = min(hp.batch_size, n)
    for step in range(steps):
        idx = rng.choice(n, size=batch, replace=False)
        tape = ad.Tape()
        leaves = {k: tape.watch(v) for k, v in params.items()}
        logits, weights = forward(model, ad.Tensor(main_all[idx]),
                                  [ad.Tensor(s[idx]) for s in supports_all], leaves, lr_multiplier)
        loss = ad.cross_entropy_loss(logits, labels[idx])
        value = float(loss.data[0])
        if not math.isfinite(value):
            log.warning("model %s diverged at step %d; scored 0", model.model_id, step)
            record.diverged = True
            record.val_accuracies = [0.0] * NUM_EVALS
            record.best_index = 0
            break
        names = list(leaves)
        grads = dict(zip(names, ad.backward(loss, [leaves[k] for k in names])))
        lr = lr_schedule(step, steps, hp.learning_rate, hp.warmup_ratio)
        params = sgd_apply(params, grads, velocity, {k: lr * s for k, s in lr_scale.items()},
                           hp.momentum, hp.nesterov)
        if model.ema is not None and weights is not None:
            model.ema = update_ema(model.ema, weights.data, model.ema_decay)
        record.log.append((step, value, lr))
        for _ in range(points.count(step + 1)):
            checkpoint()
    record.optimizer_state_keys = sorted(velocity)
    if record.best_params:
        model.set_params(record.best_params)
        model.ema = record.best_ema
    model.score = record.score
    return record
