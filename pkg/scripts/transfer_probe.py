"""Check that support paths carry information the main path lacks.

Fits a multinomial logistic regression on the frozen main-path logits,
alone and concatenated with each support path's logits, and reports
validation accuracy.  A support path is informative when the joint probe
beats the main-only probe.

    python3 scripts/transfer_probe.py runs/store --task target
"""
import argparse

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from multipath.store import RepresentationCache, load_checkpoint


def fit_probe(x, y, num_classes, l2=1e-3):
    mu, sd = x.mean(0), x.std(0) + 1e-8
    z = (x - mu) / sd
    d = z.shape[1] + 1
    zb = np.hstack([z, np.ones((len(z), 1))])
    onehot = np.eye(num_classes)[y]

    def loss(flat):
        w = flat.reshape(d, num_classes)
        s = zb @ w
        p = np.exp(s - logsumexp(s, axis=1, keepdims=True))
        value = -np.mean(np.sum(onehot * (s - logsumexp(s, axis=1, keepdims=True)), axis=1)) + l2 * np.sum(w * w)
        g = zb.T @ (p - onehot) / len(y) + 2 * l2 * w
        return value, g.ravel()

    w = minimize(loss, np.zeros(d * num_classes), jac=True, method="L-BFGS-B").x.reshape(d, num_classes)
    return lambda xs: np.hstack([(xs - mu) / sd, np.ones((len(xs), 1))]) @ w


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("store")
    ap.add_argument("--task", required=True)
    args = ap.parse_args()
    store = load_checkpoint(args.store)
    cache = RepresentationCache(store)
    data = store.task_data(args.task)
    k = store.tasks[args.task].num_classes
    main_id = next(p for p, s in store.paths.items() if s.task_id == args.task)

    def feats(pids, split):
        return np.hstack([cache.get_split(p, split, args.task) for p in pids])

    def probe(pids):
        f = fit_probe(feats(pids, "train"), data.labels["train"], k)
        return float(np.mean(np.argmax(f(feats(pids, "validation")), 1) == data.labels["validation"]))

    print(f"main path {main_id} alone: {probe([main_id]):.4f}")
    for pid in sorted(store.paths):
        if pid != main_id:
            print(f"main + {pid}: {probe([main_id, pid]):.4f}")


if __name__ == "__main__":
    main()
