"""External attribute-inference adversary used only for evaluation.

A one-hidden-layer feed-forward classifier over the item-membership vector
of a user's item list.  It knows nothing about the recommender's internals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nnkernel as nn
from .dataio import NUM_CLASSES
from .metrics import micro_auc
from .nnkernel import AdamState, ParameterSet


def featurize(items, num_items: int) -> np.ndarray:
    x = np.zeros(num_items)
    items = np.asarray(list(items), dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= num_items):
        raise IndexError(f"item index out of range for {num_items} items")
    x[items] = 1.0
    return x


def featurize_many(lists, num_items: int) -> np.ndarray:
    return np.stack([featurize(s, num_items) for s in lists]) if len(lists) else np.zeros((0, num_items))


@dataclass
class AdversaryConfig:
    hidden: int = 100
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 32


def _forward(params: ParameterSet, X) -> nn.Tensor:
    h = nn.relu(nn.affine(X, params["W1"], params["b1"]))
    return nn.softmax(nn.affine(h, params["W2"], params["b2"]))


def train_adversary(X: np.ndarray, y: np.ndarray, num_classes: int, seed: int = 0,
                    cfg: AdversaryConfig | None = None) -> ParameterSet:
    """Fit the classifier with mini-batch Adam on mean cross-entropy."""
    cfg = AdversaryConfig() if cfg is None else cfg
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("adversary needs at least one training user")
    rng = np.random.default_rng([seed, num_classes, 7])
    d = X.shape[1]
    # Glorot-uniform weights
    lim1 = np.sqrt(6.0 / (d + cfg.hidden))
    lim2 = np.sqrt(6.0 / (cfg.hidden + num_classes))
    params = ParameterSet({
        "W1": rng.uniform(-lim1, lim1, size=(cfg.hidden, d)),
        "b1": np.zeros(cfg.hidden),
        "W2": rng.uniform(-lim2, lim2, size=(num_classes, cfg.hidden)),
        "b2": np.zeros(num_classes),
    })
    opt = AdamState(lr=cfg.lr)
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(X))
        for s in range(0, len(X), cfg.batch_size):
            rows = perm[s:s + cfg.batch_size]
            params.zero_grad()
            loss = nn.mean(nn.cross_entropy(_forward(params, X[rows]), y[rows]))
            loss.backward()
            nn.adam_step(params, opt)
    return params


def predict_proba(params: ParameterSet, X: np.ndarray) -> np.ndarray:
    with params.frozen():
        return _forward(params, np.asarray(X, dtype=np.float64)).data


def evaluate_attack(params: ParameterSet, X_test: np.ndarray, y_test: np.ndarray) -> float:
    """Micro-averaged one-vs-rest AUC on held-out users."""
    return micro_auc(y_test, predict_proba(params, X_test))


def write_attack_results(path: str | Path, results: dict[str, float], n_users: int,
                         seed: int) -> None:
    """Per attribute: AUC, the (users, classes) score-matrix shape, and the seed."""
    doc = {t: {"auc": auc, "scores_shape": [n_users, NUM_CLASSES[t]], "seed": seed}
           for t, auc in results.items()}
    Path(path).write_text(json.dumps(doc, indent=1))
