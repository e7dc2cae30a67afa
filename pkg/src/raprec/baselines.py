"""Comparison defenses: attribute-aware profile padding and randomized response."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .advtrain import TrainConfig, TrainState, train_recommender
from .dataio import NUM_CLASSES, AttributeTable, RatingDataset
from .recommender import top_k_batch

BASELINES = ("original", "blurme", "ldp")

log = logging.getLogger(__name__)

# rating r <-> category r; 0 means "unrated"
NUM_CATEGORIES = 6


def _user_rng(seed: int, user: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, user, salt])


def class_rating_rates(ds: RatingDataset, labels: np.ndarray, users: np.ndarray,
                       num_classes: int) -> np.ndarray:
    """P(item rated | class), estimated over ``users``; shape (C, M)."""
    mask = ds.rated_mask()
    rates = np.zeros((num_classes, ds.num_items))
    for c in range(num_classes):
        members = users[labels[users] == c]
        if len(members):
            rates[c] = mask[members].mean(axis=0)
    return rates


def blurme_obfuscate(ds: RatingDataset, attrs: AttributeTable, attribute: str, k_add=None,
                     seed: int = 0, reference_users=None, frac_add: float = 0.1) -> RatingDataset:
    """Pad each profile with items that lean toward classes other than the user's own.

    An item's pull for a user of class ``c`` is
    ``max_{c' != c} P(rated | c') - P(rated | c)``; the ``k_add`` strongest
    unrated items are added with the item's average rating rounded to 1..5.
    ``k_add=None`` means ``round(frac_add * profile size)`` per user.

    Each user reads only their own label (a client-side defense); class rates
    come from ``reference_users``, which must be visible in ``attrs``.
    """
    C = NUM_CLASSES[attribute]
    all_users = np.arange(ds.num_users)
    ref = attrs.visible_users() if reference_users is None else np.asarray(reference_users)
    ref_labels = np.full(ds.num_users, -1)
    ref_labels[ref] = attrs.labels(attribute, ref)
    rates = class_rating_rates(ds, ref_labels, ref, C)

    sums = np.bincount(ds.items, weights=ds.scores, minlength=ds.num_items)
    counts = np.bincount(ds.items, minlength=ds.num_items)
    overall = ds.scores.mean() if len(ds) else 3.0
    avg = np.where(counts > 0, sums / np.maximum(counts, 1), overall)
    fill = np.clip(np.floor(avg + 0.5), 1, 5).astype(np.int64)

    # pull[c] = max over other classes of the rate gap
    pull = np.empty((C, ds.num_items))
    for c in range(C):
        others = np.delete(rates, c, axis=0)
        pull[c] = others.max(axis=0) - rates[c]

    own = getattr(attrs, attribute)  # each user's own label, read client-side
    rated = ds.rated_mask()
    sizes = ds.profile_sizes()
    add_u, add_i, add_t = [], [], []
    for u in all_users:
        k = int(round(frac_add * sizes[u])) if k_add is None else int(k_add)
        if k <= 0:
            continue
        free = np.flatnonzero(~rated[u])
        if k > len(free):
            log.warning("user %d: k_add=%d capped at %d unrated items", u, k, len(free))
            k = len(free)
        score = pull[own[u], free]
        # ties broken randomly per user
        jitter = _user_rng(seed, int(u), 11).random(len(free))
        pick = free[np.lexsort((jitter, -score))[:k]]
        add_u.append(np.full(k, u))
        add_i.append(pick)
        last = ds.rated_timestamps(u)
        add_t.append(np.full(k, int(last[-1]) + 1 if len(last) else 0))
    if not add_u:
        return ds
    items = np.concatenate(add_i)
    return ds.with_added(np.concatenate(add_u), items, fill[items], np.concatenate(add_t))


def keep_probability(epsilon: float, k: int = NUM_CATEGORIES) -> float:
    return float(np.exp(epsilon) / (np.exp(epsilon) + k - 1))


def randomized_response(values: np.ndarray, epsilon: float, rng: np.random.Generator,
                        k: int = NUM_CATEGORIES) -> np.ndarray:
    """k-ary randomized response: keep w.p. e^eps/(e^eps+k-1), else a uniform other value."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    values = np.asarray(values, dtype=np.int64)
    keep = rng.random(values.shape) < keep_probability(epsilon, k)
    # uniform over the k-1 other categories
    other = rng.integers(0, k - 1, size=values.shape)
    other = other + (other >= values)
    return np.where(keep, values, other)


def ldp_perturb(ds: RatingDataset, epsilon: float, seed: int = 0) -> RatingDataset:
    """Randomized response over the six rating categories {unrated, 1..5}.

    Each user's item universe is their rated items plus an equally sized
    uniform sample of unrated ones; items whose reported category is 0 are
    dropped from the output.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    rated = ds.rated_mask()
    score_of = np.zeros((ds.num_users, ds.num_items), dtype=np.int64)
    score_of[ds.users, ds.items] = ds.scores
    out_u, out_i, out_r, out_t = [], [], [], []
    for u in range(ds.num_users):
        rng = _user_rng(seed, u, 23)
        mine = np.flatnonzero(rated[u])
        free = np.flatnonzero(~rated[u])
        extra = rng.choice(free, size=min(len(mine), len(free)), replace=False)
        universe = np.concatenate([mine, np.sort(extra)])
        reported = randomized_response(score_of[u, universe], epsilon, rng)
        kept = reported > 0
        ts = ds.rated_timestamps(u)
        base = int(ts[-1]) if len(ts) else 0
        stamp = np.full(len(universe), base + 1)
        # original timestamps for items that were genuinely rated
        stamp[:len(mine)] = [t for _, t in sorted(zip(ds.rated(u), ts))] if len(mine) else []
        out_u.append(np.full(int(kept.sum()), u))
        out_i.append(universe[kept])
        out_r.append(reported[kept])
        out_t.append(stamp[kept])
    cat = lambda parts: np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    return RatingDataset(cat(out_u), cat(out_i), cat(out_r), cat(out_t), ds.num_users,
                         ds.num_items, ds.user_ids, ds.item_ids)


@dataclass
class BaselineRun:
    method: str
    data: RatingDataset
    state: TrainState
    recommendations: dict[int, np.ndarray]
    item_lists: dict[int, np.ndarray]


def run_baseline(method: str, cfg: TrainConfig, train: RatingDataset, attrs: AttributeTable,
                 users, l: int, attribute: str = "gender", reference_users=None,
                 k_add=None, frac_add: float = 0.1, epsilon: float = 1.0) -> BaselineRun:
    """Perturb ``train`` per ``method``, fit the ranking-only model on it, and
    return top-l recommendations and S_h = I_h | R_h for ``users``.

    ``attribute`` only matters for BlurMe, which is deployed per attribute.
    """
    if method not in BASELINES:
        raise ValueError(f"unknown baseline {method!r}; expected one of {BASELINES}")
    if method == "blurme":
        data = blurme_obfuscate(train, attrs, attribute, k_add, cfg.seed, reference_users, frac_add)
    elif method == "ldp":
        data = ldp_perturb(train, epsilon, cfg.seed)
    else:
        data = train
    state = train_recommender(replace(cfg, alpha=0.0), data)
    users = np.asarray(users, dtype=np.int64)
    recs = top_k_batch(state.rec, users, data.rated_mask(), l)
    lists = {int(u): np.union1d(data.rated(u), recs[int(u)]) for u in users}
    return BaselineRun(method, data, state, recs, lists)
