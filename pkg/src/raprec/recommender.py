"""Pairwise-ranking recommender: embeddings, shared hidden layer, BPR loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import nnkernel as nn
from .dataio import RatingDataset
from .nnkernel import ParameterSet, Tensor

log = logging.getLogger(__name__)

USER_EMBED = "rec.user_embed"
ITEM_EMBED = "rec.item_embed"
HIDDEN_W = "rec.hidden.W"
HIDDEN_B = "rec.hidden.b"
OUT_W = "rec.out.W"
OUT_B = "rec.out.b"


def init_recommender(num_users: int, num_items: int, dim: int = 70, hidden: int = 20,
                     rng: np.random.Generator | None = None, init_scale: float = 1.0) -> ParameterSet:
    """All weights drawn from Uniform[0, init_scale]."""
    rng = np.random.default_rng(0) if rng is None else rng
    shapes = {
        USER_EMBED: (num_users, dim),
        ITEM_EMBED: (num_items, dim),
        HIDDEN_W: (hidden, dim),
        HIDDEN_B: (hidden,),
        OUT_W: (1, 2 * hidden),
        OUT_B: (1,),
    }
    return ParameterSet({n: rng.uniform(0.0, init_scale, size=s) for n, s in shapes.items()})


def _tower(params: ParameterSet, embed: Tensor) -> Tensor:
    return nn.relu(nn.affine(embed, params[HIDDEN_W], params[HIDDEN_B]))


def _preference(params: ParameterSet, h_user: Tensor, h_item: Tensor) -> Tensor:
    return nn.relu(nn.affine(nn.concat([h_user, h_item]), params[OUT_W], params[OUT_B]))


def forward_pairs(params: ParameterSet, users, first, second) -> tuple[Tensor, Tensor]:
    """Preference outputs for (user, first) and (user, second), shape (n, 1)."""
    hu = _tower(params, nn.gather(params[USER_EMBED], users))
    hj = _tower(params, nn.gather(params[ITEM_EMBED], first))
    hk = _tower(params, nn.gather(params[ITEM_EMBED], second))
    return _preference(params, hu, hj), _preference(params, hu, hk)


def _check_index(params: ParameterSet, h: int, *items: int) -> None:
    if not 0 <= h < params[USER_EMBED].shape[0]:
        raise IndexError(f"user {h} out of range")
    for j in items:
        if not 0 <= j < params[ITEM_EMBED].shape[0]:
            raise IndexError(f"item {j} out of range")


def score_pair(params: ParameterSet, h: int, j: int, k: int) -> tuple[float, float]:
    _check_index(params, h, j, k)
    yj, yk = forward_pairs(params, np.array([h]), np.array([j]), np.array([k]))
    return float(yj.data[0, 0]), float(yk.data[0, 0])


def score_item(params: ParameterSet, h: int, j: int) -> float:
    """Preference of ``h`` for ``j``: average of both heads on the tuple (h, j, j)."""
    y, y_prime = score_pair(params, h, j, j)
    assert y == y_prime, "shared towers must give identical heads on (h, j, j)"
    return 0.5 * (y + y_prime)


def score_matrix(params: ParameterSet, users) -> np.ndarray:
    """Scores of every item for each user in ``users``, shape (len(users), M).

    Splits the output layer into its user and item halves so the item tower
    runs once for the whole catalogue.
    """
    W, b = params[HIDDEN_W].data, params[HIDDEN_B].data
    hu = np.maximum(params[USER_EMBED].data[np.asarray(users)] @ W.T + b, 0.0)
    hi = np.maximum(params[ITEM_EMBED].data @ W.T + b, 0.0)
    H = W.shape[0]
    wo = params[OUT_W].data[0]
    pre = (hu @ wo[:H])[:, None] + (hi @ wo[H:])[None, :] + params[OUT_B].data[0]
    return np.maximum(pre, 0.0)


def rank_unrated(scores: np.ndarray, rated: np.ndarray, K: int) -> np.ndarray:
    """Top-K columns of one score row, skipping ``rated`` (bool mask).

    Ties go to the lower item index.
    """
    n_free = scores.size - int(rated.sum())
    if K > n_free:
        raise ValueError(f"K={K} exceeds the {n_free} unrated items")
    if K == 0:
        return np.empty(0, dtype=np.int64)
    masked = np.where(rated, -np.inf, scores)
    # the K-th best value bounds the candidate set; stable sort restores the tie rule
    if K < masked.size:
        kth = np.partition(masked, masked.size - K)[masked.size - K]
        cand = np.flatnonzero(masked >= kth)
    else:
        cand = np.arange(masked.size)
    cand = cand[~rated[cand]]
    order = np.lexsort((cand, -masked[cand]))
    return cand[order[:K]]


def top_k(params: ParameterSet, h: int, train_rated, K: int) -> list[int]:
    M = params[ITEM_EMBED].shape[0]
    rated = np.zeros(M, dtype=bool)
    rated[list(train_rated)] = True
    return rank_unrated(score_matrix(params, [h])[0], rated, K).tolist()


def top_k_batch(params: ParameterSet, users, rated_mask: np.ndarray, K: int,
                chunk: int = 256) -> dict[int, np.ndarray]:
    """Top-K unrated items for many users; ``rated_mask`` is the (N, M) table."""
    users = np.asarray(users, dtype=np.int64)
    out: dict[int, np.ndarray] = {}
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        S = score_matrix(params, block)
        for row, u in enumerate(block):
            out[int(u)] = rank_unrated(S[row], rated_mask[u], K)
    return out


class Triplet(NamedTuple):
    user: int
    first: int
    second: int
    label: int


@dataclass(frozen=True)
class TripletBatch:
    """Column-oriented triplets (h, first, second, g)."""

    user: np.ndarray
    first: np.ndarray
    second: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    def __iter__(self) -> Iterator[Triplet]:
        for row in zip(self.user.tolist(), self.first.tolist(), self.second.tolist(),
                       self.label.tolist()):
            yield Triplet(*row)

    @classmethod
    def from_triplets(cls, triplets) -> "TripletBatch":
        cols = list(zip(*triplets)) or [(), (), (), ()]
        return cls(*(np.asarray(c, dtype=np.int64) for c in cols))


def sample_triplets(train: RatingDataset, users, negatives_per_positive: int = 1,
                    rng: np.random.Generator | None = None,
                    rated_mask: np.ndarray | None = None) -> TripletBatch:
    """One triplet per (positive, negative draw); negatives uniform over unrated items.

    Each triplet is flipped to (h, k, j) with label -1 with probability 1/2.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    rated_mask = train.rated_mask() if rated_mask is None else rated_mask
    cols_u, cols_j, cols_k = [], [], []
    for u in np.asarray(users, dtype=np.int64):
        pos = train.rated(u)
        if len(pos) == 0:
            continue
        unrated = np.flatnonzero(~rated_mask[u])
        if len(unrated) == 0:
            log.warning("user %d rated every item; no negatives to sample", u)
            continue
        j = np.repeat(pos, negatives_per_positive)
        cols_u.append(np.full(len(j), u))
        cols_j.append(j)
        cols_k.append(unrated[rng.integers(0, len(unrated), size=len(j))])
    if not cols_u:
        empty = np.empty(0, dtype=np.int64)
        return TripletBatch(empty, empty, empty, empty)
    u, j, k = (np.concatenate(c) for c in (cols_u, cols_j, cols_k))
    flip = rng.random(len(u)) < 0.5
    first = np.where(flip, k, j)
    second = np.where(flip, j, k)
    label = np.where(flip, -1, 1)
    return TripletBatch(u, first, second, label)


def bpr_data_loss(params: ParameterSet, batch: TripletBatch) -> Tensor:
    """Sum over triplets of -ln sigmoid(g (y_first - y_second)), averaged over users."""
    if len(batch) == 0:
        raise ValueError("bpr_loss needs a non-empty batch")
    y1, y2 = forward_pairs(params, batch.user, batch.first, batch.second)
    margin = nn.mul(nn.sub(y1, y2), batch.label.reshape(-1, 1).astype(np.float64))
    n_users = len(np.unique(batch.user))
    return nn.mul(nn.reduce_sum(nn.neg_log_sigmoid(margin)), 1.0 / n_users)


def l2_penalty(params: ParameterSet, names=None) -> Tensor:
    names = params.names() if names is None else names
    return nn.sum_of_squares([params[n] for n in names])


def bpr_loss(params: ParameterSet, batch: TripletBatch, lam: float) -> Tensor:
    loss = bpr_data_loss(params, batch)
    if lam:
        loss = nn.add(loss, nn.mul(l2_penalty(params), lam))
    return loss


def export_recommendations_csv(recs: dict[int, np.ndarray], params: ParameterSet, path) -> None:
    """CSV rows: user, rank, item, score (dense indices, rank from 1)."""
    with open(path, "w") as fh:
        fh.write("user,rank,item,score\n")
        for u in sorted(recs):
            scores = score_matrix(params, [u])[0]
            for rank, item in enumerate(recs[u], 1):
                fh.write(f"{u},{rank},{int(item)},{scores[item]:.17g}\n")
