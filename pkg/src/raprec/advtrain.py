"""Alternating min-max training of the recommender against the attacker.

Per mini-batch: one recommender step on ``L_R - alpha * L_P`` (the attacker
term reaches the recommender only through the user/item embeddings it
reads), recompute top-K lists, then one attacker step on ``L_P``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nnkernel as nn
from .attacker import (MAX_SEQ_LEN, ItemListSequence, attacker_loss, init_attacker, order_items,
                       pad_sequences, param_names)
from .dataio import ATTRIBUTES, AttributeTable, RatingDataset
from .nnkernel import AdamState, ParameterSet
from .recommender import (TripletBatch, bpr_data_loss, init_recommender, l2_penalty,
                          sample_triplets, top_k_batch)

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lam: float = 0.01
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    dim: int = 70
    rec_hidden: int = 20
    att_hidden: int = 100
    K: int = 35
    seed: int = 0
    attributes: tuple[str, ...] = ATTRIBUTES
    max_seq_len: int = MAX_SEQ_LEN
    negatives_per_positive: int = 1
    rec_init_scale: float = 1.0
    att_init_scale: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.attributes = tuple(self.attributes)
        unknown = set(self.attributes) - set(ATTRIBUTES)
        if unknown or not self.attributes:
            raise ValueError(f"attribute mask must be a non-empty subset of {ATTRIBUTES}")


@dataclass
class TrainState:
    rec: ParameterSet
    att: ParameterSet
    rec_opt: AdamState
    att_opt: AdamState
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)

    def write_log(self, path: str | Path, cfg: TrainConfig) -> None:
        Path(path).write_text(json.dumps({"config": asdict(cfg), "seed": cfg.seed,
                                          "epochs": self.history}, indent=1))


def _streams(seed: int):
    rec_init, att_init, batches, triplets = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(rec_init), np.random.default_rng(att_init),
            np.random.default_rng(batches), np.random.default_rng(triplets))


def init_state(cfg: TrainConfig, num_users: int, num_items: int) -> TrainState:
    rng_rec, rng_att, _, _ = _streams(cfg.seed)
    rec = init_recommender(num_users, num_items, cfg.dim, cfg.rec_hidden, rng_rec, cfg.rec_init_scale)
    att = init_attacker(cfg.dim, cfg.att_hidden, rng_att, cfg.attributes, cfg.att_init_scale)
    return TrainState(rec, att, AdamState(lr=cfg.lr), AdamState(lr=cfg.lr))


@dataclass
class SequenceBatch:
    users: np.ndarray
    idx: np.ndarray
    mask: np.ndarray
    labels: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.users)


def build_item_lists(state: TrainState, batch_users, K: int, train: RatingDataset,
                     rated_mask: np.ndarray | None = None) -> dict[int, ItemListSequence]:
    """S_h = I_h followed by the current top-K unrated items, per user."""
    batch_users = np.asarray(batch_users, dtype=np.int64)
    rated_mask = train.rated_mask() if rated_mask is None else rated_mask
    if K > 0:
        recs = top_k_batch(state.rec, batch_users, rated_mask, K)
    else:
        recs = {int(u): np.empty(0, dtype=np.int64) for u in batch_users}
    return {int(u): order_items(u, train.rated(u), train.rated_timestamps(u), recs[int(u)])
            for u in batch_users}


def _sequence_batch(seqs: dict[int, ItemListSequence], attrs: AttributeTable, attributes,
                    max_len: int) -> SequenceBatch:
    users = np.array(sorted(seqs), dtype=np.int64)
    idx, mask = pad_sequences([seqs[int(u)] for u in users], max_len)
    labels = {t: attrs.labels(t, users) for t in attributes}
    return SequenceBatch(users, idx, mask, labels)


def _finite(value: float, what: str, state: TrainState) -> float:
    if not np.isfinite(value):
        norms = {n: float(np.linalg.norm(t.data)) for n, t in state.rec.items()}
        norms.update({n: float(np.linalg.norm(t.data)) for n, t in state.att.items()})
        raise NonFiniteLossError(f"{what} is {value} at epoch {state.epoch} step {state.step}; "
                                 f"parameter norms: {norms}")
    return value


def recommender_objective(state: TrainState, triplets: TripletBatch, seq: SequenceBatch | None,
                          cfg: TrainConfig):
    """Returns (objective, data BPR loss, attacker loss or None) as tensors."""
    data_loss = bpr_data_loss(state.rec, triplets)
    obj = data_loss
    att_loss = None
    if cfg.alpha != 0 and seq is not None and len(seq):
        with state.att.frozen():
            att_loss = attacker_loss(state.att, state.rec, seq.users, seq.idx, seq.mask,
                                     seq.labels, cfg.attributes)
        obj = nn.sub(obj, nn.mul(att_loss, cfg.alpha))
    if cfg.lam:
        obj = nn.add(obj, nn.mul(l2_penalty(state.rec), cfg.lam))
    return obj, data_loss, att_loss


def recommender_update(state: TrainState, triplets: TripletBatch, seq: SequenceBatch | None,
                       cfg: TrainConfig) -> tuple[float, float]:
    """One Adam step on the recommender parameters only."""
    state.rec.zero_grad()
    obj, data_loss, att_loss = recommender_objective(state, triplets, seq, cfg)
    _finite(obj.item(), "recommender objective", state)
    obj.backward()
    nn.adam_step(state.rec, state.rec_opt)
    return data_loss.item(), (att_loss.item() if att_loss is not None else float("nan"))


def attacker_update(state: TrainState, seq: SequenceBatch, cfg: TrainConfig) -> float:
    """One Adam step minimizing the attacker loss over the enabled heads only."""
    names = [n for t in cfg.attributes for n in param_names(t)]
    for n in names:
        state.att[n].zero_grad()
    with state.rec.frozen():
        loss = attacker_loss(state.att, state.rec, seq.users, seq.idx, seq.mask, seq.labels,
                             cfg.attributes)
    obj = nn.add(loss, nn.mul(l2_penalty(state.att, names), cfg.lam)) if cfg.lam else loss
    _finite(obj.item(), "attacker loss", state)
    obj.backward()
    nn.adam_step(state.att, state.att_opt, names)
    return loss.item()


def _epoch_batches(users: np.ndarray, batch_size: int, rng: np.random.Generator):
    perm = users[rng.permutation(len(users))]
    return [perm[s:s + batch_size] for s in range(0, len(perm), batch_size)]


def fit(cfg: TrainConfig, train: RatingDataset, attrs: AttributeTable,
        train_users=None, callback: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run the alternating min-max loop for ``cfg.epochs`` epochs.

    Every user with a non-empty profile contributes ranking triplets; only
    users whose labels are visible in ``attrs`` (and listed in
    ``train_users`` when given) feed the attacker.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    labeled = attrs.visible_users() if train_users is None else np.asarray(train_users)
    attrs = attrs.restricted(labeled)
    labeled_mask = np.zeros(train.num_users, dtype=bool)
    labeled_mask[attrs.visible_users()] = True

    state = init_state(cfg, train.num_users, train.num_items)
    _, _, rng_batches, rng_triplets = _streams(cfg.seed)
    rated_mask = train.rated_mask()
    active = np.flatnonzero(train.profile_sizes() > 0)

    for _ in range(cfg.epochs):
        t0 = time.perf_counter()
        rec_losses, att_losses = [], []
        for batch in _epoch_batches(active, cfg.batch_size, rng_batches):
            triplets = sample_triplets(train, batch, cfg.negatives_per_positive, rng_triplets,
                                       rated_mask)
            lab = batch[labeled_mask[batch]]
            seq = None
            if len(lab) and cfg.alpha != 0:
                seq = _sequence_batch(build_item_lists(state, lab, cfg.K, train, rated_mask),
                                      attrs, cfg.attributes, cfg.max_seq_len)
            r_loss, _ = recommender_update(state, triplets, seq, cfg)
            rec_losses.append(r_loss)
            if len(lab):
                seq = _sequence_batch(build_item_lists(state, lab, cfg.K, train, rated_mask),
                                      attrs, cfg.attributes, cfg.max_seq_len)
                att_losses.append(attacker_update(state, seq, cfg))
            state.step += 1
            if callback is not None:
                callback(state)
        state.epoch += 1
        entry = {"epoch": state.epoch,
                 "rec_loss": float(np.mean(rec_losses)),
                 "att_loss": float(np.mean(att_losses)) if att_losses else None,
                 "wall_time": time.perf_counter() - t0}
        state.history.append(entry)
        log.info("epoch %d: L_R %.4f L_P %s (%.1fs)", state.epoch, entry["rec_loss"],
                 entry["att_loss"], entry["wall_time"])
    return state


def train_recommender(cfg: TrainConfig, train: RatingDataset,
                      callback: Callable[[TrainState], None] | None = None) -> TrainState:
    """Ranking-only training (no attacker); the same RNG streams as ``fit``."""
    if len(train) == 0:
        raise ValueError("empty training set")
    state = init_state(cfg, train.num_users, train.num_items)
    _, _, rng_batches, rng_triplets = _streams(cfg.seed)
    rated_mask = train.rated_mask()
    active = np.flatnonzero(train.profile_sizes() > 0)
    for _ in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for batch in _epoch_batches(active, cfg.batch_size, rng_batches):
            triplets = sample_triplets(train, batch, cfg.negatives_per_positive, rng_triplets,
                                       rated_mask)
            state.rec.zero_grad()
            loss = bpr_data_loss(state.rec, triplets)
            obj = nn.add(loss, nn.mul(l2_penalty(state.rec), cfg.lam)) if cfg.lam else loss
            _finite(obj.item(), "ranking loss", state)
            obj.backward()
            nn.adam_step(state.rec, state.rec_opt)
            losses.append(loss.item())
            state.step += 1
            if callback is not None:
                callback(state)
        state.epoch += 1
        state.history.append({"epoch": state.epoch, "rec_loss": float(np.mean(losses)),
                              "att_loss": None, "wall_time": time.perf_counter() - t0})
    return state
