"""Internal private-attribute attacker: one Elman RNN per attribute over the
embeddings of a user's item list, and a softmax head on [z; q_h]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnkernel as nn
from .dataio import ATTRIBUTES, NUM_CLASSES
from .nnkernel import ParameterSet, Tensor
from .recommender import ITEM_EMBED, USER_EMBED

MAX_SEQ_LEN = 200


def param_names(attribute: str) -> list[str]:
    p = f"att.{attribute}."
    return [p + "W_hh", p + "W_in", p + "b_h", p + "head.W", p + "head.b"]


def init_attacker(dim: int, hidden: int = 100, rng: np.random.Generator | None = None,
                  attributes=ATTRIBUTES, init_scale: float = 1.0,
                  num_classes: dict[str, int] | None = None) -> ParameterSet:
    """Weights drawn from Uniform[0, init_scale]; biases start at zero."""
    rng = np.random.default_rng(0) if rng is None else rng
    num_classes = NUM_CLASSES if num_classes is None else num_classes
    ps = ParameterSet()
    for t in attributes:
        C = num_classes[t]
        p = f"att.{t}."
        ps.add(p + "W_in", rng.uniform(0.0, init_scale, size=(hidden, dim)))
        ps.add(p + "W_hh", rng.uniform(0.0, init_scale, size=(hidden, hidden)))
        ps.add(p + "b_h", np.zeros(hidden))
        ps.add(p + "head.W", rng.uniform(0.0, init_scale, size=(C, hidden + dim)))
        ps.add(p + "head.b", np.zeros(C))
    return ps


def attributes_of(att_params: ParameterSet) -> list[str]:
    return [t for t in ATTRIBUTES if f"att.{t}.W_in" in att_params]


@dataclass(frozen=True)
class ItemListSequence:
    """S_h in model order; ``from_rated`` marks items that came from I_h."""

    user: int
    items: np.ndarray
    from_rated: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


def order_items(user: int, rated_items, rated_timestamps, recommended) -> ItemListSequence:
    """Rated items oldest-first, then recommended items in rank order.

    An item present in both sets appears once, in the rated segment.
    """
    rated_items = np.asarray(rated_items, dtype=np.int64)
    order = np.argsort(np.asarray(rated_timestamps), kind="stable")
    rated_sorted = rated_items[order]
    recommended = np.asarray(recommended, dtype=np.int64)
    fresh = recommended[~np.isin(recommended, rated_sorted)]
    items = np.concatenate([rated_sorted, fresh])
    flags = np.concatenate([np.ones(len(rated_sorted), bool), np.zeros(len(fresh), bool)])
    return ItemListSequence(int(user), items, flags)


def pad_sequences(seqs, max_len: int = MAX_SEQ_LEN) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad (and keep the last ``max_len`` items of) each sequence.

    Returns an index matrix (B, T) and a boolean mask of real steps.
    """
    seqs = [np.asarray(s.items if isinstance(s, ItemListSequence) else s, dtype=np.int64)[-max_len:]
            for s in seqs]
    T = max((len(s) for s in seqs), default=0)
    idx = np.zeros((len(seqs), T), dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for r, s in enumerate(seqs):
        if len(s):
            idx[r, T - len(s):] = s
            mask[r, T - len(s):] = True
    return idx, mask


def attacker_forward(att_params: ParameterSet, rec_params: ParameterSet, users,
                     idx: np.ndarray, mask: np.ndarray, attributes=None) -> dict[str, Tensor]:
    """Class-probability rows (B, C_t) for each attribute."""
    attributes = attributes_of(att_params) if attributes is None else attributes
    users = np.asarray(users, dtype=np.int64)
    q = nn.gather(rec_params[USER_EMBED], users)
    B = len(users)
    if idx.shape[1]:
        xs = nn.gather(rec_params[ITEM_EMBED], idx)
    out = {}
    for t in attributes:
        p = f"att.{t}."
        if t not in NUM_CLASSES:
            raise KeyError(f"unknown attribute {t!r}")
        W_in, W_hh, b_h = att_params[p + "W_in"], att_params[p + "W_hh"], att_params[p + "b_h"]
        if idx.shape[1]:
            z = nn.rnn_sequence(xs, W_in, W_hh, b_h, mask)
        else:
            z = Tensor(np.zeros((B, W_hh.shape[0])))
        logits = nn.affine(nn.concat([z, q]), att_params[p + "head.W"], att_params[p + "head.b"])
        out[t] = nn.softmax(logits)
    return out


def predict_attribute(att_params: ParameterSet, rec_params: ParameterSet,
                      seq: ItemListSequence, attribute: str, max_len: int = MAX_SEQ_LEN) -> np.ndarray:
    if f"att.{attribute}.W_in" not in att_params:
        raise KeyError(f"attacker has no head for attribute {attribute!r}")
    idx, mask = pad_sequences([seq], max_len)
    probs = attacker_forward(att_params, rec_params, [seq.user], idx, mask, [attribute])
    return probs[attribute].data[0]


def attacker_loss(att_params: ParameterSet, rec_params: ParameterSet, users, idx, mask,
                  labels: dict[str, np.ndarray], attributes=None) -> Tensor:
    """Mean over users of the mean over attributes of the cross-entropy."""
    attributes = attributes_of(att_params) if attributes is None else list(attributes)
    for t in attributes:
        if t not in labels or labels[t] is None or len(labels[t]) != len(users):
            raise KeyError(f"missing {t} labels for the batch")
    probs = attacker_forward(att_params, rec_params, users, idx, mask, attributes)
    per_attr = [nn.mean(nn.cross_entropy(probs[t], labels[t])) for t in attributes]
    total = per_attr[0]
    for term in per_attr[1:]:
        total = nn.add(total, term)
    return nn.mul(total, 1.0 / len(attributes))
