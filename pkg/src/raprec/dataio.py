"""MovieLens-100K parsing, private-attribute encoding and train/test splits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ATTRIBUTES = ("gender", "age", "occupation")
NUM_CLASSES = {"gender": 2, "age": 3, "occupation": 21}

OCCUPATIONS = (
    "administrator", "artist", "doctor", "educator", "engineer", "entertainment",
    "executive", "healthcare", "homemaker", "lawyer", "librarian", "marketing",
    "none", "other", "programmer", "retired", "salesman", "scientist", "student",
    "technician", "writer",
)
GENDERS = {"M": 0, "F": 1}


class DataFormatError(ValueError):
    pass


class LabelAccessError(PermissionError):
    """Raised when code reads a private attribute it was not granted."""


def age_bucket(age: int) -> int:
    """0: under 35, 1: 35 <= age < 45, 2: 45 and over."""
    if age < 35:
        return 0
    if age < 45:
        return 1
    return 2


@dataclass(frozen=True)
class IdMap:
    """Dense 0-based index <-> raw MovieLens id."""

    raw_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {r: i for i, r in enumerate(self.raw_ids)})

    def encode(self, raw: int) -> int:
        try:
            return self._index[raw]
        except KeyError:
            raise KeyError(f"unknown raw id {raw}") from None

    def decode(self, idx: int) -> int:
        return self.raw_ids[idx]

    def __len__(self) -> int:
        return len(self.raw_ids)

    def __contains__(self, raw: int) -> bool:
        return raw in self._index


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Immutable sparse rating table with per-user item sets."""

    users: np.ndarray
    items: np.ndarray
    scores: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_items: int
    user_ids: IdMap = field(default_factory=lambda: IdMap(()))
    item_ids: IdMap = field(default_factory=lambda: IdMap(()))

    def __post_init__(self):
        for name in ("users", "items", "scores", "timestamps"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))
        n = len(self.users)
        if not (len(self.items) == len(self.scores) == len(self.timestamps) == n):
            raise DataFormatError("rating columns have different lengths")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataFormatError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataFormatError("item index out of range")
            if self.scores.min() < 1 or self.scores.max() > 5:
                raise DataFormatError("rating outside 1..5")
            key = self.users * max(self.num_items, 1) + self.items
            if len(np.unique(key)) != n:
                raise DataFormatError("duplicate (user, item) pair")
        order = np.lexsort((self.timestamps, self.users))
        starts = np.searchsorted(self.users[order], np.arange(self.num_users + 1))
        object.__setattr__(self, "_order", order)
        object.__setattr__(self, "_starts", starts)

    def __len__(self) -> int:
        return len(self.users)

    def rated(self, user: int) -> np.ndarray:
        """Items rated by ``user``, oldest first."""
        return self.items[self._order[self._starts[user]:self._starts[user + 1]]]

    def rated_timestamps(self, user: int) -> np.ndarray:
        return self.timestamps[self._order[self._starts[user]:self._starts[user + 1]]]

    def rated_set(self, user: int) -> set[int]:
        return set(self.rated(user).tolist())

    @property
    def per_user_index(self) -> dict[int, set[int]]:
        return {u: self.rated_set(u) for u in range(self.num_users)}

    def profile_sizes(self) -> np.ndarray:
        return np.diff(self._starts)

    def rated_mask(self) -> np.ndarray:
        mask = np.zeros((self.num_users, self.num_items), dtype=bool)
        mask[self.users, self.items] = True
        return mask

    def without(self, drop: np.ndarray) -> "RatingDataset":
        """Copy with the ratings at boolean positions ``drop`` removed."""
        keep = ~np.asarray(drop, dtype=bool)
        return RatingDataset(self.users[keep], self.items[keep], self.scores[keep],
                             self.timestamps[keep], self.num_users, self.num_items,
                             self.user_ids, self.item_ids)

    def with_added(self, users, items, scores, timestamps) -> "RatingDataset":
        return RatingDataset(
            np.concatenate([self.users, np.asarray(users, dtype=np.int64)]),
            np.concatenate([self.items, np.asarray(items, dtype=np.int64)]),
            np.concatenate([self.scores, np.asarray(scores, dtype=np.int64)]),
            np.concatenate([self.timestamps, np.asarray(timestamps, dtype=np.int64)]),
            self.num_users, self.num_items, self.user_ids, self.item_ids)

    def to_tsv(self, path: str | Path) -> None:
        """Write in ``u.data`` layout with the original 1-based raw ids."""
        with open(path, "w") as fh:
            for u, i, r, t in zip(self.users, self.items, self.scores, self.timestamps):
                uid = self.user_ids.decode(u) if len(self.user_ids) else u + 1
                iid = self.item_ids.decode(i) if len(self.item_ids) else i + 1
                fh.write(f"{uid}\t{iid}\t{r}\t{t}\n")


def load_ratings(path: str | Path) -> RatingDataset:
    """Parse a tab-separated ``u.data`` file and re-index ids densely.

    Dense indices follow ascending raw id, so the canonical file maps raw
    id ``k`` to index ``k - 1``.
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                u, i, r, t = (int(p) for p in parts)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer field in {line.strip()!r}") from None
            if not 1 <= r <= 5:
                raise DataFormatError(f"{path}:{lineno}: rating {r} outside 1..5")
            rows.append((u, i, r, t))
    if not rows:
        return RatingDataset(np.empty(0), np.empty(0), np.empty(0), np.empty(0), 0, 0)
    arr = np.array(rows, dtype=np.int64)
    user_ids = IdMap(tuple(np.unique(arr[:, 0]).tolist()))
    item_ids = IdMap(tuple(np.unique(arr[:, 1]).tolist()))
    users = np.searchsorted(np.array(user_ids.raw_ids), arr[:, 0])
    items = np.searchsorted(np.array(item_ids.raw_ids), arr[:, 1])
    return RatingDataset(users, items, arr[:, 2], arr[:, 3], len(user_ids), len(item_ids),
                         user_ids, item_ids)


@dataclass(frozen=True, eq=False)
class AttributeTable:
    """Per-user class indices for gender, age bucket and occupation.

    ``visible`` limits which users' labels may be read.  Training code only
    ever receives a restricted view; reading a hidden label raises
    ``LabelAccessError``.
    """

    gender: np.ndarray
    age: np.ndarray
    occupation: np.ndarray
    visible: np.ndarray | None = None

    def __post_init__(self):
        for name in ATTRIBUTES:
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))
        vis = np.ones(len(self.gender), dtype=bool) if self.visible is None else self.visible
        object.__setattr__(self, "visible", _frozen(np.asarray(vis, dtype=bool)))

    @property
    def num_users(self) -> int:
        return len(self.gender)

    @property
    def num_classes(self) -> dict[str, int]:
        return dict(NUM_CLASSES)

    def restricted(self, users) -> "AttributeTable":
        vis = np.zeros(self.num_users, dtype=bool)
        vis[np.asarray(users, dtype=np.int64)] = True
        return AttributeTable(self.gender, self.age, self.occupation, vis & self.visible)

    def labels(self, attribute: str, users) -> np.ndarray:
        if attribute not in ATTRIBUTES:
            raise KeyError(f"unknown attribute {attribute!r}")
        users = np.asarray(users, dtype=np.int64)
        hidden = users[~self.visible[users]]
        if hidden.size:
            raise LabelAccessError(f"{attribute} label of user {int(hidden[0])} is not visible here")
        return getattr(self, attribute)[users]

    def visible_users(self) -> np.ndarray:
        return np.flatnonzero(self.visible)


def load_user_attributes(path: str | Path, id_map: IdMap) -> AttributeTable:
    """Parse pipe-separated ``u.user`` rows into an AttributeTable.

    Occupation indices follow the sorted 21-entry vocabulary.
    """
    n = len(id_map)
    gender = np.full(n, -1, dtype=np.int64)
    age = np.full(n, -1, dtype=np.int64)
    occ = np.full(n, -1, dtype=np.int64)
    occ_index = {o: k for k, o in enumerate(OCCUPATIONS)}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("|")
            if len(parts) != 5:
                raise DataFormatError(f"{path}:{lineno}: expected 5 '|'-separated fields")
            raw_uid, raw_age, g, o = int(parts[0]), int(parts[1]), parts[2], parts[3]
            if raw_uid not in id_map:
                raise DataFormatError(f"{path}:{lineno}: user {raw_uid} has no ratings / not in id map")
            if o not in occ_index:
                raise DataFormatError(f"{path}:{lineno}: unknown occupation {o!r}")
            if g not in GENDERS:
                raise DataFormatError(f"{path}:{lineno}: unknown gender {g!r}")
            u = id_map.encode(raw_uid)
            gender[u], age[u], occ[u] = GENDERS[g], age_bucket(raw_age), occ_index[o]
    missing = np.flatnonzero(gender < 0)
    if missing.size:
        raise DataFormatError(f"{path}: no attributes for {missing.size} users "
                              f"(first raw id {id_map.decode(int(missing[0]))})")
    return AttributeTable(gender, age, occ)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True, eq=False)
class RecSplit:
    train: RatingDataset
    heldout: dict[int, frozenset[int]]
    excluded: tuple[int, ...]
    degenerate: tuple[int, ...]
    seed: int
    l: int

    def to_manifest(self) -> dict:
        return {"kind": "recommendation", "seed": self.seed, "l": self.l,
                "excluded": list(self.excluded),
                "heldout": {str(u): sorted(s) for u, s in self.heldout.items()}}


@dataclass(frozen=True, eq=False)
class AttackSplit:
    train_users: np.ndarray
    test_users: np.ndarray
    data: RatingDataset
    removed: dict[int, frozenset[int]]
    seed: int
    l: int

    def to_manifest(self) -> dict:
        return {"kind": "attack", "seed": self.seed, "l": self.l,
                "train_users": self.train_users.tolist(), "test_users": self.test_users.tolist(),
                "removed": {str(u): sorted(s) for u, s in self.removed.items()}}


def _holdout(ds: RatingDataset, users, l: int, rng: np.random.Generator):
    """Pick ``l`` random rated items of each user; returns drop mask and sets."""
    drop = np.zeros(len(ds), dtype=bool)
    picked: dict[int, frozenset[int]] = {}
    excluded, degenerate = [], []
    for u in users:
        rows = ds._order[ds._starts[u]:ds._starts[u + 1]]
        if len(rows) < l:
            excluded.append(int(u))
            continue
        chosen = rng.choice(rows, size=l, replace=False)
        drop[chosen] = True
        picked[int(u)] = frozenset(ds.items[chosen].tolist())
        if len(rows) == l:
            degenerate.append(int(u))
    return drop, picked, excluded, degenerate


def split_recommendation(ds: RatingDataset, l: int, seed: int) -> RecSplit:
    """Hold out ``l`` random rated items per user.

    Users with fewer than ``l`` ratings keep their whole profile for training
    and are listed in ``excluded``.
    """
    if l <= 0:
        raise ValueError(f"l must be positive, got {l}")
    rng = np.random.default_rng([seed, l, 0])
    drop, heldout, excluded, degenerate = _holdout(ds, range(ds.num_users), l, rng)
    if excluded:
        log.info("split_recommendation: %d users have fewer than %d ratings", len(excluded), l)
    return RecSplit(ds.without(drop), heldout, tuple(excluded), tuple(degenerate), seed, l)


def split_attacker(ds: RatingDataset, frac: float, l: int, seed: int) -> AttackSplit:
    """floor(frac * N) users keep intact profiles and public labels; the
    rest lose ``l`` random rated items each and keep their labels hidden."""
    if not 0.0 < frac < 1.0:
        raise ValueError(f"frac must lie in (0, 1), got {frac}")
    if l <= 0:
        raise ValueError(f"l must be positive, got {l}")
    rng = np.random.default_rng([seed, l, 1])
    perm = rng.permutation(ds.num_users)
    n_train = int(np.floor(frac * ds.num_users))
    train_users, test_users = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    drop = np.zeros(len(ds), dtype=bool)
    removed: dict[int, frozenset[int]] = {}
    for u in test_users:
        rows = ds._order[ds._starts[u]:ds._starts[u + 1]]
        # short profiles keep one rated item so I_h is never empty
        k = min(l, len(rows) - 1)
        chosen = rng.choice(rows, size=k, replace=False) if k > 0 else rows[:0]
        drop[chosen] = True
        removed[int(u)] = frozenset(ds.items[chosen].tolist())
    return AttackSplit(train_users, test_users, ds.without(drop), removed, seed, l)


def save_manifest(split: RecSplit | AttackSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.to_manifest(), indent=1))


def rec_split_from_manifest(ds: RatingDataset, path: str | Path) -> RecSplit:
    man = json.loads(Path(path).read_text())
    heldout = {int(u): frozenset(v) for u, v in man["heldout"].items()}
    drop = np.zeros(len(ds), dtype=bool)
    for u, items in heldout.items():
        drop |= (ds.users == u) & np.isin(ds.items, list(items))
    degenerate = tuple(u for u in heldout if len(heldout[u]) == ds.profile_sizes()[u])
    return RecSplit(ds.without(drop), heldout, tuple(man["excluded"]), degenerate,
                    man["seed"], man["l"])


def attack_split_from_manifest(ds: RatingDataset, path: str | Path) -> AttackSplit:
    man = json.loads(Path(path).read_text())
    removed = {int(u): frozenset(v) for u, v in man["removed"].items()}
    drop = np.zeros(len(ds), dtype=bool)
    for u, items in removed.items():
        drop |= (ds.users == u) & np.isin(ds.items, list(items))
    return AttackSplit(np.array(man["train_users"], dtype=np.int64),
                       np.array(man["test_users"], dtype=np.int64),
                       ds.without(drop), removed, man["seed"], man["l"])
