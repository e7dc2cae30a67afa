"""Experiment orchestration: method definitions, the two evaluation protocols,
method-comparison, variant and alpha-sweep grids, and report serialization."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .adversary import AdversaryConfig, evaluate_attack, featurize_many, train_adversary
from .advtrain import TrainConfig, TrainState, fit, train_recommender
from .baselines import blurme_obfuscate, ldp_perturb
from .dataio import (ATTRIBUTES, NUM_CLASSES, AttributeTable, RatingDataset, load_ratings,
                     load_user_attributes, split_attacker, split_recommendation)
from .metrics import precision_at_k, recall_at_k
from .recommender import top_k_batch

log = logging.getLogger(__name__)

L_VALUES = (35, 40, 45)
ALPHAS = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class Method:
    """A defense under test.

    ``defense`` perturbs the data the recommender sees ("none", "blurme",
    "ldp"); ``alpha`` and ``attributes`` configure the adversarial term.
    """

    name: str
    defense: str = "none"
    alpha: float = 0.0
    attributes: tuple[str, ...] = ATTRIBUTES


def method_named(name: str, alpha: float = 1.0) -> Method:
    table = {
        "original": Method("original"),
        "rap": Method("rap", alpha=alpha),
        "blurme": Method("blurme", defense="blurme"),
        "ldp": Method("ldp", defense="ldp"),
        "rap_age": Method("rap_age", alpha=alpha, attributes=("age",)),
        "rap_gender": Method("rap_gender", alpha=alpha, attributes=("gender",)),
        "rap_occupation": Method("rap_occupation", alpha=alpha, attributes=("occupation",)),
    }
    if name not in table:
        raise ValueError(f"unknown method {name!r}; choose from {sorted(table)}")
    return table[name]


@dataclass
class ExperimentConfig:
    ratings: str = "data/ml-100k/u.data"
    users: str = "data/ml-100k/u.user"
    out_dir: str = "results"
    seeds: tuple[int, ...] = (0, 1, 2)
    l_values: tuple[int, ...] = L_VALUES
    K: int = 35
    attack_frac: float = 0.8
    blurme_frac: float = 0.1
    ldp_epsilon: float = 1.0
    alphas: tuple[float, ...] = ALPHAS
    train: TrainConfig = field(default_factory=TrainConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)

    def fingerprint(self) -> dict:
        d = asdict(self)
        for k in ("ratings", "users", "out_dir", "seeds", "l_values", "alphas"):
            d.pop(k)
        d["train"].pop("seed")
        d["train"].pop("alpha")
        d["train"].pop("attributes")
        d["train"].pop("K")
        return d


# ---------------------------------------------------------------- config files

def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        if like and isinstance(like[0], (int, float)):
            kind = type(like[0])
            return tuple(kind(p) for p in parts)
        return tuple(parts)
    return type(like)(raw)


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_ADV_KEYS = {f"adv_{f.name}": f.name for f in fields(AdversaryConfig)}


def apply_overrides(cfg: ExperimentConfig, values: dict[str, str]) -> ExperimentConfig:
    """Flat ``key -> text`` overrides; ``adv_*`` keys target the adversary,
    training keys (alpha, lam, lr, ...) target the trainer."""
    top = {f.name for f in fields(ExperimentConfig)} - {"train", "adversary"}
    train_kw, adv_kw, top_kw = {}, {}, {}
    for key, raw in values.items():
        key = key.strip().replace("-", "_")
        if key in top:
            top_kw[key] = _coerce(str(raw), getattr(cfg, key))
        elif key in _TRAIN_KEYS:
            train_kw[key] = _coerce(str(raw), getattr(cfg.train, key))
        elif key in _ADV_KEYS:
            adv_kw[_ADV_KEYS[key]] = _coerce(str(raw), getattr(cfg.adversary, _ADV_KEYS[key]))
        else:
            raise KeyError(f"unknown configuration key {key!r}")
    return replace(cfg, **top_kw, train=replace(cfg.train, **train_kw),
                   adversary=replace(cfg.adversary, **adv_kw))


def flat_config(cfg: ExperimentConfig) -> dict[str, str]:
    """Inverse of ``apply_overrides`` on a default config."""
    def text(v):
        return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)

    out = {f.name: text(getattr(cfg, f.name)) for f in fields(cfg) if f.name not in ("train", "adversary")}
    out.update({f.name: text(getattr(cfg.train, f.name)) for f in fields(cfg.train)})
    out.update({f"adv_{f.name}": text(getattr(cfg.adversary, f.name)) for f in fields(cfg.adversary)})
    return out


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a flat ``key = value`` text file (``#`` starts a comment)."""
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return apply_overrides(cfg, values)


# ---------------------------------------------------------------- data

@dataclass(frozen=True, eq=False)
class Data:
    ratings: RatingDataset
    attrs: AttributeTable

    @classmethod
    def load(cls, cfg: ExperimentConfig) -> "Data":
        ds = load_ratings(cfg.ratings)
        return cls(ds, load_user_attributes(cfg.users, ds.user_ids))


# ---------------------------------------------------------------- training

def train_method(method: Method, cfg: ExperimentConfig, data: RatingDataset,
                 attrs: AttributeTable, labeled_users, seed: int, K: int) -> TrainState:
    tcfg = replace(cfg.train, alpha=method.alpha, attributes=method.attributes, seed=seed, K=K)
    if method.alpha == 0:
        return train_recommender(tcfg, data)
    return fit(tcfg, data, attrs, labeled_users)


def defended_views(method: Method, cfg: ExperimentConfig, data: RatingDataset,
                   attrs: AttributeTable, reference_users, seed: int) -> dict[str, RatingDataset]:
    """The data the recommender sees, keyed by the attribute it was built for.

    Attribute-agnostic defenses return one view under the key "all".
    """
    if method.defense == "none":
        return {"all": data}
    if method.defense == "ldp":
        return {"all": ldp_perturb(data, cfg.ldp_epsilon, seed)}
    if method.defense == "blurme":
        return {t: blurme_obfuscate(data, attrs, t, None, seed, reference_users, cfg.blurme_frac)
                for t in ATTRIBUTES}
    raise ValueError(f"unknown defense {method.defense!r}")


def recommendation_protocol(method: Method, cfg: ExperimentConfig, d: Data, l: int, seed: int) -> dict:
    """Hold out l items per user, train, and score top-K against the held-out set."""
    split = split_recommendation(d.ratings, l, seed)
    all_users = np.arange(d.ratings.num_users)
    views = defended_views(method, cfg, split.train, d.attrs, all_users, seed)
    evaluable = np.array(sorted(split.heldout), dtype=np.int64)
    p_all, r_all = [], []
    for view in views.values():
        state = train_method(method, cfg, view, d.attrs, all_users, seed, K=l)
        recs = top_k_batch(state.rec, evaluable, view.rated_mask(), cfg.K)
        p_all.append([precision_at_k(split.heldout[u], recs[u], cfg.K) for u in evaluable])
        r_all.append([recall_at_k(split.heldout[u], recs[u], cfg.K) for u in evaluable])
    per_user_p = np.mean(p_all, axis=0)
    per_user_r = np.mean(r_all, axis=0)
    n = d.ratings.num_users
    return {
        "p_at_k": float(per_user_p.mean()),
        "r_at_k": float(per_user_r.mean()),
        # excluded users counted with zero hits
        "p_at_k_all_users": float(per_user_p.sum() / n),
        "r_at_k_all_users": float(per_user_r.sum() / n),
        "n_evaluable": int(len(evaluable)),
        "n_excluded": int(len(split.excluded)),
    }


def attack_protocol(method: Method, cfg: ExperimentConfig, d: Data, l: int, seed: int,
                    attributes=ATTRIBUTES) -> dict:
    """Train on the 80/20 split, extend test users' lists with top-l items and
    measure the external adversary's micro-AUC per attribute."""
    split = split_attacker(d.ratings, cfg.attack_frac, l, seed)
    public = d.attrs.restricted(split.train_users)
    views = defended_views(method, cfg, split.data, d.attrs, split.train_users, seed)

    train_lists = [d.ratings.rated(u) for u in split.train_users]
    X_train = featurize_many(train_lists, d.ratings.num_items)

    lists_by_view = {}
    for key, view in views.items():
        state = train_method(method, cfg, view, public, split.train_users, seed, K=l)
        recs = top_k_batch(state.rec, split.test_users, view.rated_mask(), l)
        lists_by_view[key] = [np.union1d(view.rated(u), recs[int(u)]) for u in split.test_users]

    out = {}
    for t in attributes:
        lists = lists_by_view.get(t, lists_by_view.get("all"))
        X_test = featurize_many(lists, d.ratings.num_items)
        adv = train_adversary(X_train, public.labels(t, split.train_users), NUM_CLASSES[t],
                              seed, cfg.adversary)
        # evaluation is the one place hidden labels are read
        y_test = getattr(d.attrs, t)[split.test_users]
        out[f"auc_{t}"] = evaluate_attack(adv, X_test, y_test)
    out["n_test_users"] = int(len(split.test_users))
    return out


# ---------------------------------------------------------------- cells + cache

def _cell_key(method: Method, cfg: ExperimentConfig, l: int, seed: int, protocol: str) -> str:
    blob = json.dumps({"method": asdict(method), "cfg": cfg.fingerprint(), "l": l,
                       "seed": seed, "protocol": protocol}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def run_cell(method: Method, cfg: ExperimentConfig, d: Data, l: int, seed: int,
             cache_dir: str | Path | None = None, protocols=("rec", "attack")) -> dict:
    """Metrics for one (method, l, seed), memoized on disk when ``cache_dir`` is set."""
    row = {"method": method.name, "alpha": method.alpha, "l": l, "seed": seed}
    for protocol in protocols:
        path = None
        if cache_dir is not None:
            path = Path(cache_dir) / f"{method.name}_{protocol}_l{l}_s{seed}_{_cell_key(method, cfg, l, seed, protocol)}.json"
            if path.exists():
                row.update(json.loads(path.read_text()))
                continue
        t0 = time.perf_counter()
        if protocol == "rec":
            res = recommendation_protocol(method, cfg, d, l, seed)
        else:
            res = attack_protocol(method, cfg, d, l, seed)
        res[f"wall_time_{protocol}"] = time.perf_counter() - t0
        log.info("%s l=%d seed=%d %s: %s", method.name, l, seed, protocol, res)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(res))
        row.update(res)
    return row


METRIC_KEYS = ("auc_gender", "auc_age", "auc_occupation", "p_at_k", "r_at_k",
               "p_at_k_all_users", "r_at_k_all_users")


@dataclass
class ExperimentReport:
    rows: list[dict]
    config: dict
    wall_time: float = 0.0

    def mean(self, method: str, l: int, key: str, alpha: float | None = None) -> float:
        vals = [r[key] for r in self.rows if r["method"] == method and r["l"] == l
                and key in r and (alpha is None or r["alpha"] == alpha)]
        if not vals:
            raise KeyError(f"no {key} for {method} at l={l}")
        return float(np.mean(vals))

    def summary(self) -> list[dict]:
        """Seed-averaged rows keyed by (method, alpha, l)."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault((r["method"], r["alpha"], r["l"]), []).append(r)
        out = []
        for (m, a, l), rs in groups.items():
            entry = {"method": m, "alpha": a, "l": l, "n_seeds": len(rs)}
            for k in METRIC_KEYS:
                vals = [r[k] for r in rs if k in r]
                if vals:
                    entry[k] = float(np.mean(vals))
            out.append(entry)
        return out

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "summary": self.summary(),
                           "config": self.config, "wall_time": self.wall_time}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        doc = json.loads(text)
        return cls(doc["rows"], doc["config"], doc.get("wall_time", 0.0))

    def write(self, out_dir: str | Path, stem: str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json())
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "alpha", "l", "n_seeds", *METRIC_KEYS])
            w.writeheader()
            for entry in self.summary():
                w.writerow(entry)


def _config_echo(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def run_grid(cfg: ExperimentConfig, methods, l_values, seeds=None, data: Data | None = None,
             protocols=("rec", "attack")) -> ExperimentReport:
    d = Data.load(cfg) if data is None else data
    seeds = cfg.seeds if seeds is None else seeds
    cache = Path(cfg.out_dir) / "cache"
    t0 = time.perf_counter()
    rows = [run_cell(m, cfg, d, l, s, cache, protocols)
            for m in methods for l in l_values for s in seeds]
    return ExperimentReport(rows, _config_echo(cfg), time.perf_counter() - t0)


def run_table1(cfg: ExperimentConfig, methods=("original", "ldp", "blurme", "rap"),
               l_values=None, data: Data | None = None) -> ExperimentReport:
    ms = [method_named(m, cfg.train.alpha) for m in methods]
    return run_grid(cfg, ms, cfg.l_values if l_values is None else l_values, data=data)


def run_alpha_sweep(cfg: ExperimentConfig, alphas=None, l: int = 35,
                    data: Data | None = None) -> ExperimentReport:
    """RAP at each alpha plus the alpha = 0 reference (Original)."""
    alphas = cfg.alphas if alphas is None else alphas
    ms = [Method("original")] + [Method("rap", alpha=a) for a in alphas]
    return run_grid(cfg, ms, (l,), data=data)


def run_variants(cfg: ExperimentConfig, l_values=(35,), data: Data | None = None) -> ExperimentReport:
    names = ("rap", "rap_age", "rap_gender", "rap_occupation")
    return run_grid(cfg, [method_named(n, cfg.train.alpha) for n in names], l_values, data=data)
