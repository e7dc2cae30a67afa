"""Cross-validated grid over the external adversary's hidden size and epochs.

Only the attack split's training users (public labels, intact profiles) are
used, so the choice never sees test users.  Prints mean validation micro-AUC
per setting and attribute.

    python scripts/tune_adversary.py --data data/ml-100k
"""

import argparse
import itertools
import json
from pathlib import Path

import numpy as np

from raprec.adversary import AdversaryConfig, evaluate_attack, featurize_many, train_adversary
from raprec.dataio import ATTRIBUTES, NUM_CLASSES, load_ratings, load_user_attributes, split_attacker


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="data/ml-100k")
    ap.add_argument("--folds", type=int, default=4)
    ap.add_argument("--hidden", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("--epochs", type=int, nargs="+", default=[5, 10, 20, 50])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = load_ratings(Path(args.data) / "u.data")
    attrs = load_user_attributes(Path(args.data) / "u.user", ds.user_ids)
    split = split_attacker(ds, 0.8, 35, args.seed)
    users = split.train_users
    public = attrs.restricted(users)
    X = featurize_many([ds.rated(u) for u in users], ds.num_items)
    folds = np.array_split(np.random.default_rng([args.seed, 99]).permutation(len(users)), args.folds)

    results = []
    for hidden, epochs in itertools.product(args.hidden, args.epochs):
        cfg = AdversaryConfig(hidden=hidden, epochs=epochs)
        row = {"hidden": hidden, "epochs": epochs}
        for t in ATTRIBUTES:
            y = public.labels(t, users)
            aucs = []
            for k, val in enumerate(folds):
                tr = np.setdiff1d(np.arange(len(users)), val)
                params = train_adversary(X[tr], y[tr], NUM_CLASSES[t], args.seed + k, cfg)
                aucs.append(evaluate_attack(params, X[val], y[val]))
            row[t] = float(np.mean(aucs))
        row["mean"] = float(np.mean([row[t] for t in ATTRIBUTES]))
        print(json.dumps(row), flush=True)
        results.append(row)
    best = max(results, key=lambda r: r["mean"])
    print("best:", json.dumps(best))


if __name__ == "__main__":
    main()
