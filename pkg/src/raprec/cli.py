"""Command-line entry point.

Exit status: 0 on success, 2 on invalid input (bad flags, config or data
files), 1 on any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adversary import evaluate_attack, featurize_many, train_adversary, write_attack_results
from .advtrain import TrainState
from .dataio import (ATTRIBUTES, NUM_CLASSES, DataFormatError, LabelAccessError, load_ratings,
                     load_user_attributes, save_manifest, split_attacker, split_recommendation)
from .experiments import (Data, ExperimentConfig, apply_overrides, defended_views, flat_config,
                          load_config, method_named, run_alpha_sweep, run_table1, run_variants,
                          train_method)
from .metrics import precision_at_k, recall_at_k
from .nnkernel import ParameterSet
from .recommender import export_recommendations_csv, score_matrix, top_k_batch

log = logging.getLogger("raprec")

TRAIN_METHODS = ("rap", "original", "blurme", "ldp")


class ValidationError(Exception):
    pass


# flags shared by every config-driven subcommand; each maps onto a config key
_OVERRIDE_FLAGS = {
    "ratings": str, "users": str, "out_dir": str, "epochs": int, "lr": float, "lam": float,
    "batch_size": int, "dim": int, "K": int, "seeds": str, "l_values": str, "alphas": str,
    "blurme_frac": float, "ldp_epsilon": float, "att_init_scale": float, "rec_init_scale": float,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for key, kind in _OVERRIDE_FLAGS.items():
        flag = "--" + key.replace("_", "-") if key != "K" else "--K"
        p.add_argument(flag, dest=key, type=kind, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    values = {k: getattr(args, k) for k in _OVERRIDE_FLAGS if getattr(args, k, None) is not None}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return apply_overrides(cfg, {k: str(v) for k, v in values.items()})


# ---------------------------------------------------------------- prepare-data

def cmd_prepare_data(args) -> int:
    ds = load_ratings(args.ratings)
    attrs = load_user_attributes(args.users, ds.user_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.ratings, out / "u.data")
    shutil.copyfile(args.users, out / "u.user")
    summary = {"ratings": len(ds), "users": ds.num_users, "items": ds.num_items,
               "mean_profile": float(ds.profile_sizes().mean()), "splits": []}
    for l in args.l_values:
        for seed in args.seeds:
            rec = split_recommendation(ds, l, seed)
            att = split_attacker(ds, args.attack_frac, l, seed)
            save_manifest(rec, out / f"rec_l{l}_s{seed}.json")
            save_manifest(att, out / f"attack_l{l}_s{seed}.json")
            summary["splits"].append({"l": l, "seed": seed, "evaluable": len(rec.heldout),
                                      "excluded": len(rec.excluded),
                                      "attack_train": len(att.train_users),
                                      "attack_test": len(att.test_users)})
    summary["class_counts"] = {t: np.bincount(getattr(attrs, t), minlength=NUM_CLASSES[t]).tolist()
                               for t in ATTRIBUTES}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({k: v for k, v in summary.items() if k != "splits"}))
    return 0


# ---------------------------------------------------------------- train

def _method(name: str, alpha: float | None, attribute: str | None, cfg: ExperimentConfig):
    if name not in TRAIN_METHODS:
        raise ValidationError(f"unknown method {name!r}")
    if name == "rap" and attribute:
        m = method_named(f"rap_{attribute}", cfg.train.alpha if alpha is None else alpha)
    else:
        m = method_named(name, cfg.train.alpha if alpha is None else alpha)
    if alpha is not None and name != "rap" and alpha != 0:
        raise ValidationError(f"--alpha only applies to rap (got {alpha} for {name})")
    return m


def _split_for(protocol: str, d: Data, cfg: ExperimentConfig, l: int, seed: int):
    if protocol == "attack":
        split = split_attacker(d.ratings, cfg.attack_frac, l, seed)
        return split, split.data, d.attrs.restricted(split.train_users), split.train_users
    split = split_recommendation(d.ratings, l, seed)
    users = np.arange(d.ratings.num_users)
    return split, split.train, d.attrs, users


def _view(method, cfg, train, attrs, labeled, seed, attribute):
    views = defended_views(method, cfg, train, attrs, labeled, seed)
    return views.get(attribute or "gender", views.get("all"))


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    method = _method(args.method, args.alpha, args.attribute, cfg)
    if args.attribute and args.attribute not in ATTRIBUTES:
        raise ValidationError(f"unknown attribute {args.attribute!r}")
    d = Data.load(cfg)
    split, train, attrs, labeled = _split_for(args.protocol, d, cfg, args.l, args.seed)
    view = _view(method, cfg, train, attrs, labeled, args.seed, args.attribute)
    state: TrainState = train_method(method, cfg, view, attrs, labeled, args.seed, K=args.l)

    out = Path(args.out or Path(cfg.out_dir) / "runs" / f"{method.name}_{args.protocol}_l{args.l}_s{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    state.rec.save(out / "rec.ckpt")
    if method.alpha:
        state.att.save(out / "att.ckpt")
    save_manifest(split, out / "split.json")
    if method.defense != "none":
        view.to_tsv(out / "train_data.tsv")
    state.write_log(out / "train_log.json", replace(cfg.train, alpha=method.alpha,
                                                    attributes=method.attributes, seed=args.seed))
    meta = {"method": args.method, "variant": method.name, "alpha": method.alpha,
            "attribute": args.attribute, "protocol": args.protocol, "l": args.l, "seed": args.seed,
            "config": flat_config(cfg)}
    (out / "run.json").write_text(json.dumps(meta, indent=1))

    result = {"run_dir": str(out), "final": state.history[-1] if state.history else None}
    if args.protocol == "rec":
        evaluable = np.array(sorted(split.heldout), dtype=np.int64)
        recs = top_k_batch(state.rec, evaluable, view.rated_mask(), cfg.K)
        result["p_at_k"] = float(np.mean([precision_at_k(split.heldout[u], recs[u], cfg.K) for u in evaluable]))
        result["r_at_k"] = float(np.mean([recall_at_k(split.heldout[u], recs[u], cfg.K) for u in evaluable]))
    print(json.dumps(result))
    return 0


# ---------------------------------------------------------------- run loading

def _load_run(checkpoint: str):
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise ValidationError(f"no checkpoint at {ckpt}")
    meta_path = ckpt.parent / "run.json"
    if not meta_path.is_file():
        raise ValidationError(f"{meta_path} missing; checkpoints must sit in a run directory written by 'train'")
    meta = json.loads(meta_path.read_text())
    cfg = apply_overrides(ExperimentConfig(), meta["config"])
    return meta, cfg, ParameterSet.load(ckpt)


def _rebuild_view(meta, cfg, d: Data, split_kind: str, split_path: Path):
    from .dataio import attack_split_from_manifest, rec_split_from_manifest
    method = _method(meta["method"], meta["alpha"] if meta["method"] == "rap" else None,
                     meta["attribute"] if meta["method"] == "rap" else None, cfg)
    if split_kind == "attack":
        split = attack_split_from_manifest(d.ratings, split_path)
        train, attrs, labeled = split.data, d.attrs.restricted(split.train_users), split.train_users
    else:
        split = rec_split_from_manifest(d.ratings, split_path)
        train, attrs, labeled = split.train, d.attrs, np.arange(d.ratings.num_users)
    return split, _view(method, cfg, train, attrs, labeled, meta["seed"], meta["attribute"])


def _manifest_kind(path: Path) -> str:
    if not path.is_file():
        raise ValidationError(f"no split manifest at {path}")
    kind = json.loads(path.read_text()).get("kind")
    if kind not in ("rec", "attack"):
        raise ValidationError(f"{path}: unknown split kind {kind!r}")
    return kind


def cmd_recommend(args) -> int:
    meta, cfg, rec = _load_run(args.checkpoint)
    if args.k <= 0:
        raise ValidationError("--k must be positive")
    d = Data.load(cfg)
    if args.user not in d.ratings.user_ids:
        raise ValidationError(f"unknown user id {args.user}")
    split_path = Path(args.checkpoint).parent / "split.json"
    _, view = _rebuild_view(meta, cfg, d, _manifest_kind(split_path), split_path)
    u = d.ratings.user_ids.encode(args.user)
    recs = top_k_batch(rec, [u], view.rated_mask(), args.k)
    if args.csv:
        export_recommendations_csv(recs, rec, args.csv)
    scores = score_matrix(rec, [u])[0]
    for rank, item in enumerate(recs[u], 1):
        print(f"{rank}\t{d.ratings.item_ids.decode(int(item))}\t{scores[item]:.6f}")
    return 0


def cmd_attack_eval(args) -> int:
    meta, cfg, rec = _load_run(args.checkpoint)
    split_path = Path(args.split)
    if _manifest_kind(split_path) != "attack":
        raise ValidationError("attack-eval needs an attack split manifest")
    d = Data.load(cfg)
    split, view = _rebuild_view(meta, cfg, d, "attack", split_path)
    recs = top_k_batch(rec, split.test_users, view.rated_mask(), split.l)
    lists = [np.union1d(view.rated(u), recs[int(u)]) for u in split.test_users]
    X_test = featurize_many(lists, d.ratings.num_items)
    X_train = featurize_many([d.ratings.rated(u) for u in split.train_users], d.ratings.num_items)
    public = d.attrs.restricted(split.train_users)
    results = {}
    for t in ATTRIBUTES:
        adv = train_adversary(X_train, public.labels(t, split.train_users), NUM_CLASSES[t],
                              meta["seed"], cfg.adversary)
        results[t] = evaluate_attack(adv, X_test, getattr(d.attrs, t)[split.test_users])
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "attack.json"
    write_attack_results(out, results, len(split.test_users), meta["seed"])
    print(json.dumps({f"auc_{t}": v for t, v in results.items()}))
    return 0


# ---------------------------------------------------------------- grids

def _grid(runner, stem):
    def cmd(args) -> int:
        cfg = _resolve_config(args)
        report = runner(cfg)
        report.write(cfg.out_dir, stem)
        for row in report.summary():
            print(json.dumps(row))
        return 0
    return cmd


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raprec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="validate raw files and write split manifests")
    p.add_argument("--ratings", required=True)
    p.add_argument("--users", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--l-values", type=int, nargs="+", default=[35, 40, 45])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--attack-frac", type=float, default=0.8)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train one method on one split")
    _add_config_flags(p)
    p.add_argument("--method", required=True, choices=TRAIN_METHODS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--l", type=int, default=35)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--protocol", choices=("attack", "rec"), default="attack")
    p.add_argument("--attribute", choices=ATTRIBUTES,
                   help="BlurMe target attribute, or the single attacker head for rap")
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", help="top-k items for one user from a trained run")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", type=int, required=True, help="raw user id")
    p.add_argument("--k", type=int, default=35)
    p.add_argument("--csv", help="also write user,rank,item,score rows here")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("attack-eval", help="external adversary micro-AUC for a trained run")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack_eval)

    for name, runner, stem in (("table1", run_table1, "table1"),
                               ("alpha-sweep", run_alpha_sweep, "alpha_sweep"),
                               ("variants", run_variants, "variants")):
        p = sub.add_parser(name)
        _add_config_flags(p)
        p.set_defaults(func=_grid(runner, stem))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, DataFormatError, LabelAccessError, KeyError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
