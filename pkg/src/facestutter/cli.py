"""Command-line entry point: synth, train, explain, stats.

Every subcommand takes ``--config FILE`` with ``key = value`` lines that
mirror its long flags (dashes or underscores both work); explicit flags win
over the file. One ``--seed`` per command feeds all of its random streams.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import (AU_IDS, PARADIGMS, DatasetError, NormalizationManifest, SynthConfig, apply_normalization,
                   file_digest, generate_synthetic, load_dataset, save_dataset, stack,
                   write_manifest)
from .explain import AttributionMap, ReferenceSet, deep_shap_batch, read_attribution_csv
from .heatmap import save_heatmap
from .models import ModelConfig, load_checkpoint, save_checkpoint
from .stats import GroupingSpec, anova_csv, attribution_anova, significance_summary, subject_stutter_rates
from .training import TrainConfig, cross_validate, shuffled_labels, stratified_split

log = logging.getLogger("facestutter")


class UsageError(Exception):
    """Bad flags or incompatible inputs; reported with exit code 2."""


# -- config files ------------------------------------------------------------

def read_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config(args.config)
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            if key not in known or key in ("help", "config"):
                raise UsageError(f"{args.config}: unknown key {key!r} for '{args.command}'")
            action = known[key]
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            elif action.nargs in ("*", "+"):
                defaults[key] = [action.type(v) if action.type else v for v in value.split()]
            else:
                defaults[key] = action.type(value) if action.type else value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# -- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    overrides = {f.name: getattr(args, f.name) for f in fields(SynthConfig)
                 if getattr(args, f.name, None) is not None}
    try:
        cfg = SynthConfig(**overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trials, oracle = generate_synthetic(cfg)
    data_path = out / "dataset.csv"
    save_dataset(trials, data_path)
    write_manifest(out / "manifest.json", cfg, oracle, trials, data_path.name, file_digest(data_path))
    with open(out / "oracle_posterior.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "label", "posterior"])
        for t, p in zip(trials, oracle.posterior):
            w.writerow([t.trial_id, t.label, repr(float(p))])
    for msg in oracle.warnings:
        log.warning(msg)
    print(f"wrote {len(trials)} trials to {data_path} (Bayes AUC {oracle.bayes_auc:.4f})")
    return 0


# -- train ----------------------------------------------------------------------

def _filter_paradigm(trials, paradigm: str):
    if paradigm == "all":
        return trials
    kept = [t for t in trials if t.paradigm == paradigm]
    if not kept:
        raise UsageError(f"dataset has no {paradigm} trials")
    return kept


def cmd_train(args) -> int:
    arch = {"cnn-a": "CNN_A", "cnn-b": "CNN_B", "rf": "RF"}[args.arch]
    try:
        model_cfg = ModelConfig(architecture=arch, cnn_b_kernel=args.kernel, dropout_rate=args.dropout,
                                rf_trees=args.rf_trees, rf_max_depth=args.rf_max_depth, seed=args.seed)
        train_cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.max_epochs,
                                early_stop_patience=args.early_stop_patience, lr0=args.lr,
                                lr_patience=args.lr_patience, folds=args.folds, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    trials = _filter_paradigm(load_dataset(args.data), args.paradigm)
    digest = file_digest(args.data)
    X, y = stack(trials)
    if args.shuffle_labels:
        y = shuffled_labels(y, args.seed)
    ids = [t.trial_id for t in trials]
    plan = stratified_split(y, train_cfg)
    res = cross_validate(X, y, model_cfg, train_cfg, plan=plan)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(res.report.to_csv())
    title = f"{arch} paradigm={args.paradigm}" + (" kernel=%d" % args.kernel if arch == "CNN_B" else "")
    (out / "metrics.txt").write_text(res.report.to_text(title))
    for k, hist in enumerate(res.histories):
        if hist is not None:
            (out / f"history_fold{k}.csv").write_text(hist.to_csv())
    with open(out / "test_predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "label"] + [f"fold{k}" for k in range(len(res.test_probs))])
        for j, i in enumerate(plan.test):
            w.writerow([ids[i], int(y[i])] + [repr(float(p[j])) for p in res.test_probs])
    best = res.best_fold()
    train_idx, val_idx = plan.folds[best]
    meta = {
        "architecture": arch,
        "paradigm": args.paradigm,
        "fold": best,
        "seed": args.seed,
        "shuffle_labels": bool(args.shuffle_labels),
        "dataset_sha256": digest,
        "normalization": res.manifest.to_dict(),
        "test_ids": [ids[i] for i in plan.test],
        "train_ids": [ids[i] for i in train_idx],
        "val_ids": [ids[i] for i in val_idx],
    }
    save_checkpoint(out / "model.npz", res.models[best], meta)
    sys.stdout.write(res.report.to_text(title))
    return 0


# -- explain --------------------------------------------------------------------

def _select(trials, wanted):
    by_id = {t.trial_id: t for t in trials}
    missing = [w for w in wanted if w not in by_id]
    if missing:
        raise UsageError(f"unknown trial ids: {', '.join(missing[:5])}")
    return [by_id[w] for w in wanted]


def cmd_explain(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    if meta.get("architecture") == "RF" or not hasattr(model, "layers"):
        raise UsageError("attribution maps need a CNN checkpoint, not a random forest")
    digest = file_digest(args.data)
    if meta.get("dataset_sha256") != digest:
        raise UsageError(f"{args.data} (sha256 {digest[:12]}) is not the dataset this checkpoint was "
                         f"trained on (sha256 {str(meta.get('dataset_sha256'))[:12]}); normalization would not match")
    manifest = NormalizationManifest.from_dict(meta["normalization"])
    trials = load_dataset(args.data)
    if args.all_test:
        chosen = _select(trials, meta["test_ids"])
    elif args.trials:
        chosen = _select(trials, args.trials)
    else:
        raise UsageError("give trial ids or --all-test")

    if args.references == "zeros":
        refs = ReferenceSet.zeros()
    else:
        X_train, _ = stack(_select(trials, meta["train_ids"]))
        refs = ReferenceSet.sample(apply_normalization(X_train, manifest), args.n_references, args.seed)

    X, _ = stack(chosen)
    maps, fx, fr = deep_shap_batch(model, apply_normalization(X, manifest), refs)
    if args.positive_only:
        maps = np.maximum(maps, 0.0)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rates = subject_stutter_rates([t.subject_id for t in trials], [t.label for t in trials])
    with open(out / "metadata.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "subject_id", "session_id", "paradigm", "label", "stutter_rate",
                    "prediction", "baseline", "reference"])
        for t, p in zip(chosen, fx):
            w.writerow([t.trial_id, t.subject_id, t.session_id, t.paradigm, t.label, repr(rates[t.subject_id]),
                        repr(float(p)), repr(fr), refs.provenance])
    for t, values, p in zip(chosen, maps, fx):
        amap = AttributionMap(values, t.trial_id, "stuttered", refs.provenance, float(p), fr)
        (out / f"{t.trial_id}.csv").write_text(amap.to_csv())
        if not args.no_heatmaps:
            save_heatmap(out / f"{t.trial_id}.ppm", values, args.cell)
    print(f"wrote {len(chosen)} attribution maps to {out}")
    return 0


# -- stats ----------------------------------------------------------------------

def read_metadata(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{path}: no metadata rows")
    table = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    if "stutter_rate" in table:
        table["stutter_rate"] = table["stutter_rate"].astype(float)
    return table


def cmd_stats(args) -> int:
    adir = Path(args.attributions)
    meta_path = Path(args.metadata) if args.metadata else adir / "metadata.csv"
    if not meta_path.exists():
        raise UsageError(f"metadata file {meta_path} not found")
    meta = read_metadata(meta_path)
    needed = {"label": "label", "window": "label", "paradigm": "paradigm"}.get(args.factor.replace("-", "_"))
    if needed and needed not in meta:
        raise UsageError(f"metadata has no {needed!r} column for factor {args.factor}")
    if args.factor == "stutter-band" and "stutter_rate" not in meta and "subject_id" not in meta:
        raise UsageError("metadata needs stutter_rate or subject_id for factor stutter-band")
    paths = [adir / f"{tid}.csv" for tid in meta["trial_id"]]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise UsageError(f"attribution files missing: {', '.join(missing[:5])}")
    maps = np.stack([read_attribution_csv(p) for p in paths])
    scope = args.scope if args.scope in ("all", "upper", "lower") else int(args.scope)
    try:
        spec = GroupingSpec(args.factor, args.threshold, scope=scope, positive_only=args.positive_only)
        rows = attribution_anova(maps, meta, spec)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"anova_{spec.factor}"
    (out / f"{stem}.csv").write_text(anova_csv(rows))
    summary = significance_summary(rows)
    (out / f"{stem}_summary.txt").write_text(summary)
    sys.stdout.write(summary)
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="facestutter", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    subs = parser.add_subparsers(dest="command", required=True)
    table = {}

    p = subs.add_parser("synth", help="generate a synthetic AU dataset with a planted signal")
    for f in fields(SynthConfig):
        if f.name == "seed":
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    table["synth"] = (p, cmd_synth)

    p = subs.add_parser("train", help="cross-validate a model and save the best fold")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=("cnn-a", "cnn-b", "rf"), default="cnn-a")
    p.add_argument("--kernel", type=int, default=4, help="CNN-B kernel edge length (2, 4 or 6)")
    p.add_argument("--paradigm", choices=("all",) + PARADIGMS, default="all")
    p.add_argument("--dropout", type=float, default=0.25)
    p.add_argument("--rf-trees", type=int, default=500)
    p.add_argument("--rf-max-depth", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--early-stop-patience", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lr-patience", type=int, default=15)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--shuffle-labels", action="store_true", help="permute labels (chance-level control)")
    p.add_argument("--seed", type=int, default=0)
    table["train"] = (p, cmd_train)

    p = subs.add_parser("explain", help="DeepSHAP attribution maps and heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", nargs="*", default=[])
    p.add_argument("--all-test", action="store_true")
    p.add_argument("--references", choices=("train", "zeros"), default="train")
    p.add_argument("--n-references", type=int, default=100)
    p.add_argument("--positive-only", action="store_true")
    p.add_argument("--cell", type=int, default=8, help="heatmap pixels per AU/frame cell")
    p.add_argument("--no-heatmaps", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    table["explain"] = (p, cmd_explain)

    p = subs.add_parser("stats", help="ANOVA over a directory of attribution maps")
    p.add_argument("--attributions", required=True)
    p.add_argument("--metadata", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--factor", choices=("label", "paradigm", "stutter-band", "window"), default="label")
    p.add_argument("--scope", default="all", help="all, upper, lower or one AU id")
    p.add_argument("--threshold", type=float, default=40.0, help="stutter-rate band split, percent")
    p.add_argument("--positive-only", action="store_true")
    table["stats"] = (p, cmd_stats)

    for sub, _ in table.values():
        sub.add_argument("--config", default=None, help="key = value file mirroring the flags")
    return parser, table


def main(argv=None) -> int:
    parser, table = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        sub, func = table[args.command]
        args = _apply_config(parser, sub, argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "stats" and args.scope not in ("all", "upper", "lower"):
            if not args.scope.isdigit() or int(args.scope) not in AU_IDS:
                raise UsageError(f"--scope must be all, upper, lower or an AU id, got {args.scope!r}")
        return func(args)
    except UsageError as exc:
        print(f"facestutter: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"facestutter: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
