"""Attribution maps for the hold-out test set and their ANOVA summaries.

Trains one CNN-A fold on the synthetic data, computes DeepSHAP maps for
every test trial against 100 training references, and reports the label,
window and stutter-band ANOVAs plus window means of AU6 and AU14.

    python3 scripts/explain_synthetic.py --out runs/explain
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from facestutter.data import SynthConfig, apply_normalization, generate_synthetic, metadata_table, stack
from facestutter.explain import ReferenceSet, deep_shap_batch, window_means
from facestutter.heatmap import save_heatmap
from facestutter.models import ModelConfig
from facestutter.stats import WINDOWS, GroupingSpec, anova_csv, attribution_anova, significance_summary
from facestutter.training import TrainConfig, cross_validate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-trials", type=int, default=3704)
    ap.add_argument("--max-epochs", type=int, default=500)
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/explain")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    trials, _ = generate_synthetic(SynthConfig(n_trials=args.n_trials, seed=args.seed))
    X, y = stack(trials)
    res = cross_validate(X, y, ModelConfig(seed=args.seed), TrainConfig(max_epochs=args.max_epochs, seed=args.seed),
                         folds=[args.fold])
    model = res.models[0]
    Xn = apply_normalization(X, res.manifest)
    refs = ReferenceSet.sample(Xn[res.plan.folds[args.fold][0]], k=100, seed=args.seed)
    test = res.plan.test
    maps, _, _ = deep_shap_batch(model, Xn[test], refs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {k: v[test] for k, v in metadata_table(trials).items()}
    for factor in ("label", "window", "paradigm", "stutter_band"):
        rows = attribution_anova(maps, meta, GroupingSpec(factor))
        (out / f"anova_{factor}.csv").write_text(anova_csv(rows))
        print(f"== {factor}\n{significance_summary(rows)}")

    stuttered = maps[y[test] == 1]
    for au, row in ((6, 4), (14, 10)):
        means = [float(window_means(stuttered, w)[:, row].mean()) for w in WINDOWS]
        print(f"AU{au} stuttered window means: " +
              ", ".join(f"{w[0]:g}-{w[1]:g} ms {m:+.2e}" for w, m in zip(WINDOWS, means)))
    save_heatmap(out / "mean_stuttered.ppm", stuttered.mean(axis=0))
    save_heatmap(out / "mean_fluent.ppm", maps[y[test] == 0].mean(axis=0))
    np.save(out / "test_maps.npy", maps)


if __name__ == "__main__":
    main()
