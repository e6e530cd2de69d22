"""Nested cross-validation, bootstrap intervals and model comparison."""

from stainalign.evaluation import compare_true_positives, make_cv_folds, run_nested_eval
from stainalign.synth import synth_embeddings
from stainalign.trainer import TrainConfig

data = synth_embeddings(n_pairs=60, seed=0)

for f in make_cv_folds(data, k=5, seed=0):
    print("fold", f.fold, "train/val/test sizes", len(f.train), len(f.validation), len(f.test))

results = {}
for mode in ("full", "finetune", "base"):
    cfg = TrainConfig(mode="full" if mode == "base" else mode, seed=0)
    res = run_nested_eval(data, cfg, k=5, seed=0, frozen=mode == "base", n_boot=500)
    results[mode] = res
    p = res.pooled
    print()
    print(mode, "AUC %.3f %s  F1 %.3f %s" % (p.auc, [round(v, 3) for v in p.ci["auc"]], p.f1, [round(v, 3) for v in p.ci["f1"]]))
    print(p.confusion_table())
    a = res.alignment
    print("paired %.3f shuffled %.3f difference %.3f %s" % (
        a.paired_mean, a.shuffled_mean, a.difference_mean, [round(v, 3) for v in a.difference_ci]))

p, n = compare_true_positives(results["full"], results["finetune"], "joint")
print()
print("Wilcoxon on %d shared true positives, full vs finetune: p = %.4f" % (n, p))
