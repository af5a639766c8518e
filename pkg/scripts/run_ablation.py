#!/usr/bin/env python3
"""Ablation harness over the toy corpus: component table (cross-only /
merged / +E1 / +Ebest), two-branch vs single-branch weights, and the
alpha sweep of the affinity combination.

    python3 scripts/run_ablation.py --work-dir /tmp/sccnet-ablation
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from sccnet import fixtures, harness, matching  # noqa: E402
from sccnet.fusion import FusionConfig  # noqa: E402
from sccnet.spectral import SpectralParams  # noqa: E402


def train(corpus, spec, seed, single_branch, episodes):
    model = matching.init_model(corpus.group_sizes(), seed=seed,
                                single_branch=single_branch)
    stream = harness.build_train_episodes(corpus, spec.train_classes, episodes,
                                          seed=seed)
    matching.train_toy(stream, model)
    return model


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--work-dir", default="/tmp/sccnet-ablation")
    ap.add_argument("--train-episodes", type=int, default=200)
    ap.add_argument("--eval-episodes", type=int, default=300)
    ap.add_argument("--seeds", type=int, nargs="+", default=[201, 202, 203])
    ap.add_argument("--alphas", type=float, nargs="+",
                    default=[1.0, 5.0, 10.0, 20.0, 50.0])
    args = ap.parse_args()

    corpus_root = Path(args.work_dir) / "corpus"
    if not (corpus_root / "classes.txt").exists():
        fixtures.generate_corpus(corpus_root, n_images=48, n_classes=4, size=64,
                                 seed=0, distractor_prob=0.25)
    corpus = harness.load_dataset(corpus_root)
    spec = harness.fold_spec("toy", 0, class_names=corpus.class_names)
    model = train(corpus, spec, 7, False, args.train_episodes)

    print("== components (averaged over seeds) ==")
    modes = [harness.EvalMode("cross-only", stage="cross"),
             harness.EvalMode("merged"),
             harness.EvalMode("merged+E1", fusion="e1"),
             harness.EvalMode("merged+Ebest", fusion="ebest")]
    sums = {m.name: [] for m in modes}
    for seed in args.seeds:
        cfg = harness.EvalConfig(k=1, episodes_per_class=args.eval_episodes,
                                 seed=seed)
        for name, rep in harness.evaluate_modes(corpus, spec, model, cfg,
                                                modes).items():
            sums[name].append(100 * rep.miou)
    for m in modes:
        tag = " (oracle)" if m.fusion == "ebest" else ""
        print(f"{m.name:<14s} mIoU {np.mean(sums[m.name]):6.2f}{tag}")

    print("\n== branch design ==")
    single = train(corpus, spec, 7, True, args.train_episodes)
    for name, mdl in (("two-branch", model), ("single-branch", single)):
        cfg = harness.EvalConfig(k=1, episodes_per_class=args.eval_episodes,
                                 seed=args.seeds[0])
        rep = harness.evaluate(corpus, spec, mdl, cfg)
        print(f"{name:<14s} mIoU {100 * rep.miou:6.2f}")

    print("\n== alpha sweep (merged+E1) ==")
    for alpha in args.alphas:
        cfg = harness.EvalConfig(k=1, episodes_per_class=args.eval_episodes,
                                 seed=args.seeds[0], fusion=FusionConfig(mode="e1"),
                                 spectral=SpectralParams(alpha=alpha))
        rep = harness.evaluate(corpus, spec, model, cfg)
        print(f"alpha={alpha:<5g} mIoU {100 * rep.miou:6.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
