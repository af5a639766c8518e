"""Command-line interface.

Subcommands: episode, evaluate, train-toy, eigenseg, gradcheck,
export-fixtures. Every flag can also come from a flat key=value config
file (`--config`); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import fixtures, harness, matching, tensor
from .features import read_features, toy_extract_features, write_features
from .fusion import FusionConfig
from .spectral import SpectralParams, eigensegments
from .tensor import Tensor


def _save_gray(path, arr) -> None:
    """Float map -> 8-bit grayscale PNG (min-max normalized)."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    Image.fromarray((scaled * 255).astype(np.uint8)).save(path)


def _save_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)).save(path)


def read_config_file(path) -> dict[str, str]:
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _merge_config(args: argparse.Namespace, argv: list[str]) -> argparse.Namespace:
    """Fill flags the user did not pass from the config file."""
    if not getattr(args, "config", None):
        return args
    file_values = read_config_file(args.config)
    passed = {a.lstrip("-").replace("-", "_").split("=")[0]
              for a in argv if a.startswith("--")}
    for key, raw in file_values.items():
        if key in passed or not hasattr(args, key):
            continue
        current = getattr(args, key)
        if isinstance(current, bool):
            setattr(args, key, raw.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(args, key, int(raw))
        elif isinstance(current, float):
            setattr(args, key, float(raw))
        else:
            setattr(args, key, raw)
    return args


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=0)


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--dataset", default="toy", choices=harness.DATASETS)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--tau", type=float, default=0.4)
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--n-eig", type=int, default=5)
    p.add_argument("--fusion", default="none", choices=["none", "e1", "ebest"])
    p.add_argument("--branch", default="two", choices=["two", "single"])
    p.add_argument("--features-dir", default=None)
    p.add_argument("--params", default=None, help="SCCP checkpoint path")


def _load_model(args, corpus) -> matching.MatchingModel:
    if args.params:
        model = matching.load_checkpoint(args.params)
        if (args.branch == "single") != model.single_branch:
            raise SystemExit("--branch does not match the checkpoint's branch mode")
        return model
    return matching.init_model(corpus.group_sizes(), seed=args.seed,
                               single_branch=args.branch == "single")


def _spec_for(args, corpus) -> harness.FoldSpec:
    names = corpus.class_names if args.dataset == "toy" else None
    return harness.fold_spec(args.dataset, args.fold, class_names=names)


def cmd_evaluate(args) -> int:
    corpus = harness.load_dataset(args.root, features_dir=args.features_dir)
    spec = _spec_for(args, corpus)
    model = _load_model(args, corpus)
    cfg = harness.EvalConfig(
        k=args.k, episodes_per_class=args.episodes_per_class, seed=args.seed,
        fusion=FusionConfig(mode=args.fusion, kshot_tau=args.tau),
        stage=args.stage,
        spectral=SpectralParams(alpha=args.alpha, n_eigenvectors=args.n_eig))
    report = harness.evaluate(corpus, spec, model, cfg)
    sys.stdout.write(report.to_text())
    if args.out:
        out = Path(args.out)
        if out.suffix == ".csv":
            out.write_text(report.to_csv())
        else:
            out.write_text(report.to_text())
    return 0


def cmd_episode(args) -> int:
    corpus = harness.load_dataset(args.root, features_dir=args.features_dir)
    spec = _spec_for(args, corpus)
    model = _load_model(args, corpus)
    class_id = args.class_id or spec.test_classes[0]
    episode = harness.sample_episode(corpus, class_id, args.k,
                                     (args.seed, 2, class_id, 0))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    q_feats = corpus.features(episode.query_id)
    gt = corpus.mask(episode.query_id, class_id)
    Image.fromarray(corpus.image(episode.query_id)).save(out / "query.png")
    _save_mask(out / "query_gt.png", gt)
    segs = eigensegments(corpus.image(episode.query_id), q_feats.semantic(),
                         SpectralParams(alpha=args.alpha, n_eigenvectors=args.n_eig))
    for seg in segs:
        _save_gray(out / f"eigenvector_{seg.index}.png", seg.soft)
        _save_mask(out / f"eigensegment_{seg.index}.png", seg.hard)
    passes = []
    for i, sid in enumerate(episode.support_ids):
        s_mask = corpus.mask(sid, class_id)
        Image.fromarray(corpus.image(sid)).save(out / f"support_{i}.png")
        _save_mask(out / f"support_{i}_mask.png", s_mask)
        res = matching.predict(q_feats, corpus.features(sid), s_mask, model,
                               corpus.image_hw)
        _save_gray(out / f"pass_{i}_prob_init.png", res.prob_init[1])
        _save_mask(out / f"pass_{i}_mask_init.png", res.mask_init)
        _save_gray(out / f"pass_{i}_prob_self.png", res.prob_self[1])
        _save_gray(out / f"pass_{i}_prob_merge.png", res.prob_merge[1])
        _save_mask(out / f"pass_{i}_mask_merge.png", res.mask_merge)
        base = res.mask_merge
        if args.fusion == "e1":
            base = np.logical_or(base > 0.5, segs[0].hard)
        elif args.fusion == "ebest":
            from .fusion import select_best_eigensegment
            base = np.logical_or(base > 0.5,
                                 select_best_eigensegment(segs, gt).hard)
        _save_mask(out / f"pass_{i}_fused.png", base)
        passes.append(np.asarray(base))
    from .fusion import kshot_vote
    final = kshot_vote(passes, args.tau)
    _save_mask(out / "prediction.png", final)
    print(f"episode class={class_id} query={episode.query_id} "
          f"supports={','.join(episode.support_ids)} "
          f"iou={harness.iou(final, gt > 0.5):.6f} out={out}")
    return 0


def cmd_train_toy(args) -> int:
    corpus = harness.load_dataset(args.root, features_dir=args.features_dir)
    spec = _spec_for(args, corpus)
    model = matching.init_model(corpus.group_sizes(), seed=args.seed,
                                single_branch=args.branch == "single")
    episodes = harness.build_train_episodes(corpus, spec.train_classes,
                                            args.episodes, seed=args.seed)
    cfg = matching.TrainConfig(lr=args.lr, weight_decay=args.weight_decay,
                               momentum=args.momentum)
    losses = matching.train_toy(episodes, model, cfg)
    matching.save_checkpoint(model, args.out)
    curve_path = Path(args.out).with_suffix(".losses.csv")
    curve_path.write_text("episode,loss\n" + "".join(
        f"{i},{v:.6f}\n" for i, v in enumerate(losses)))
    head = losses[:20].mean() if len(losses) >= 20 else losses.mean()
    tail = losses[-20:].mean() if len(losses) >= 20 else losses.mean()
    print(f"trained {len(losses)} episodes: initial loss {head:.4f} "
          f"final loss {tail:.4f} -> {args.out}")
    return 0


def cmd_eigenseg(args) -> int:
    image = np.asarray(Image.open(args.image).convert("RGB"))
    if args.features:
        fs = read_features(args.features)
    else:
        fs = toy_extract_features(image, Path(args.image).stem)
    params = SpectralParams(alpha=args.alpha, n_eigenvectors=args.n_eig)
    segs = eigensegments(image, fs.semantic(), params)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seg in segs:
        _save_gray(out / f"soft_{seg.index}.png", seg.soft)
        _save_mask(out / f"hard_{seg.index}.png", seg.hard)
        print(f"eigensegment {seg.index}: eigenvalue {seg.eigenvalue:.6f} "
              f"pixels {int(seg.hard.sum())}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0

    def check(name, fn, arrays, max_coords=None):
        nonlocal failures
        try:
            worst = tensor.gradcheck(fn, arrays, max_coords=max_coords,
                                     seed=args.seed)
            print(f"[PASS] {name}: max rel err {worst:.2e}")
        except tensor.NumericsError as exc:
            failures += 1
            print(f"[FAIL] {name}: {exc}")

    x = rng.normal(size=(2, 5, 5))
    check("hadamard", lambda p: tensor.mean_all(
        tensor.hadamard(p[0], p[1])), [x, rng.normal(size=(2, 5, 5))])
    check("conv2d", lambda p: tensor.mean_all(tensor.hadamard(
        tensor.conv2d(Tensor(x, dtype=np.float64), p[0], p[1]),
        tensor.conv2d(Tensor(x, dtype=np.float64), p[0], p[1]))),
        [rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))])
    check("bilinear_resize", lambda p: tensor.mean_all(tensor.hadamard(
        tensor.bilinear_resize(p[0], 7, 9), tensor.bilinear_resize(p[0], 7, 9))),
        [rng.normal(size=(2, 4, 5))])
    check("softmax+bce", lambda p: matching.bce_foreground(
        tensor.softmax_channels(p[0]), (x[0] > 0).astype(np.float64)),
        [rng.normal(size=(2, 5, 5))])
    check("group_norm", lambda p: tensor.mean_all(tensor.hadamard(
        tensor.group_norm(p[0], p[1], p[2], 2),
        tensor.group_norm(p[0], p[1], p[2], 2))),
        [rng.normal(size=(4, 3, 3)), rng.normal(size=(4,)), rng.normal(size=(4,))])
    block = rng.normal(size=(1, 3, 3, 4, 4))

    def cp_loss(p):
        y = matching.center_pivot_conv4d(Tensor(block, dtype=np.float64),
                                         p[0], p[1], p[2], support_stride=2)
        return tensor.mean_all(tensor.hadamard(y, y))

    check("center_pivot_conv4d", cp_loss,
          [rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 3, 3)),
           rng.normal(size=(2,))])

    print("gradcheck:", "FAILED" if failures else "all ops passed")
    return 1 if failures else 0


def cmd_export_fixtures(args) -> int:
    root = Path(args.root)
    fixtures.generate_corpus(root, n_images=args.images, n_classes=args.classes,
                             size=args.size, seed=args.seed,
                             distractor_prob=args.distractor_prob)
    feat_dir = root / "features"
    feat_dir.mkdir(exist_ok=True)
    corpus = harness.load_dataset(root)
    for image_id in corpus.image_ids:
        fs = toy_extract_features(corpus.image(image_id), image_id)
        write_features(fs, feat_dir / f"{image_id}.feat")
    print(f"wrote {len(corpus.image_ids)} images, masks, and feature files "
          f"under {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sccnet",
        description="few-shot segmentation via cross/self correlation matching "
                    "and spectral eigensegment fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="episodic mIoU evaluation")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--episodes-per-class", type=int, default=1000)
    p.add_argument("--stage", default="merge", choices=["merge", "cross"])
    p.add_argument("--out", default=None, help="write report (.txt or .csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("episode", help="run one episode, dump intermediate masks")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--class-id", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_episode)

    p = sub.add_parser("train-toy", help="train on a toy blob corpus")
    _add_common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--dataset", default="toy", choices=["toy"])
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--branch", default="two", choices=["two", "single"])
    p.add_argument("--features-dir", default=None)
    p.add_argument("--lr", type=float, default=9e-4)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eigenseg", help="spectral eigensegments of one image")
    _add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--features", default=None,
                   help="SCCF feature file (toy extractor when omitted)")
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--n", "--n-eig", dest="n_eig", type=int, default=5)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eigenseg)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-fixtures", help="generate the toy corpus + features")
    _add_common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--images", type=int, default=48)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--distractor-prob", type=float, default=0.25)
    p.set_defaults(func=cmd_export_fixtures)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args = _merge_config(args, argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
