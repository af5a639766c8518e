"""Dataset ingestion, fold management, episodic sampling, and evaluation.

Dataset layout: `root/images/*.png` (RGB, one fixed size per corpus,
divisible by 8), `root/masks/*.png` (8-bit class-indexed, same stem),
`root/classes.txt` (one class name per line; mask value = 1-based line
number, 0 = background). Features come from the toy extractor unless a
features directory of SCCF files is supplied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import matching as M
from .features import FeatureStack, read_features, toy_extract_features
from .fusion import FusionConfig, fuse_or, kshot_vote, mask_iou, select_best_eigensegment
from .spectral import SpectralParams, eigensegments

ISAID_CLASSES = [
    "ship", "storage tank", "baseball diamond", "tennis court",
    "basketball court", "ground track field", "bridge", "large vehicle",
    "small vehicle", "helicopter", "swimming pool", "roundabout",
    "soccer ball field", "plane", "harbor",
]

DLRSD_CLASSES = [
    "airplane", "bare soil", "buildings", "cars", "chaparral", "court",
    "dock", "field", "grass", "mobile home", "pavement", "sand", "sea",
    "ship", "tanks",
]

DATASETS = ("isaid5i", "dlrsd5i", "toy")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FoldSpec:
    dataset: str
    fold: int
    test_classes: tuple[int, ...]   # 1-based class ids
    train_classes: tuple[int, ...]

    def __post_init__(self):
        if set(self.test_classes) & set(self.train_classes):
            raise ValueError("test and train classes must be disjoint")


def fold_spec(dataset: str, fold: int, class_names: list[str] | None = None) -> FoldSpec:
    """Threefold splits: the named datasets use the published 5-class test
    folds; the toy dataset holds out one class per fold (fold i tests the
    (n_classes - i)-th class)."""
    if dataset not in DATASETS:
        raise DatasetError(f"unknown dataset {dataset!r}")
    if fold not in (0, 1, 2):
        raise DatasetError("fold must be 0, 1, or 2")
    if dataset in ("isaid5i", "dlrsd5i"):
        n = 15
        test = tuple(range(5 * fold + 1, 5 * fold + 6))
    else:
        if class_names is None:
            raise DatasetError("toy folds need the corpus class list")
        n = len(class_names)
        if n < 2:
            raise DatasetError("toy corpus needs at least two classes")
        test = (n - fold,)
        if test[0] < 1:
            raise DatasetError(f"fold {fold} needs at least {fold + 1} classes")
    train = tuple(c for c in range(1, n + 1) if c not in test)
    return FoldSpec(dataset=dataset, fold=fold, test_classes=test,
                    train_classes=train)


def class_names_for(spec: FoldSpec, corpus: "Corpus | None" = None) -> list[str]:
    if spec.dataset == "isaid5i":
        return ISAID_CLASSES
    if spec.dataset == "dlrsd5i":
        return DLRSD_CLASSES
    if corpus is None:
        raise DatasetError("toy class names come from the corpus")
    return corpus.class_names


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    root: Path
    class_names: list[str]
    image_ids: list[str]
    classes_present: dict[str, frozenset[int]]
    image_hw: tuple[int, int]
    features_dir: Path | None = None
    _images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _masks: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _features: dict[str, FeatureStack] = field(default_factory=dict, repr=False)

    def image(self, image_id: str) -> np.ndarray:
        if image_id not in self._images:
            arr = np.asarray(Image.open(self.root / "images" / f"{image_id}.png")
                             .convert("RGB"))
            self._images[image_id] = arr
        return self._images[image_id]

    def raw_mask(self, image_id: str) -> np.ndarray:
        if image_id not in self._masks:
            self._masks[image_id] = np.asarray(
                Image.open(self.root / "masks" / f"{image_id}.png"))
        return self._masks[image_id]

    def mask(self, image_id: str, class_id: int) -> np.ndarray:
        return (self.raw_mask(image_id) == class_id).astype(np.float32)

    def features(self, image_id: str) -> FeatureStack:
        if image_id not in self._features:
            if self.features_dir is not None:
                fs = read_features(self.features_dir / f"{image_id}.feat")
            else:
                fs = toy_extract_features(self.image(image_id), image_id)
            self._features[image_id] = fs
        return self._features[image_id]

    def pool(self, class_id: int) -> list[str]:
        return [i for i in self.image_ids if class_id in self.classes_present[i]]

    def group_sizes(self) -> list[int]:
        fs = self.features(self.image_ids[0])
        return [len(g) for g in fs.groups]


def load_dataset(root, features_dir=None) -> Corpus:
    root = Path(root)
    classes_file = root / "classes.txt"
    if not classes_file.exists():
        raise DatasetError(f"{root}: missing classes.txt")
    class_names = [ln.strip() for ln in classes_file.read_text().splitlines()
                   if ln.strip()]
    image_paths = sorted((root / "images").glob("*.png"))
    if not image_paths:
        raise DatasetError(f"{root}: empty corpus")
    ids, present = [], {}
    hw = None
    for path in image_paths:
        image_id = path.stem
        mask_path = root / "masks" / f"{image_id}.png"
        if not mask_path.exists():
            raise DatasetError(f"missing mask for listed image {image_id}")
        mask = np.asarray(Image.open(mask_path))
        if mask.ndim != 2:
            raise DatasetError(f"{image_id}: mask must be single-channel")
        top = int(mask.max(initial=0))
        if top > len(class_names):
            raise DatasetError(
                f"{image_id}: unknown class index {top} (corpus has "
                f"{len(class_names)} classes)")
        with Image.open(path) as im:
            size = (im.height, im.width)
        if hw is None:
            hw = size
        elif size != hw:
            raise DatasetError(f"{image_id}: size {size} differs from corpus {hw}")
        if size[0] % 8 or size[1] % 8:
            raise DatasetError(f"{image_id}: size {size} not divisible by 8")
        ids.append(image_id)
        present[image_id] = frozenset(int(c) for c in np.unique(mask) if c > 0)
    return Corpus(root=root, class_names=class_names, image_ids=ids,
                  classes_present=present, image_hw=hw,
                  features_dir=Path(features_dir) if features_dir else None)


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    class_id: int
    support_ids: tuple[str, ...]
    query_id: str
    seed: tuple[int, ...]


def sample_episode(corpus: Corpus, class_id: int, k: int,
                   seed) -> Episode:
    """Uniform sampling without replacement from the class's image pool:
    k supports plus one distinct query, deterministic given the seed."""
    pool = corpus.pool(class_id)
    if len(pool) < k + 1:
        raise DatasetError(
            f"insufficient images for class {class_id}: need {k + 1}, "
            f"have {len(pool)}")
    seed_key = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    rng = np.random.default_rng(np.random.SeedSequence(list(seed_key)))
    chosen = rng.choice(len(pool), size=k + 1, replace=False)
    ids = [pool[int(c)] for c in chosen]
    return Episode(class_id=class_id, support_ids=tuple(ids[:k]),
                   query_id=ids[k], seed=seed_key)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """TP / (TP + FN + FP) on pixel counts; both-empty counts as 1.0."""
    return mask_iou(pred, gt)


def build_train_episodes(corpus: Corpus, train_classes, n_episodes: int,
                         seed: int) -> list[M.TrainEpisode]:
    """1-shot training stream: a uniformly random eligible class per step."""
    eligible = [c for c in train_classes if len(corpus.pool(c)) >= 2]
    if not eligible:
        raise DatasetError("no train class has enough images for an episode")
    episodes = []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E41]))
    for i in range(n_episodes):
        class_id = int(eligible[rng.integers(len(eligible))])
        ep = sample_episode(corpus, class_id, 1, (seed, 1, class_id, i))
        episodes.append(M.TrainEpisode(
            query=corpus.features(ep.query_id),
            query_mask=corpus.mask(ep.query_id, class_id),
            support=corpus.features(ep.support_ids[0]),
            support_mask=corpus.mask(ep.support_ids[0], class_id),
            image_hw=corpus.image_hw))
    return episodes


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalConfig:
    k: int = 1
    episodes_per_class: int = 100
    seed: int = 0
    fusion: FusionConfig = FusionConfig()
    stage: str = "merge"            # "merge" or "cross" (ablation)
    spectral: SpectralParams = field(default_factory=SpectralParams)

    def __post_init__(self):
        if self.stage not in ("merge", "cross"):
            raise ValueError("stage must be 'merge' or 'cross'")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class ClassResult:
    class_id: int
    name: str
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else self.tp / denom


@dataclass
class EvalReport:
    dataset: str
    fold: int
    mode: str
    stage: str
    k: int
    tau: float
    alpha: float
    n_eigenvectors: int
    seed: int
    episodes_per_class: int
    branch: str
    oracle: bool
    per_class: list[ClassResult]

    @property
    def miou(self) -> float:
        return float(np.mean([c.iou for c in self.per_class]))

    def to_text(self) -> str:
        lines = [
            f"dataset={self.dataset} fold={self.fold} mode={self.mode} "
            f"stage={self.stage} k={self.k} tau={self.tau} alpha={self.alpha} "
            f"n_eig={self.n_eigenvectors} seed={self.seed} "
            f"episodes_per_class={self.episodes_per_class} branch={self.branch}"
            + (" [ORACLE]" if self.oracle else "")
        ]
        for c in self.per_class:
            lines.append(f"class {c.class_id:2d} {c.name:<20s} "
                         f"tp={c.tp} fp={c.fp} fn={c.fn} iou={c.iou:.6f}")
        lines.append(f"mIoU {self.miou:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["class_id,name,tp,fp,fn,iou"]
        for c in self.per_class:
            rows.append(f"{c.class_id},{c.name},{c.tp},{c.fp},{c.fn},{c.iou:.6f}")
        rows.append(f"mIoU,,,,,{self.miou:.6f}")
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class EvalMode:
    name: str
    stage: str = "merge"
    fusion: str = "none"


def evaluate_modes(corpus: Corpus, spec: FoldSpec, model: M.MatchingModel,
                   cfg: EvalConfig, modes: list[EvalMode]) -> dict[str, EvalReport]:
    """Evaluate several (stage, fusion) variants over one shared episode
    stream; forward passes are shared since the variants differ only in
    post-processing."""
    names = class_names_for(spec, corpus if spec.dataset == "toy" else None)
    results = {m.name: {c: ClassResult(c, names[c - 1])
                        for c in spec.test_classes} for m in modes}
    seg_cache: dict = {}
    for class_id in spec.test_classes:
        for e in range(cfg.episodes_per_class):
            episode = sample_episode(corpus, class_id, cfg.k,
                                     (cfg.seed, 2, class_id, e))
            gt = corpus.mask(episode.query_id, class_id) > 0.5
            q_feats = corpus.features(episode.query_id)
            segs = None
            fwd = [M.predict(q_feats, corpus.features(sid),
                             corpus.mask(sid, class_id), model, corpus.image_hw)
                   for sid in episode.support_ids]
            for mode in modes:
                if mode.fusion in ("e1", "ebest") and segs is None:
                    if episode.query_id not in seg_cache:
                        seg_cache[episode.query_id] = eigensegments(
                            corpus.image(episode.query_id), q_feats.semantic(),
                            cfg.spectral)
                    segs = seg_cache[episode.query_id]
                passes = []
                for res in fwd:
                    base = res.mask_merge if mode.stage == "merge" else res.mask_init
                    if mode.fusion == "e1":
                        base = fuse_or(base, segs[0].hard)
                    elif mode.fusion == "ebest":
                        base = fuse_or(base, select_best_eigensegment(segs, gt).hard)
                    passes.append(base)
                pred = kshot_vote(passes, cfg.fusion.kshot_tau)
                acc = results[mode.name][class_id]
                acc.tp += int(np.logical_and(pred, gt).sum())
                acc.fp += int(np.logical_and(pred, ~gt).sum())
                acc.fn += int(np.logical_and(~pred, gt).sum())
    reports = {}
    for mode in modes:
        reports[mode.name] = EvalReport(
            dataset=spec.dataset, fold=spec.fold, mode=mode.fusion,
            stage=mode.stage, k=cfg.k, tau=cfg.fusion.kshot_tau,
            alpha=cfg.spectral.alpha,
            n_eigenvectors=cfg.spectral.n_eigenvectors, seed=cfg.seed,
            episodes_per_class=cfg.episodes_per_class,
            branch="single" if model.single_branch else "two",
            oracle=mode.fusion == "ebest",
            per_class=[results[mode.name][c] for c in spec.test_classes])
    return reports


def evaluate(corpus: Corpus, spec: FoldSpec, model: M.MatchingModel,
             cfg: EvalConfig) -> EvalReport:
    mode = EvalMode(name="main", stage=cfg.stage, fusion=cfg.fusion.mode)
    return evaluate_modes(corpus, spec, model, cfg, [mode])["main"]
