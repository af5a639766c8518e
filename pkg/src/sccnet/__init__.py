"""Few-shot segmentation via cross/self correlation matching, spectral
eigensegmentation, and mask fusion, on a minimal autograd tensor engine."""

from .correlation import (HypercorrelationPyramid, build_pyramid, correlation_4d,
                          mask_project, masked_feature, self_correlation)
from .features import (FeatureStack, read_features, toy_extract_features,
                       write_features)
from .fusion import FusionConfig, fuse_or, kshot_vote, select_best_eigensegment
from .harness import (Corpus, EvalConfig, EvalReport, Episode, FoldSpec,
                      build_train_episodes, evaluate, evaluate_modes, fold_spec,
                      iou, load_dataset, sample_episode)
from .matching import (ArchConfig, MatchingModel, TrainConfig, forward_full,
                       init_model, load_checkpoint, predict, save_checkpoint,
                       train_toy)
from .spectral import (Eigensegment, SpectralParams, adaptive_threshold,
                       eigensegments, eigensolve, multi_otsu)
from .tensor import Tensor, backward, gradcheck, no_grad

__all__ = [name for name in dir() if not name.startswith("_")]
