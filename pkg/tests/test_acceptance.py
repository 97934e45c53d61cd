"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are repeated in an "acceptance criteria" section at the end of the
pytest run. The training smoke dominates the runtime (about 20 minutes on one
CPU core).
"""
import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from scipy.stats import special_ortho_group

from acceptance_fixtures import collapse_ratio, generators_identical, record, smoke_config
from lungct_gan.checkpoint import load_checkpoint, save_checkpoint
from lungct_gan.config import PATCH_SHAPE, DiscriminatorConfig, GeneratorConfig, LargeEbsConfig
from lungct_gan.discriminator import build_discriminator
from lungct_gan.evaluation import FeatureStats, compute_fid, frechet_distance
from lungct_gan.extractors import get_extractor
from lungct_gan.generators import build_generator, count_parameters, generate, generate_from_styles, \
    generate_mixed, map_latent
from lungct_gan.losses import LOSS_FUNCTIONS, relativistic_losses, standard_gan_losses
from lungct_gan.minibatch import frozen_buffers, largeebs_select, mdmin_scores, pairwise_l1
from lungct_gan.patches import PatchDataset, epoch_plan, sample_patch_batch, window_and_scale
from lungct_gan.phantoms import phantom_dataset
from lungct_gan.stats import summary_consistent_sample, welch_t_test
from lungct_gan.structure import branch_count_roc, count_branch_points, skeletonize
from lungct_gan.training import METHODS, iterations_per_epoch, train
from test_evaluation import fid_noise_trial
from test_generators import adain_probe, top_singular_values
from test_losses import network_fd_error, score_level_fd_error
from test_minibatch import brute_mdmin, brute_pairwise, brute_select
from test_stats import welch_mismatch
from test_structure import (asterisk, bootstrap_coverage, line, mann_whitney_auc, n_components, plus,
                            skeleton_violations, tube)

SMALL = Fraction(1, 8)


def spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_frechet_math():
    rng = np.random.default_rng(0)
    a = FeatureStats(rng.normal(size=6), spd(rng, 6), 100)
    b = FeatureStats(rng.normal(size=6), spd(rng, 6), 100)
    q = special_ortho_group.rvs(6, random_state=1)
    rot = lambda s: FeatureStats(q @ s.mu, q @ s.sigma @ q.T, s.n)  # noqa: E731
    one_d = frechet_distance(FeatureStats(np.zeros(1), np.eye(1), 2), FeatureStats(np.ones(1), 4 * np.eye(1), 2))
    diag = frechet_distance(FeatureStats(np.zeros(3), np.diag([1.0, 4, 9]), 2),
                            FeatureStats(np.zeros(3), np.diag([4.0, 9, 16]), 2))
    ab = frechet_distance(a, b)
    checks = {
        "self distance": abs(frechet_distance(a, a)) < 1e-8,
        "1-d closed form": one_d == 2.0,
        "diagonal closed form": diag == 3.0,
        "symmetry": abs(ab - frechet_distance(b, a)) < 1e-6,
        "rotation invariance": abs(ab - frechet_distance(rot(a), rot(b))) < 1e-6,
    }
    assert record("Frechet math", checks, f"1-d={one_d!r}, diag={diag!r}, d(a,b)={ab:.6f}")


def test_fid_self_test():
    rng = np.random.default_rng(2)
    images = rng.uniform(-1, 1, (64, 32, 64, 64)).astype(np.float32)
    same = compute_fid(images, images.copy(), get_extractor("random2d"), 64).value
    observed, bound = fid_noise_trial(0)
    checks = {"identical sets": abs(same) <= 1e-6, "disjoint halves": observed < bound}
    assert record("FID self-test", checks, f"identical={same:.2e}, halves={observed:.4f} < bound {bound:.4f}")


def test_loss_analytics():
    z = torch.zeros(7, dtype=torch.float64)
    d_std, g_std = standard_gan_losses(z, z)
    d_rel, _ = relativistic_losses(z, z)
    rng = np.random.default_rng(3)
    shift_err = 0.0
    for _ in range(50):
        dr = torch.from_numpy(rng.normal(size=rng.integers(1, 9)) * 5)
        df = torch.from_numpy(rng.normal(size=rng.integers(1, 9)) * 5)
        c = float(rng.normal() * 100)
        base, moved = relativistic_losses(dr, df), relativistic_losses(dr + c, df + c)
        shift_err = max(shift_err, *(abs(float(x - y)) for x, y in zip(base, moved)))
    score_err = max(score_level_fd_error(loss, which) for loss in LOSS_FUNCTIONS for which in (0, 1))
    net_err = max(network_fd_error(loss) for loss in LOSS_FUNCTIONS)
    checks = {
        "L_D(0,0) = 2 ln 2": abs(float(d_std) - 2 * math.log(2)) < 1e-9 and abs(float(d_rel) - 2 * math.log(2)) < 1e-9,
        "standard L_G(0,0) = ln 2": abs(float(g_std) - math.log(2)) < 1e-9,
        "relativistic shift invariance": shift_err < 1e-9,
        "score-level gradients": score_err < 1e-6,
        "gradients through discriminator": net_err < 1e-3,
    }
    assert record("Loss analytics", checks,
                  f"shift err={shift_err:.1e}, score FD={score_err:.1e}, network FD={net_err:.1e}")


def test_mdmin_largeebs_oracles():
    exact = True
    for b in range(2, 17):
        feats = torch.randint(-50, 50, (b, 3, 2, 2), generator=torch.Generator().manual_seed(b)).double()
        d = pairwise_l1(feats, chunk=5)
        ref = brute_pairwise(feats)
        exact &= np.array_equal(d.numpy(), ref) and np.array_equal(mdmin_scores(d).numpy(), brute_mdmin(ref))
    gen = build_generator(GeneratorConfig("dcgan3d", SMALL, seed=9)).double().eval()
    disc = build_discriminator(DiscriminatorConfig(True, SMALL, seed=9)).double()
    selection_ok = True
    for n, k in ((8, 2), (32, 6), (64, 16)):
        z = torch.randn(n, 512, dtype=torch.float64, generator=torch.Generator().manual_seed(n))
        cfg = LargeEbsConfig(candidate_count=n, keep_count=k)
        sel = largeebs_select(gen, disc, cfg, latents=z)
        with torch.no_grad(), frozen_buffers(gen, disc):
            expected = brute_select(gen, lambda x: disc.tap(x, cfg.tap_layer), z, k)
        selection_ok &= sel.indices.tolist() == expected
    z = torch.randn(6, 512, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    z[4] = z[1]
    forced = largeebs_select(gen, disc, LargeEbsConfig(candidate_count=6, keep_count=2), latents=z)
    checks = {"pairwise/MDmin exact for B<=16": exact, "selection matches oracle N<=64": selection_ok,
              "duplicated latents forced": sorted(forced.indices.tolist()) == [1, 4]}
    assert record("MDmin/largeEBS oracles", checks, "B=2..16, N in (8, 32, 64)")


EXPECTED_COUNTS = {"dcgan3d": 24e6, "stylegan3d": 18e6, "biggan3d": 4e6, "discriminator": 11e6}


def test_architecture_conformance():
    shapes_ok, counts = True, {}
    for family in ("dcgan3d", "stylegan3d", "biggan3d"):
        gen = build_generator(GeneratorConfig(family, 1, seed=0))
        counts[family] = count_parameters(gen)
        out = generate(gen, torch.randn(2, 512))
        shapes_ok &= tuple(out.shape) == (2,) + PATCH_SHAPE and out.min() >= -1 and out.max() <= 1
        del gen
    counts["discriminator"] = count_parameters(build_discriminator(DiscriminatorConfig(False, 1)))
    rel = {k: abs(counts[k] - v) / v for k, v in EXPECTED_COUNTS.items()}

    style = build_generator(GeneratorConfig("stylegan3d", SMALL, seed=3))
    w1, w2 = map_latent(style, torch.randn(2, 512)), map_latent(style, torch.randn(2, 512))
    mixing = torch.equal(generate_mixed(style, w1, w2, style.num_style_sites), generate_from_styles(style, w1)) \
        and torch.equal(generate_mixed(style, w1, w2, 0), generate_from_styles(style, w2))
    adain_err, _ = adain_probe(style)
    sigmas = top_singular_values(build_generator(GeneratorConfig("biggan3d", SMALL, seed=2)))
    sigma_dev = max(abs(s - 1) for s in sigmas.values())
    checks = {
        "shapes and range": shapes_ok,
        "parameter counts within 15%": max(rel.values()) < 0.15,
        "degenerate mixing depths": mixing,
        "AdaIN statistics": adain_err < 1e-4,
        "spectral norm sigma": sigma_dev < 0.1,
    }
    detail = ", ".join(f"{k}={counts[k] / 1e6:.2f}M" for k in counts) + \
        f"; AdaIN err={adain_err:.1e}; max |sigma-1|={sigma_dev:.3f}"
    assert record("Architecture conformance", checks, detail)


SMOKE_ITERATIONS = 200


@pytest.fixture(scope="module")
def smoke_dataset():
    return PatchDataset(phantom_dataset(8, seed=0))


def test_training_smoke(smoke_dataset, tmp_path):
    per_epoch = iterations_per_epoch(len(smoke_dataset))
    failures = []
    for name in METHODS:
        cfg = smoke_config(name, seed=0, epochs=2, max_iterations=SMOKE_ITERATIONS)
        run = train(cfg, smoke_dataset)
        finite = all(math.isfinite(d) and math.isfinite(g) for d, g in run.epoch_losses) and \
            all(math.isfinite(d) and math.isfinite(g) for _, d, g in run.loss_trace) and \
            all(math.isfinite(f) for f in run.fid)
        path = save_checkpoint(tmp_path / f"{name}.ckpt", run.generator, run.discriminator)
        gen, disc, _ = load_checkpoint(path)
        roundtrip = generators_identical(gen, run.generator) and \
            all(torch.equal(v, disc.state_dict()[k]) for k, v in run.discriminator.state_dict().items())
        expected_sel = [i for i in range(per_epoch + 1, SMOKE_ITERATIONS + 1) for _ in range(2)] \
            if cfg.largeebs.enabled else []
        warmup = run.selection_iterations == expected_sel
        if not (run.iterations == SMOKE_ITERATIONS and finite and roundtrip and warmup):
            failures.append(f"{name}(iters={run.iterations}, finite={finite}, roundtrip={roundtrip}, "
                            f"warmup={warmup})")
    ratio = collapse_ratio()
    checks = {"nine methods x 200 iterations": not failures, "collapse fixture below 10%": ratio < 0.1}
    detail = f"collapsed/diverse tap MDmin = {ratio:.4f}" + (f"; {'; '.join(failures)}" if failures else "")
    assert record("Training smoke", checks, detail)


def test_skeleton_suite():
    counts = {f.__name__: count_branch_points(skeletonize(f()).mask)[0] for f in (line, plus, asterisk)}
    skel = skeletonize(tube()).mask
    tube_ok = n_components(skel) == 1 and count_branch_points(skel)[0] == 0
    violations = skeleton_violations(10_000, seed=11)
    checks = {"line/plus/asterisk = 0/1/1": counts == {"line": 0, "plus": 1, "asterisk": 1},
              "tube is one curve": tube_ok, "random masks": violations == 0}
    assert record("Skeleton suite", checks,
                  f"branch points {counts}, tube skeleton {int(skel.sum())} voxels, {violations}/10000 violations")


def test_roc_suite():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        real = rng.poisson(rng.uniform(2, 30), size=rng.integers(20, 300))
        fake = rng.poisson(rng.uniform(2, 30), size=rng.integers(20, 300))
        worst = max(worst, abs(branch_count_roc(real, fake, n_boot=0).auc - mann_whitney_auc(real, fake)))
    # a single pair of independent n=500 draws has AUC sd ~0.018, so both the identical-sample
    # case and the mean over independent pairs are held to the 0.02 tolerance
    counts = rng.poisson(20, 500)
    same_sample = branch_count_roc(counts, rng.permutation(counts), n_boot=0).auc
    same = float(np.mean([branch_count_roc(rng.poisson(20, 500), rng.poisson(20, 500), n_boot=0).auc
                          for _ in range(20)]))
    separated = branch_count_roc([10] * 50, [2] * 50, n_boot=0).auc
    coverage = bootstrap_coverage(reps=200, n=200, seed=1)
    checks = {"Mann-Whitney oracle": worst < 1e-9, "identical distributions": same_sample == 0.5 and abs(same - 0.5) <= 0.02,
              "full separation": separated == 1.0, "bootstrap coverage": coverage >= 0.93}
    assert record("ROC suite", checks,
                  f"max |AUC-U|={worst:.1e}, identical AUC={same_sample} / mean of 20 draws {same:.4f}, coverage={coverage:.3f}")


def test_statistics():
    dt, dp = welch_mismatch(20, seed=0)
    res = welch_t_test(summary_consistent_sample(122.3, 136.9, 10.7), summary_consistent_sample(41.0, 44.8, 4.2))
    checks = {"matches reference": dt < 1e-9 and dp < 1e-6, "styleGAN3D base vs MDmin p << 0.05": res.pvalue < 1e-3}
    assert record("Statistics", checks, f"max dt={dt:.1e}, max dp={dp:.1e}; t={res.statistic:.3f}, "
                                        f"p={res.pvalue:.2e}")


def test_pipeline_integrity(phantom_volumes):
    rng = np.random.default_rng(0)
    half = np.array(PATCH_SHAPE) // 2
    total = nodule_voxels = 0
    for i in range(40):
        vol = phantom_volumes[i % len(phantom_volumes)]
        _, centers = sample_patch_batch(vol, 250, rng, return_centers=True)
        for z, y, x in centers - half:
            nodule_voxels += int(vol.nodule_mask[z : z + 32, y : y + 64, x : x + 64].sum())
        total += len(centers)
    has_nodules = all(v.nodule_mask.any() for v in phantom_volumes)
    plan = len(epoch_plan([f"scan{i}" for i in range(509)], rng))
    ends = window_and_scale(np.array([-1000.0, 400.0], np.float32)).tolist()
    checks = {"zero nodule voxels": total == 10_000 and nodule_voxels == 0 and has_nodules,
              "509 scans -> 7126 iterations": plan == iterations_per_epoch(509) == 7126,
              "window endpoints": ends == [-1.0, 1.0]}
    assert record("Pipeline integrity", checks, f"{total} patches, {nodule_voxels} nodule voxels, "
                                                f"{plan} iterations/epoch, endpoints {ends}")
