"""Acceptance criteria C1-C10. Each test records one PASS/FAIL line.

The E1 five-seed suite and the E2 run are computed once per session and
shared. Frozen regression floors below were measured once on the reference
platform and are set a little under the measured values.
"""

import math
import time

import numpy as np
import pytest

from gradcheck import numeric_param_grads
from labelshift.align import (Discriminator, class_knowledge_source, loss_adversarial,
                              loss_discriminator)
from labelshift.core import (IGNORE, ConfusionMatrix, LabelDistribution, accumulate_confusion,
                             miou, softmax)
from labelshift.estimate import (BayesOracle, EstimationConfig, estimate_source_distribution,
                                 estimate_target_distribution, source_pixel_ratio)
from labelshift.experiment import ExperimentConfig, run_experiment
from labelshift.net import PixelNet, backward, ce_loss_and_grad, forward
from labelshift.rectify import (adjust_posterior, cls_weighted_loss_and_grad, cr_loss_and_grad,
                                cr_loss_logsum, cr_loss_remolded, inference_adjust, ratio)
from labelshift.synth import bayes_posterior, empirical_image_marginal, generate_dataset, make_rng

SEEDS = (0, 1, 2, 3, 4)

# measured once and frozen as regression floors, in mIoU points:
# E1 median margin over none 11.1 (IA and CR); E2 seed 0 IA-corrected gain 6.25
C6_FLOOR_IA_OVER_NONE = 9.0
C6_FLOOR_CR_OVER_NONE = 9.0
C8_FLOOR_ALIGNED_OVER_SOURCE_ONLY = 5.0


@pytest.fixture(scope="session")
def e1_suite():
    cfg = ExperimentConfig.load("E1")
    t0 = time.perf_counter()
    reports = [run_experiment(cfg.with_seed(s)) for s in SEEDS]
    return reports, time.perf_counter() - t0


@pytest.fixture(scope="session")
def e2_run():
    t0 = time.perf_counter()
    report = run_experiment(ExperimentConfig.load("E2"))
    return report, time.perf_counter() - t0


def _points(reports, variant):
    return np.array([100 * r.variants[variant]["miou"] for r in reports])


def test_c1_rectification_identities(criterion):
    t0 = time.perf_counter()
    rng = make_rng(101)
    worst_id = worst_rt = worst_loss = 0.0
    for _ in range(10_000):
        k = int(rng.integers(2, 9))
        p = rng.dirichlet(np.full(k, 0.7))
        r = np.exp(rng.normal(scale=1.5, size=k))
        worst_id = max(worst_id, np.max(np.abs(adjust_posterior(p, np.ones(k)) - p)))
        worst_rt = max(worst_rt, np.max(np.abs(adjust_posterior(adjust_posterior(p, r), 1 / r) - p)))
        z = rng.normal(scale=2.0, size=(1, k))
        y = rng.integers(0, k, size=1)
        ps = LabelDistribution(rng.dirichlet(np.ones(k)))
        pt = LabelDistribution(rng.dirichlet(np.ones(k)))
        a = cr_loss_remolded(z, y, ps, pt)
        b = cr_loss_logsum(z, y, ps, pt)
        worst_loss = max(worst_loss, abs(a - b))
    elapsed = time.perf_counter() - t0
    ok = worst_id <= 1e-12 and worst_rt <= 1e-10 and worst_loss <= 1e-10 and elapsed < 5
    criterion("C1", ok, f"identity {worst_id:.1e}, round trip {worst_rt:.1e}, "
                        f"loss forms {worst_loss:.1e}, {elapsed:.1f}s")
    assert ok


def _rel(a, n):
    a, n = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in n])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-300))


def _instance(rng):
    k = int(rng.integers(2, 5))
    net = PixelNet.init([3, int(rng.integers(2, 5)), int(rng.integers(2, 5)), k], 2, rng)
    x = rng.normal(size=(2, 3, 3))
    y = rng.integers(0, k, size=(2, 3))
    if rng.random() < 0.5:
        y[0, 0] = IGNORE
    ps = LabelDistribution(rng.dirichlet(np.ones(k)))
    pt = LabelDistribution(rng.dirichlet(np.ones(k)))
    return net, x, y, ps, pt, k


def _net_loss_check(rng, loss_fn):
    net, x, y, ps, pt, _ = _instance(rng)
    _, d = loss_fn(forward(net, x)[1], y, ps, pt)
    grads = backward(net, x, d)
    num = numeric_param_grads(lambda: loss_fn(forward(net, x)[1], y, ps, pt)[0], net.params())
    return _rel(grads.params(), num)


def _ld_check(rng):
    net, x, y, _, _, k = _instance(rng)
    disc = Discriminator.create(net.feature_dim, k, rng, hidden=int(rng.integers(2, 5)))
    fs = forward(net, x)[0]
    xt = rng.normal(size=x.shape)
    ft, zt = forward(net, xt)
    a_s, a_t = class_knowledge_source(y, k), softmax(zt)
    _, g = loss_discriminator(disc, fs, a_s, ft, a_t)
    num = numeric_param_grads(lambda: loss_discriminator(disc, fs, a_s, ft, a_t)[0], disc.params())
    return _rel(g.params(), num)


def _ladv_check(rng):
    net, x, _, _, _, k = _instance(rng)
    disc = Discriminator.create(net.feature_dim, k, rng, hidden=int(rng.integers(2, 5)))
    a = softmax(forward(net, x)[1])   # knowledge is detached
    _, g_feat = loss_adversarial(disc, forward(net, x)[0], a)
    grads = backward(net, x, None, d_hidden=g_feat)
    num = numeric_param_grads(lambda: loss_adversarial(disc, forward(net, x)[0], a)[0],
                              net.params())
    return _rel(grads.params(), num)


def test_c2_gradients(criterion):
    t0 = time.perf_counter()
    rng = make_rng(202)
    checks = {
        "CR": lambda: _net_loss_check(rng, cr_loss_and_grad),
        "CLS": lambda: _net_loss_check(rng, cls_weighted_loss_and_grad),
        "CE": lambda: _net_loss_check(rng, lambda z, y, ps, pt: ce_loss_and_grad(z, y)),
        "L_D": lambda: _ld_check(rng),
        "L_adv": lambda: _ladv_check(rng),
    }
    worst = {name: max(fn() for _ in range(100)) for name, fn in checks.items()}
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-5 for v in worst.values()) and elapsed < 60
    criterion("C2", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert ok


def test_c3_bayes_exchange(criterion):
    cfg = ExperimentConfig.load("E1")
    x = make_rng(303).normal(scale=1.5, size=(10_000, cfg.source.feature_dim))
    post_s = bayes_posterior(x, cfg.source)
    post_t = bayes_posterior(x, cfg.target)
    r = ratio(cfg.target.label_marginal, cfg.source.label_marginal)
    err = float(np.max(np.abs(adjust_posterior(post_s, r) - post_t)))
    ok = err < 1e-10
    criterion("C3", ok, f"max error {err:.1e} over 10000 features")
    assert ok


def test_c4_oracle_ia(criterion):
    t0 = time.perf_counter()
    cfg = ExperimentConfig.load("E1")
    n_needed = 1_000_000
    per_scene = cfg.target.height * cfg.target.width
    scenes = generate_dataset(cfg.target, math.ceil(n_needed / per_scene))
    x = np.concatenate([s.features.reshape(-1, cfg.target.feature_dim) for s in scenes])[:n_needed]
    post_s = bayes_posterior(x, cfg.source)          # source-prior oracle classifier
    ia = inference_adjust(post_s, cfg.target.label_marginal, cfg.source.label_marginal)
    target_rule = np.argmax(bayes_posterior(x, cfg.target), axis=-1)
    agree = float(np.mean(ia == target_rule))
    elapsed = time.perf_counter() - t0
    ok = agree >= 0.9999 and elapsed < 60
    criterion("C4", ok, f"agreement {100 * agree:.4f}% on {n_needed} pixels, {elapsed:.1f}s")
    assert ok


def test_c5_estimation(criterion):
    t0 = time.perf_counter()
    cfg = ExperimentConfig.load("E3")
    ecfg = EstimationConfig()
    n_s = ecfg.threshold(cfg.target.height, cfg.target.width)
    src = generate_dataset(cfg.source, cfg.raw["scenes"]["train"])
    tgt = generate_dataset(cfg.target, 500)
    oracle = BayesOracle(cfg.target, prior=cfg.source.label_marginal)
    est = estimate_target_distribution(tgt, oracle, source_pixel_ratio(src), ecfg)
    truth = empirical_image_marginal(tgt, n_s)
    l1 = float(np.abs(np.asarray(est) - np.asarray(truth)).sum())
    src_exact = estimate_source_distribution(src, ecfg) == empirical_image_marginal(src, n_s)
    elapsed = time.perf_counter() - t0
    ok = l1 < 0.05 and src_exact and elapsed < 120
    criterion("C5", ok, f"L1 {l1:.4f} (n_s={n_s}, 500 scenes), source exact {src_exact}, "
                        f"{elapsed:.1f}s")
    assert ok


def test_c6_label_shift_rescue(criterion, e1_suite):
    reports, elapsed = e1_suite
    none, ia, cr, oracle = (_points(reports, v) for v in ("none", "IA", "CR", "oracle"))
    med = {k: float(np.median(v)) for k, v in
           (("none", none), ("IA", ia), ("CR", cr), ("oracle", oracle))}
    gap_ia = float(np.median(oracle - ia))
    gap_cr = float(np.median(oracle - cr))
    over_ia, over_cr = med["IA"] - med["none"], med["CR"] - med["none"]
    ok = (med["IA"] > med["none"] and med["CR"] > med["none"]
          and gap_ia <= 2.0 and gap_cr <= 2.0
          and over_ia >= C6_FLOOR_IA_OVER_NONE and over_cr >= C6_FLOOR_CR_OVER_NONE
          and elapsed < 600)
    per_seed = "; ".join(f"s{s}: none {a:.2f} IA {b:.2f} CR {c:.2f} oracle {d:.2f}"
                         for s, a, b, c, d in zip(SEEDS, none, ia, cr, oracle))
    criterion("C6", ok, f"median none {med['none']:.2f} IA {med['IA']:.2f} CR {med['CR']:.2f} "
                        f"oracle {med['oracle']:.2f}; gaps to oracle IA {gap_ia:.2f} "
                        f"CR {gap_cr:.2f}; margin over none IA {over_ia:.2f} CR {over_cr:.2f}; "
                        f"{elapsed:.0f}s [{per_seed}]")
    assert ok


def test_c7_cr_vs_cls(criterion, e1_suite):
    reports, _ = e1_suite
    cr, cls = _points(reports, "CR"), _points(reports, "CLS")
    ok = float(np.median(cr)) >= float(np.median(cls))
    per_seed = ", ".join(f"s{s} {a:.2f}/{b:.2f}" for s, a, b in zip(SEEDS, cr, cls))
    criterion("C7", ok, f"median CR {np.median(cr):.2f} vs CLS {np.median(cls):.2f} "
                        f"(per seed CR/CLS: {per_seed})")
    assert ok


def test_c8_alignment(criterion, e2_run):
    report, elapsed = e2_run
    before, after = report.probe["source_only"], report.probe["aligned"]
    gain = 100 * (report.variants["IA"]["miou"] - report.variants["source_only+IA"]["miou"])
    raw_gain = 100 * (report.variants["none"]["miou"] - report.variants["source_only"]["miou"])
    ok = (before >= 0.80 and after <= 0.60 and gain >= C8_FLOOR_ALIGNED_OVER_SOURCE_ONLY
          and elapsed < 900)
    criterion("C8", ok, f"probe before {before:.4f} after {after:.4f}; IA-corrected mIoU gain "
                        f"{gain:.2f} (uncorrected {raw_gain:+.2f}); {elapsed:.0f}s")
    assert ok


def _set_miou(pred, gt, k):
    ious = []
    scored = gt != IGNORE
    for c in range(k):
        p = set(np.flatnonzero((pred == c) & scored))
        g = set(np.flatnonzero(gt == c))
        union = p | g
        if union:
            ious.append(len(p & g) / len(union))
    return sum(ious) / len(ious)


def test_c9_metric_oracle(criterion):
    rng = make_rng(909)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        gt = rng.integers(0, k, size=(8, 8))
        gt[rng.random((8, 8)) < 0.1] = IGNORE
        gt[0, 0] = rng.integers(0, k)
        pred = rng.integers(0, k, size=(8, 8))
        cm = accumulate_confusion(pred, gt, ConfusionMatrix(k))
        mismatches += miou(cm) != _set_miou(pred, gt, k)
    ok = mismatches == 0
    criterion("C9", ok, f"{mismatches} mismatches in 1000 random 8x8 pairs")
    assert ok


def test_c10_determinism(criterion, e1_suite, tmp_path):
    reports, _ = e1_suite
    cfg = ExperimentConfig.load("E1")
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    same_bytes = (tmp_path / "a" / "report.json").read_bytes() == \
        (tmp_path / "b" / "report.json").read_bytes()
    same_as_suite = a.metrics() == reports[0].metrics()
    ok = same_bytes and same_as_suite
    criterion("C10", ok, f"E1 seed 0 rerun byte-identical {same_bytes}, "
                         f"matches suite run {same_as_suite}")
    assert ok
