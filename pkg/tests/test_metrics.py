"""Metric oracles: hand enumerations, naive-loop reimplementations, properties."""

import math

import numpy as np
import pytest

from ncsr.data import ImageRecord
from ncsr.metrics import (MetricsReport, SampleSet, diversity_score, evaluate,
                          lr_psnr, perceptual_proxy, psnr)
from ncsr.model import ModelConfig, NCSRModel
from ncsr.resample import bicubic_resize
from ncsr.rng import Rng
from ncsr.tensor import ShapeError, Tensor
from ncsr.verify import randomize_parameters


def const_image(value, shape=(1, 3, 4, 4)):
    return Tensor(np.full(shape, value))


def two_pixel_set():
    gt = Tensor(np.zeros((1, 3, 1, 2)))
    a = Tensor(np.broadcast_to(np.array([0.1, 0.3]), (1, 3, 1, 2)).copy())
    b = Tensor(np.broadcast_to(np.array([0.3, 0.1]), (1, 3, 1, 2)).copy())
    lr = Tensor(np.zeros((1, 3, 1, 1)))
    return SampleSet([a, b], gt, lr, 2)


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------

def test_diversity_identical_samples_zero():
    rng = Rng(1)
    img = Tensor(rng.uniform((1, 3, 4, 4)))
    gt = Tensor(rng.uniform((1, 3, 4, 4)))
    ss = SampleSet([img, Tensor(img.data.copy()), Tensor(img.data.copy())],
                   gt, Tensor(rng.uniform((1, 3, 2, 2))), 2)
    div, degenerate = diversity_score(ss)
    assert div == 0.0 and not degenerate


def test_diversity_single_pixel_always_zero():
    gt = Tensor(np.zeros((1, 3, 1, 1)))
    a = const_image(0.1, (1, 3, 1, 1))
    b = const_image(0.3, (1, 3, 1, 1))
    ss = SampleSet([a, b], gt, Tensor(np.zeros((1, 3, 1, 1))), 1 if False else 2)
    div, _ = diversity_score(ss)
    assert div == 0.0


def test_diversity_two_pixel_hand_enumeration():
    # per-pixel squared errors: A -> (0.01, 0.09), B -> (0.09, 0.01)
    # global best = min(mean) = 0.05; local best = mean(min) = 0.01 -> 80%
    div, degenerate = diversity_score(two_pixel_set())
    assert abs(div - 80.0) < 1e-9
    assert not degenerate


def test_diversity_degenerate_all_exact():
    gt = Tensor(np.full((1, 3, 2, 2), 0.25))
    ss = SampleSet([Tensor(gt.data.copy()), Tensor(gt.data.copy())], gt,
                   Tensor(np.zeros((1, 3, 1, 1))), 2)
    div, degenerate = diversity_score(ss)
    assert div == 0.0 and degenerate


def test_diversity_needs_two_samples():
    gt = const_image(0.0)
    ss = SampleSet([const_image(0.1)], gt, const_image(0.0, (1, 3, 2, 2)), 2)
    with pytest.raises(ValueError):
        diversity_score(ss)


def test_diversity_bounds_and_duplication_monotonicity():
    rng = Rng(2)
    gt = Tensor(rng.uniform((1, 3, 6, 6)))
    lr = Tensor(rng.uniform((1, 3, 3, 3)))
    samples = [Tensor(rng.uniform((1, 3, 6, 6))) for _ in range(4)]
    ss = SampleSet(samples, gt, lr, 2)
    div, _ = diversity_score(ss)
    assert 0.0 <= div <= 100.0
    duplicated = SampleSet(samples + [Tensor(samples[0].data.copy())], gt, lr, 2)
    div_dup, _ = diversity_score(duplicated)
    assert div_dup >= div - 1e-12


def test_diversity_permutation_invariant():
    rng = Rng(3)
    gt = Tensor(rng.uniform((1, 3, 5, 5)))
    lr = Tensor(rng.uniform((1, 3, 5, 5)))
    samples = [Tensor(rng.uniform((1, 3, 5, 5))) for _ in range(5)]
    base, _ = diversity_score(SampleSet(samples, gt, lr, 1 if False else 2))
    flipped, _ = diversity_score(SampleSet(samples[::-1], gt, lr, 2))
    assert base == flipped


def test_diversity_absolute_score_switch():
    div_sq, _ = diversity_score(two_pixel_set(), score="squared")
    div_abs, _ = diversity_score(two_pixel_set(), score="absolute")
    # abs scores: A -> (0.1, 0.3), B -> (0.3, 0.1): global 0.2, local 0.1 -> 50%
    assert abs(div_sq - 80.0) < 1e-9
    assert abs(div_abs - 50.0) < 1e-9


# ---------------------------------------------------------------------------
# psnr / lr-psnr
# ---------------------------------------------------------------------------

def test_psnr_identical_hits_cap():
    img = const_image(0.4)
    assert psnr(img, Tensor(img.data.copy())) == 99.0


def test_psnr_uniform_difference_closed_form():
    assert abs(psnr(const_image(0.6), const_image(0.5)) - 20.0) < 1e-9


def test_psnr_matches_naive_loop():
    rng = Rng(4)
    for _ in range(10):
        a = rng.uniform((1, 3, 5, 5))
        b = rng.uniform((1, 3, 5, 5))
        total, count = 0.0, 0
        for idx in np.ndindex(a.shape):
            total += (a[idx] - b[idx]) ** 2
            count += 1
        expected = min(10.0 * math.log10(1.0 / (total / count)), 99.0)
        assert abs(psnr(Tensor(a), Tensor(b)) - expected) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(const_image(0.1), const_image(0.1, (1, 3, 2, 2)))


def test_lr_psnr_exact_consistency_hits_cap():
    rng = Rng(5)
    sample = Tensor(rng.uniform((1, 3, 8, 8)))
    lr = bicubic_resize(sample, 0.5)
    ss = SampleSet([sample], Tensor(rng.uniform((1, 3, 8, 8))), lr, 2)
    mean_db, worst_db = lr_psnr(ss)
    assert mean_db == 99.0 and worst_db == 99.0


def test_lr_psnr_constant_closed_form():
    # downsampled constant 0.6 stays 0.6; against LR 0.5 the MSE is 0.01
    ss = SampleSet([const_image(0.6, (1, 3, 8, 8))], const_image(0.5, (1, 3, 8, 8)),
                   const_image(0.5, (1, 3, 4, 4)), 2)
    mean_db, worst_db = lr_psnr(ss)
    assert abs(mean_db - 20.0) < 1e-9 and abs(worst_db - 20.0) < 1e-9


def test_lr_psnr_order_statistics():
    rng = Rng(6)
    gt = Tensor(rng.uniform((1, 3, 8, 8)))
    lr = Tensor(rng.uniform((1, 3, 4, 4)))
    samples = [Tensor(rng.uniform((1, 3, 8, 8))) for _ in range(10)]
    ss = SampleSet(samples, gt, lr, 2)
    mean_db, worst_db = lr_psnr(ss)
    per = [psnr(bicubic_resize(s, 0.5), lr) for s in samples]
    assert worst_db <= mean_db <= 99.0
    assert all(worst_db <= p <= 99.0 for p in per)
    assert abs(mean_db - np.mean(per)) < 1e-12


def test_lr_psnr_matches_scalar_reimplementation_on_random_sets():
    rng = Rng(7)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        samples = [Tensor(rng.uniform((1, 3, 8, 8))) for _ in range(n)]
        lr = Tensor(rng.uniform((1, 3, 4, 4)))
        ss = SampleSet(samples, Tensor(rng.uniform((1, 3, 8, 8))), lr, 2)
        mean_db, worst_db = lr_psnr(ss)
        vals = []
        for s in samples:
            down = bicubic_resize(s, 0.5).data
            total, count = 0.0, 0
            for idx in np.ndindex(down.shape):
                total += (down[idx] - lr.data[idx]) ** 2
                count += 1
            mse = total / count
            vals.append(99.0 if mse < 1e-10 else min(10 * math.log10(1 / mse), 99.0))
        assert abs(mean_db - sum(vals) / len(vals)) < 1e-9
        assert abs(worst_db - min(vals)) < 1e-9


# ---------------------------------------------------------------------------
# perceptual proxy
# ---------------------------------------------------------------------------

def test_proxy_zero_iff_identical_and_symmetric():
    rng = Rng(8)
    a = Tensor(rng.uniform((1, 3, 16, 16)))
    assert perceptual_proxy(a, Tensor(a.data.copy())) == 0.0
    b = Tensor(rng.uniform((1, 3, 16, 16)))
    ab = perceptual_proxy(a, b)
    ba = perceptual_proxy(b, a)
    assert ab > 0
    assert abs(ab - ba) < 1e-12


def test_proxy_detects_luminance_preserving_changes():
    base = np.full((1, 3, 8, 8), 0.5)
    shifted = base.copy()
    shifted[0, 0] += 0.1  # red up
    shifted[0, 1] -= 0.1  # green down: channel-mean luminance unchanged
    assert perceptual_proxy(Tensor(base), Tensor(shifted)) > 0


def test_proxy_monotone_under_increasing_noise():
    rng = Rng(9)
    base = Tensor(rng.uniform((1, 3, 16, 16)))
    medians = []
    for sigma in (0.05, 0.1):
        vals = []
        for trial in range(50):
            noisy = Tensor(base.data + Rng(100 + trial).gaussian(base.shape, sigma))
            vals.append(perceptual_proxy(base, Tensor(np.clip(noisy.data, 0, 1))))
        medians.append(np.median(vals))
    assert medians[1] > medians[0]


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def make_eval_model():
    cfg = ModelConfig(scale_factor=2, levels=2, flow_steps=1, encoder_blocks=1,
                      encoder_width=8, coupling_hidden=8)
    model = NCSRModel(cfg, Rng(10))
    randomize_parameters(model, Rng(11), amplitude=0.05)
    return model


def make_records(n, size=8, seed=12):
    rng = Rng(seed)
    return [ImageRecord(id=f"img{i}", hr=Tensor(np.round(rng.uniform((1, 3, size, size)) * 255) / 255))
            for i in range(n)]


def test_evaluate_temperature_zero_diversity_exactly_zero():
    model = make_eval_model()
    report = evaluate(model, make_records(3), n_samples=4, temperature=0.0, rng=Rng(13))
    assert len(report.rows) == 3
    assert all(r.diversity == 0.0 for r in report.rows)


def test_evaluate_aggregate_equals_hand_mean_and_is_deterministic():
    model = make_eval_model()
    report = evaluate(model, make_records(3), n_samples=3, temperature=0.7, rng=Rng(14))
    agg = report.aggregate()
    assert abs(agg["lr_psnr_mean"] - np.mean([r.lr_psnr_mean for r in report.rows])) < 1e-12
    assert abs(agg["diversity"] - np.mean([r.diversity for r in report.rows])) < 1e-12
    again = evaluate(model, make_records(3), n_samples=3, temperature=0.7, rng=Rng(14))
    assert report.to_tsv() == again.to_tsv()


def test_evaluate_single_sample_marks_diversity_undefined():
    model = make_eval_model()
    report = evaluate(model, make_records(2), n_samples=1, temperature=0.5, rng=Rng(15))
    assert all(r.diversity is None for r in report.rows)
    assert "na" in report.to_tsv()
    assert all(np.isfinite(r.lr_psnr_mean) for r in report.rows)


def test_evaluate_records_per_image_failures_and_continues():
    model = make_eval_model()
    records = make_records(3)
    records[1] = ImageRecord(id="toosmall", hr=Tensor(np.zeros((1, 3, 2, 2))))
    report = evaluate(model, records, n_samples=2, temperature=0.5, rng=Rng(16))
    assert len(report.rows) == 2
    assert len(report.failures) == 1
    assert report.failures[0][0] == "toosmall"


def test_evaluate_worst_never_exceeds_mean():
    model = make_eval_model()
    report = evaluate(model, make_records(4), n_samples=3, temperature=0.8, rng=Rng(17))
    for row in report.rows:
        assert row.lr_psnr_worst <= row.lr_psnr_mean


def test_report_serialization_shapes():
    report = MetricsReport()
    assert report.aggregate() == {}
    model = make_eval_model()
    report = evaluate(model, make_records(2), n_samples=2, temperature=0.5, rng=Rng(18))
    tsv = report.to_tsv()
    header = tsv.splitlines()[0].split("\t")
    assert header == ["image", "diversity", "lr_psnr_mean", "lr_psnr_worst",
                      "psnr_best", "perceptual_proxy"]
    kv = report.to_keyvalues()
    assert "lr_psnr_mean = " in kv
    line = report.summary_line()
    assert line.startswith("diversity=") and "proxy=" in line
