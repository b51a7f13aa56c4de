"""Processing stages against brute-force double-precision oracles."""

import math

import numpy as np
import pytest

import oracles
from cusense.pipeline import (
    CsiTensor,
    NormStats,
    PipelineError,
    background_template,
    coherent_average,
    compute_norm_stats,
    kl_loss,
    smooth_labels,
    subtract_and_reduce,
    temporal_window,
    validity_set,
    zscore,
)

RNG = np.random.default_rng(1234)


def random_tensors(n, a=2, k=12, s=2, zero_frac=0.3, rng=RNG):
    out = []
    for _ in range(n):
        v = rng.standard_normal((a, k, s)) + 1j * rng.standard_normal((a, k, s))
        v[rng.random((a, k, s)) < zero_frac] = 0.0
        out.append(v)
    return out


# -- validity set -----------------------------------------------------------

def test_validity_all_zero():
    samples = [np.zeros((1, 1, 1), dtype=complex) for _ in range(5)]
    assert validity_set(samples, 0, 0, 0, tau=1e-10) == []


def test_validity_threshold_strict():
    s1 = np.full((1, 1, 1), 1.0 + 0j)
    s2 = np.full((1, 1, 1), 1e-12 + 0j)
    assert validity_set([s1, s2], 0, 0, 0, tau=1e-10) == [0]


def test_validity_matches_filter_oracle():
    samples = random_tensors(20)
    for _ in range(50):
        a, k, s = RNG.integers(0, 2), RNG.integers(0, 12), RNG.integers(0, 2)
        tau = float(RNG.uniform(0.1, 2.0))
        assert validity_set(samples, a, k, s, tau) == \
            oracles.validity_filter(samples, a, k, s, tau)


def test_validity_requires_positive_tau():
    with pytest.raises(PipelineError):
        validity_set([np.zeros((1, 1, 1))], 0, 0, 0, tau=0.0)


# -- background template -------------------------------------------------------

def test_template_of_single_sample():
    s = random_tensors(1, zero_frac=0.0)[0]
    t = background_template([s])
    assert np.allclose(t.values, s, atol=1e-15)
    assert (t.counts == 1).all()


def test_template_arithmetic_mean():
    a = np.full((1, 1, 1), 1 + 1j)
    b = np.full((1, 1, 1), 3 - 1j)
    t = background_template([a, b])
    assert t.values[0, 0, 0] == 2 + 0j


def test_template_zero_where_no_valid():
    samples = [np.zeros((1, 2, 1), dtype=complex) for _ in range(3)]
    for s in samples:
        s[0, 0, 0] = 2.0
    t = background_template(samples)
    assert t.values[0, 1, 0] == 0
    assert t.counts[0, 1, 0] == 0
    assert t.values[0, 0, 0] == 2.0


def test_template_matches_loop_oracle():
    samples = random_tensors(100)
    t = background_template(samples, tau=1e-10)
    values, counts = oracles.masked_mean_template(samples, 1e-10)
    for a in range(2):
        for k in range(12):
            for s in range(2):
                assert abs(t.values[a, k, s] - values[a][k][s]) < 1e-12
                assert t.counts[a, k, s] == counts[a][k][s]


def test_template_empty_list_rejected():
    with pytest.raises(PipelineError):
        background_template([])


# -- temporal window --------------------------------------------------------------

def _stream(times):
    return [CsiTensor(np.zeros((1, 1, 1)), tti=i, timestamp_ns=t)
            for i, t in enumerate(times)]


def test_window_boundaries_inclusive():
    t = 10_000_000
    stream = _stream([t - 3_000_000, t - 2_000_000, t - 1_000_000, t])
    win = temporal_window(stream, t, 2_000_000)
    assert [s.timestamp_ns for s in win] == [t - 2_000_000, t - 1_000_000, t]


def test_window_empty_stream():
    assert temporal_window([], 100, 10) == []


def test_window_matches_linear_scan():
    times = sorted(int(x) for x in RNG.integers(0, 10_000, 1000))
    stream = _stream(times)
    for _ in range(30):
        t = int(RNG.integers(0, 10_000))
        dt = int(RNG.integers(1, 3000))
        got = [s.tti for s in temporal_window(stream, t, dt)]
        assert got == oracles.window_scan(times, t, dt)


def test_window_rejects_unsorted():
    with pytest.raises(PipelineError):
        temporal_window(_stream([5, 3, 7]), 10, 5)


# -- coherent average -----------------------------------------------------------------

def test_average_of_one_is_identity():
    s = random_tensors(1, zero_frac=0.0)[0]
    assert np.allclose(coherent_average([s]), s, atol=1e-15)


def test_average_conjugate_pair():
    theta = 0.7
    a = np.full((1, 1, 1), np.exp(1j * theta))
    b = np.full((1, 1, 1), np.exp(-1j * theta))
    avg = coherent_average([a, b])
    assert abs(avg[0, 0, 0] - math.cos(theta)) < 1e-15


def test_average_matches_loop_oracle():
    window = random_tensors(8)
    got = coherent_average(window, tau=1e-10)
    values, _ = oracles.masked_mean_template(window, 1e-10)
    for a in range(2):
        for k in range(12):
            for s in range(2):
                assert abs(got[a, k, s] - values[a][k][s]) < 1e-12


def test_average_empty_window_rejected():
    with pytest.raises(PipelineError):
        coherent_average([])


def test_noise_variance_scales_inverse_window():
    # Var of the window mean around a fixed channel ~ sigma^2 / |W|.
    rng = np.random.default_rng(7)
    base = rng.standard_normal((2, 12, 2)) + 1j * rng.standard_normal((2, 12, 2))
    base *= 10  # keep every draw above tau
    sigma2 = 0.25
    for w in (1, 2, 4, 8):
        devs = []
        for _ in range(300):
            window = [base + math.sqrt(sigma2 / 2) * (rng.standard_normal(base.shape)
                      + 1j * rng.standard_normal(base.shape)) for _ in range(w)]
            devs.append(coherent_average(window) - base)
        var = np.mean(np.abs(np.stack(devs)) ** 2)
        assert abs(var * w / sigma2 - 1) < 0.1


def test_background_cancellation_improves_with_window():
    # Target-free run: the residual after background subtraction shrinks as
    # the coherent window grows (noise averaging).
    from cusense.emulator import SceneConfig, synth_background, synth_csi

    cfg = SceneConfig(antennas=2, subcarriers=48, dmrs_symbols=2,
                      background_taps=4, snr_db=10.0, rng_seed=5)
    bg = synth_background(cfg)
    template = background_template(
        [synth_csi(cfg, bg, None, noise_seed=50_000 + i) for i in range(256)])
    valid = template.valid_subcarrier_mask
    residual = {1: 0.0, 8: 0.0}
    trials = 100
    seed = 0
    for _ in range(trials):
        slots = [synth_csi(cfg, bg, None, noise_seed=seed + k) for k in range(8)]
        seed += 8
        for w in residual:
            avg = coherent_average(slots[:w])
            feat = subtract_and_reduce(avg, template, valid)
            residual[w] += float(np.mean(np.abs(feat))) / trials
    assert residual[8] < residual[1]


# -- subtraction and reduction ------------------------------------------------------

def test_subtract_equal_tensors_zero():
    s = random_tensors(1, zero_frac=0.0)[0]
    t = background_template([s])
    out = subtract_and_reduce(s, t)
    assert np.allclose(out, 0.0, atol=1e-12)


def test_modulus_identity():
    avg = np.full((1, 1, 1), 3 + 4j)
    tmpl = np.full((1, 1, 1), 5 + 0j)
    assert subtract_and_reduce(avg, tmpl)[0, 0] == 0.0


def test_subtract_matches_loop_oracle():
    avg = random_tensors(1, zero_frac=0.0)[0]
    tmpl = random_tensors(1, zero_frac=0.0)[0]
    valid = RNG.random(12) < 0.8
    got = subtract_and_reduce(avg, tmpl, valid)
    want = oracles.subtract_reduce(avg, tmpl, valid.tolist())
    assert got.shape == (2, int(valid.sum()))
    assert np.allclose(got, want, atol=1e-12)


def test_subtract_shape_mismatch():
    with pytest.raises(PipelineError):
        subtract_and_reduce(np.zeros((1, 2, 1)), np.zeros((1, 3, 1)))


# -- z-score ---------------------------------------------------------------------------

def test_zscore_constant_tensor_with_own_stats():
    x = np.full((2, 6), 3.25)
    stats = compute_norm_stats([x])
    assert stats.sigma == 0.0
    assert np.allclose(zscore(x, stats), 0.0)


def test_zscore_standard_normal_corpus():
    rng = np.random.default_rng(42)
    corpus = [rng.standard_normal((4, 64)) for _ in range(200)]
    stats = compute_norm_stats(corpus)
    normed = np.concatenate([zscore(x, stats).ravel() for x in corpus])
    assert abs(normed.mean()) < 0.01
    assert abs(normed.std() - 1) < 0.01


def test_zscore_identity_stats():
    x = RNG.standard_normal((2, 5))
    out = zscore(x, NormStats(0.0, 1.0))
    assert np.allclose(out, x / (1 + 1e-8), atol=1e-15)


def test_zscore_matches_loop():
    x = RNG.standard_normal((3, 7))
    stats = NormStats(0.3, 1.7)
    want = oracles.zscore_loop(x, 0.3, 1.7, stats.eps)
    assert np.allclose(zscore(x, stats), want, atol=1e-12)


def test_zscore_rejects_nonfinite_stats():
    with pytest.raises(PipelineError):
        zscore(np.zeros((1, 1)), NormStats(math.nan, 1.0))


# -- label smoothing ----------------------------------------------------------------------

def test_smooth_labels_peak_and_sum():
    for cell in [(0, 0), (5, 9), (31, 31), (16, 3)]:
        p = smooth_labels(cell, 32, 32, sigma=8.0)
        assert np.unravel_index(p.argmax(), p.shape) == cell
        assert abs(p.sum() - 1.0) < 1e-9
        assert (p >= 0).all()


def test_smooth_labels_random_cells_sum_one():
    rng = np.random.default_rng(5)
    for _ in range(100):
        cell = (int(rng.integers(0, 32)), int(rng.integers(0, 32)))
        assert abs(smooth_labels(cell, 32, 32).sum() - 1.0) < 1e-9


def test_smooth_labels_delta_limit():
    p = smooth_labels((4, 7), 16, 16, sigma=1e-6)
    want = np.zeros((16, 16))
    want[4, 7] = 1.0
    assert np.allclose(p, want)


def test_smooth_labels_out_of_grid():
    with pytest.raises(PipelineError):
        smooth_labels((32, 0), 32, 32)


# -- KL loss ---------------------------------------------------------------------------------

def test_kl_zero_for_identical():
    p = smooth_labels((3, 3), 8, 8)
    assert kl_loss(p, p) == 0.0


def test_kl_closed_form():
    p_y = np.array([1.0, 0.0])
    p_x = np.array([0.5, 0.5])
    assert abs(kl_loss(p_y, p_x) - math.log(2)) < 1e-12


def test_kl_gibbs_inequality():
    rng = np.random.default_rng(11)
    for _ in range(500):
        p_y = rng.random(16)
        p_y /= p_y.sum()
        p_x = rng.random(16)
        p_x /= p_x.sum()
        assert kl_loss(p_y, p_x) >= 0.0


def test_kl_matches_term_oracle():
    rng = np.random.default_rng(12)
    p_y = rng.random((4, 4))
    p_y /= p_y.sum()
    p_x = rng.random((4, 4))
    p_x /= p_x.sum()
    assert abs(kl_loss(p_y, p_x) - oracles.kl_terms(p_y, p_x)) < 1e-12


def test_kl_shape_mismatch():
    with pytest.raises(PipelineError):
        kl_loss(np.ones(3) / 3, np.ones(4) / 4)
