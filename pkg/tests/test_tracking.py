"""Grid averaging, Kalman filtering, and accuracy metrics."""

import math

import numpy as np
import pytest

import oracles
from cusense.pipeline import smooth_labels
from cusense.tracking import (
    GridAverager,
    GridGeometry,
    TrackingError,
    average_grids,
    evaluate,
    init_track,
    kalman_step,
)

RNG = np.random.default_rng(21)


# -- grid geometry -------------------------------------------------------------

def test_cell_world_bijection():
    geo = GridGeometry(32, 32)
    for i in range(0, 32, 5):
        for j in range(0, 32, 5):
            x, y = geo.cell_to_world(i, j)
            assert 0 <= x <= geo.width_m and 0 <= y <= geo.depth_m
            assert geo.world_to_cell(x, y) == (i, j)


def test_world_to_cell_clips_edges():
    geo = GridGeometry(8, 8)
    assert geo.world_to_cell(geo.width_m, geo.depth_m) == (7, 7)
    assert geo.world_to_cell(0.0, 0.0) == (0, 0)


# -- grid averaging --------------------------------------------------------------

def test_average_identical_grids():
    g = smooth_labels((3, 4), 8, 8)
    assert np.allclose(average_grids([g] * 10), g, atol=1e-15)


def test_average_two_onehots():
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    assert np.allclose(average_grids([a, b]), [[0.5, 0.5]])


def test_average_matches_loop_oracle():
    grids = []
    for _ in range(10):
        g = RNG.random((6, 6))
        grids.append(g / g.sum())
    got = average_grids(grids)
    want = np.zeros((6, 6))
    for g in grids:
        want += g
    want /= 10
    assert np.allclose(got, want, atol=1e-12)
    assert abs(got.sum() - 1.0) < 1e-9  # mean of distributions is a distribution


def test_averager_warmup_uses_what_exists():
    avg = GridAverager(n=10)
    g1 = np.array([[1.0, 0.0]])
    assert np.allclose(avg.push(g1), g1)
    g2 = np.array([[0.0, 1.0]])
    assert np.allclose(avg.push(g2), [[0.5, 0.5]])


def test_averager_rolls_off_old_grids():
    avg = GridAverager(n=2)
    avg.push(np.array([[1.0, 0.0]]))
    avg.push(np.array([[0.0, 1.0]]))
    out = avg.push(np.array([[0.0, 1.0]]))
    assert np.allclose(out, [[0.0, 1.0]])


# -- Kalman filter ------------------------------------------------------------------

def test_zero_r_snaps_to_measurement():
    state = init_track((0.0, 0.0), pos_var=100.0)
    state = kalman_step(state, (2.5, -1.0), dt_s=1.0, r_base=0.0)
    assert abs(state.x - 2.5) < 1e-9
    assert abs(state.y + 1.0) < 1e-9


def test_predict_only_kinematics():
    state = init_track((0.0, 0.0))
    state.vx, state.vy = 1.0, 0.0
    state = kalman_step(state, None, dt_s=1.0)
    assert (round(state.x, 9), round(state.y, 9)) == (1.0, 0.0)


def test_dt_must_be_positive():
    with pytest.raises(TrackingError):
        kalman_step(init_track((0, 0)), (0, 0), dt_s=0.0)


def test_nonfinite_measurement_rejected():
    with pytest.raises(TrackingError):
        kalman_step(init_track((0, 0)), (math.nan, 0.0), dt_s=0.1)


def test_r_units_modes():
    geo = GridGeometry(32, 32)
    s_cm = kalman_step(init_track((0, 0)), (1, 1), 0.1, r_base=750, r_units="cm2")
    s_cell = kalman_step(init_track((0, 0)), (1, 1), 0.1, r_base=1.0, r_units="cell2",
                         geometry=geo)
    s_m = kalman_step(init_track((0, 0)), (1, 1), 0.1, r_base=0.075, r_units="m2")
    assert abs(s_cm.x - s_m.x) < 1e-12  # 750 cm^2 == 0.075 m^2
    assert s_cell.x != s_cm.x
    with pytest.raises(TrackingError):
        kalman_step(init_track((0, 0)), (1, 1), 0.1, r_units="furlong2")


def test_covariance_symmetric_psd_over_random_steps():
    rng = np.random.default_rng(5)
    state = init_track((0.0, 0.0))
    for step in range(2000):
        meas = None if rng.random() < 0.2 else tuple(rng.normal(0, 3, 2))
        state = kalman_step(state, meas, dt_s=float(rng.uniform(1e-3, 0.5)))
        assert np.allclose(state.cov, state.cov.T, atol=1e-9)
        assert np.linalg.eigvalsh(state.cov).min() > -1e-9
        assert state.cov.diagonal().min() >= 0


def test_noisy_linear_track_converges():
    # Post-convergence position RMSE beats the raw measurement noise.
    rng = np.random.default_rng(9)
    sigma = 0.3
    dt = 0.05
    state = init_track((0.0, 0.0))
    errors, raw_errors = [], []
    for k in range(1000):
        truth = np.array([0.02 * k * dt * 20, 0.5 * k * dt])  # straight line
        meas = truth + rng.normal(0, sigma, 2)
        state = kalman_step(state, tuple(meas), dt)
        if k > 200:
            errors.append(math.dist(state.position, truth))
            raw_errors.append(math.dist(meas, truth))
    kalman_rmse = math.sqrt(np.mean(np.square(errors)))
    raw_rmse = math.sqrt(np.mean(np.square(raw_errors)))
    assert kalman_rmse < raw_rmse


# -- metrics -----------------------------------------------------------------------------

def test_evaluate_perfect_predictions():
    pts = RNG.random((50, 2)) * 5
    rep = evaluate(pts, pts)
    assert rep.mean_cm == rep.median_cm == rep.rmse_cm == 0.0
    assert rep.categories["le_0.5m"] == 1.0


def test_evaluate_constant_offset():
    truth = np.round(RNG.random((40, 2)) * 5 * 4) / 4  # exactly representable
    pred = truth + np.array([1.0, 0.0])
    rep = evaluate(pred, truth)
    assert abs(rep.mean_cm - 100.0) < 1e-9
    assert abs(rep.median_cm - 100.0) < 1e-9
    assert abs(rep.rmse_cm - 100.0) < 1e-9
    assert rep.std_cm < 1e-9
    assert rep.categories["0.5_1m"] == 1.0  # boundary 1 m inclusive


def test_evaluate_matches_naive_stats():
    truth = RNG.random((100, 2)) * 4
    pred = truth + RNG.normal(0, 0.5, (100, 2))
    rep = evaluate(pred, truth)
    errors_cm = [100 * math.dist(p, t) for p, t in zip(pred, truth)]
    mean, median, std, rmse = oracles.error_stats(errors_cm)
    assert abs(rep.mean_cm - mean) < 1e-9
    assert abs(rep.median_cm - median) < 1e-9
    assert abs(rep.std_cm - std) < 1e-9
    assert abs(rep.rmse_cm - rmse) < 1e-9
    assert abs(sum(rep.categories.values()) - 1.0) < 1e-9


def test_evaluate_empty_and_mismatched():
    with pytest.raises(TrackingError):
        evaluate(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(TrackingError):
        evaluate(np.zeros((3, 2)), np.zeros((4, 2)))


def test_report_serialization():
    truth = RNG.random((10, 2))
    rep = evaluate(truth + 0.1, truth)
    doc = rep.to_json(seed=7)
    assert '"mean_error_cm"' in doc and '"seed": 7' in doc
    csv = rep.to_csv_row()
    assert csv.startswith("samples,")
    cdf = rep.cdf_csv()
    assert cdf.splitlines()[0] == "error_m,fraction"
    assert rep.fraction_within(10.0) == 1.0


# -- smoothing benefit -------------------------------------------------------------------

def test_averaging_plus_kalman_beats_raw_argmax():
    # Noisy one-hot grids around a moving target; argmax noise sigma = 2 cells.
    from cusense.nn import argmax_location

    geo = GridGeometry(32, 32)
    rng = np.random.default_rng(17)
    traj = [(3 + 0.002 * k, 5 + 0.001 * k) for k in range(3000)]
    raw_pos, smooth_pos, truth = [], [], []
    averager = GridAverager(10)
    state = None
    for x, y in traj:
        i, j = geo.world_to_cell(x, y)
        ni = int(np.clip(round(i + rng.normal(0, 2)), 0, 31))
        nj = int(np.clip(round(j + rng.normal(0, 2)), 0, 31))
        grid = np.zeros((32, 32))
        grid[ni, nj] = 1.0
        raw_pos.append(geo.cell_to_world(*argmax_location(grid)))
        avg = averager.push(grid)
        meas = geo.cell_to_world(*argmax_location(avg))
        state = init_track(meas) if state is None else \
            kalman_step(state, meas, dt_s=0.0005)
        smooth_pos.append(state.position)
        truth.append((x, y))
    raw_rmse = evaluate(raw_pos, truth).rmse_cm
    smooth_rmse = evaluate(smooth_pos, truth).rmse_cm
    assert smooth_rmse <= 0.8 * raw_rmse
