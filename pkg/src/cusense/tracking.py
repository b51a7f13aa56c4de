"""Temporal grid averaging, grid-to-world mapping, constant-velocity Kalman
filtering, and localization accuracy metrics.

The Kalman filter runs in world meters. Process noise is Q * I4 per step;
measurement noise is r_base scaled by r_units ("cm2" reads r_base as cm^2 and
converts to m^2, "m2" uses it as-is, "cell2" scales by the mean squared cell
pitch of a grid geometry). Covariance updates use the Joseph form and are
re-symmetrized, so the covariance stays symmetric PSD.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

DEFAULT_Q = 1e-5
DEFAULT_R_BASE = 750.0
CATEGORY_EDGES_M = (0.5, 1.0, 2.0, 10.0)
CATEGORY_LABELS = ("le_0.5m", "0.5_1m", "1_2m", "2_10m", "gt_10m")


class TrackingError(Exception):
    pass


@dataclass(frozen=True)
class GridGeometry:
    """Cell (i, j) <-> world (x, y) mapping over the target area."""

    h: int = 32
    w: int = 32
    width_m: float = 6.78
    depth_m: float = 10.06

    def cell_to_world(self, i: int, j: int) -> tuple[float, float]:
        return ((j + 0.5) * self.width_m / self.w, (i + 0.5) * self.depth_m / self.h)

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        j = min(max(int(x / self.width_m * self.w), 0), self.w - 1)
        i = min(max(int(y / self.depth_m * self.h), 0), self.h - 1)
        return i, j

    @property
    def cell_pitch_m(self) -> tuple[float, float]:
        return self.width_m / self.w, self.depth_m / self.h


def average_grids(grids, n: int = 10) -> np.ndarray:
    """Arithmetic mean of the last n grids (or all, during warm-up)."""
    recent = list(grids)[-n:]
    if not recent:
        raise TrackingError("no grids to average")
    return np.mean(np.stack([np.asarray(g, dtype=np.float64) for g in recent]), axis=0)


class GridAverager:
    """Rolling mean over the last n probability grids."""

    def __init__(self, n: int = 10):
        self.n = n
        self._window: deque[np.ndarray] = deque(maxlen=n)

    def push(self, grid: np.ndarray) -> np.ndarray:
        self._window.append(np.asarray(grid, dtype=np.float64))
        return average_grids(self._window, self.n)


@dataclass
class TrackState:
    x: float
    y: float
    vx: float
    vy: float
    cov: np.ndarray  # [4, 4]

    @property
    def position(self) -> tuple[float, float]:
        return self.x, self.y


def init_track(measurement, pos_var: float = 1.0, vel_var: float = 1.0) -> TrackState:
    x, y = float(measurement[0]), float(measurement[1])
    return TrackState(x, y, 0.0, 0.0, np.diag([pos_var, pos_var, vel_var, vel_var]).astype(float))


def _r_matrix(r_base: float, r_units: str, geometry: GridGeometry | None) -> np.ndarray:
    if r_units == "cm2":
        r = r_base * 1e-4
    elif r_units == "m2":
        r = r_base
    elif r_units == "cell2":
        geo = geometry or GridGeometry()
        px, py = geo.cell_pitch_m
        r = r_base * (px * px + py * py) / 2
    else:
        raise TrackingError(f"unknown r_units {r_units!r} (cm2, m2, cell2)")
    return r * np.eye(2)


def kalman_step(state: TrackState, measurement, dt_s: float, *,
                q: float = DEFAULT_Q, r_base: float = DEFAULT_R_BASE,
                r_units: str = "cm2",
                geometry: GridGeometry | None = None) -> TrackState:
    """One predict (+ update when a measurement is given) of the CV filter."""
    if dt_s <= 0:
        raise TrackingError("dt_s must be positive")
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt_s
    xvec = np.array([state.x, state.y, state.vx, state.vy])
    xvec = f @ xvec
    cov = f @ state.cov @ f.T + q * np.eye(4)

    if measurement is not None:
        z = np.asarray(measurement, dtype=float)
        if z.shape != (2,) or not np.isfinite(z).all():
            raise TrackingError(f"measurement must be finite (x, y), got {measurement}")
        h = np.zeros((2, 4))
        h[0, 0] = h[1, 1] = 1.0
        r = _r_matrix(r_base, r_units, geometry)
        innov = z - h @ xvec
        s = h @ cov @ h.T + r
        gain = cov @ h.T @ np.linalg.inv(s)
        xvec = xvec + gain @ innov
        ikh = np.eye(4) - gain @ h
        cov = ikh @ cov @ ikh.T + gain @ r @ gain.T  # Joseph form keeps PSD

    cov = (cov + cov.T) / 2
    return TrackState(float(xvec[0]), float(xvec[1]), float(xvec[2]), float(xvec[3]), cov)


# -- metrics --------------------------------------------------------------------

@dataclass
class MetricsReport:
    samples: int
    mean_cm: float
    median_cm: float
    std_cm: float
    rmse_cm: float
    categories: dict[str, float]  # label -> fraction of samples
    cdf_m: list[tuple[float, float]]  # (error_m, fraction <= error)

    def fraction_within(self, radius_m: float) -> float:
        frac = 0.0
        for err, cum in self.cdf_m:
            if err <= radius_m:
                frac = cum
            else:
                break
        return frac

    def to_json(self, **extra) -> str:
        doc = {
            "samples": self.samples,
            "mean_error_cm": round(self.mean_cm, 4),
            "median_error_cm": round(self.median_cm, 4),
            "std_error_cm": round(self.std_cm, 4),
            "rmse_cm": round(self.rmse_cm, 4),
            "categories": {k: round(v, 6) for k, v in self.categories.items()},
            **extra,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv_row(self) -> str:
        head = "samples,mean_cm,median_cm,std_cm,rmse_cm," + ",".join(CATEGORY_LABELS)
        row = f"{self.samples},{self.mean_cm:.4f},{self.median_cm:.4f}," \
              f"{self.std_cm:.4f},{self.rmse_cm:.4f}," \
              + ",".join(f"{self.categories[c]:.6f}" for c in CATEGORY_LABELS)
        return head + "\n" + row + "\n"

    def cdf_csv(self) -> str:
        lines = ["error_m,fraction"]
        lines += [f"{e:.6f},{f:.6f}" for e, f in self.cdf_m]
        return "\n".join(lines) + "\n"


def evaluate(predictions, ground_truth) -> MetricsReport:
    """Euclidean peak-distance error statistics between aligned position series."""
    pred = np.asarray(predictions, dtype=float)
    truth = np.asarray(ground_truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise TrackingError(f"need aligned [N, 2] series, got {pred.shape} vs {truth.shape}")
    if len(pred) == 0:
        raise TrackingError("empty input")
    err_m = np.hypot(pred[:, 0] - truth[:, 0], pred[:, 1] - truth[:, 1])
    err_cm = err_m * 100
    cats = {}
    prev = 0.0
    for label, edge in zip(CATEGORY_LABELS, CATEGORY_EDGES_M):
        frac = float(np.mean((err_m > prev) & (err_m <= edge))) if prev else \
            float(np.mean(err_m <= edge))
        cats[label] = frac
        prev = edge
    cats[CATEGORY_LABELS[-1]] = float(np.mean(err_m > CATEGORY_EDGES_M[-1]))
    srt = np.sort(err_m)
    cdf = [(float(e), float((i + 1) / len(srt))) for i, e in enumerate(srt)]
    return MetricsReport(
        samples=len(err_m),
        mean_cm=float(err_cm.mean()),
        median_cm=float(np.median(err_cm)),
        std_cm=float(err_cm.std()),
        rmse_cm=float(np.sqrt(np.mean(err_cm ** 2))),
        categories=cats,
        cdf_m=cdf,
    )
