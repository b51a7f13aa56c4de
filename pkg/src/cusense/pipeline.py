"""Uplink-CSI processing stages: background characterization, temporal noise
reduction, feature normalization, and the training-target math.

All functions are pure, operate on [A, K, S] complex channel tensors, and
accumulate in double precision. Per-cell masking uses a shared magnitude
threshold tau so that zero-padded inactive subcarriers never contaminate
statistics.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_TAU = 1e-10
DEFAULT_WINDOW_S = 0.002
DEFAULT_SIGMA = 8.0
ZSCORE_EPS = 1e-8
KL_FLOOR = 1e-12


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class CsiTensor:
    """One slot's channel estimate with its TTI and nominal capture time."""

    values: np.ndarray  # [A, K, S] complex
    tti: int = 0
    timestamp_ns: int = 0


@dataclass(frozen=True)
class BackgroundTemplate:
    """Per-cell complex mean of a target-free run; zero where no valid sample."""

    values: np.ndarray  # [A, K, S] complex128
    counts: np.ndarray  # [A, K, S] int64
    tau: float = DEFAULT_TAU

    @property
    def valid_subcarrier_mask(self) -> np.ndarray:
        """[K] bool: subcarriers with at least one valid sample on every antenna/symbol."""
        return (self.counts > 0).all(axis=(0, 2))


@dataclass(frozen=True)
class NormStats:
    """Global z-score statistics, fit once on the training corpus."""

    mu: float
    sigma: float
    eps: float = ZSCORE_EPS


def validity_set(samples, a: int, k: int, s: int, tau: float = DEFAULT_TAU) -> list[int]:
    """Indices i with |H_i[a,k,s]| > tau."""
    if tau <= 0:
        raise PipelineError("tau must be positive")
    return [i for i, smp in enumerate(samples) if abs(complex(_values(smp)[a, k, s])) > tau]


def _values(sample) -> np.ndarray:
    return sample.values if isinstance(sample, CsiTensor) else np.asarray(sample)


def background_template(samples, tau: float = DEFAULT_TAU) -> BackgroundTemplate:
    """Per-cell complex mean over each cell's validity set."""
    if len(samples) == 0:
        raise PipelineError("background_template needs at least one sample")
    stack = np.stack([_values(s) for s in samples]).astype(np.complex128)
    mask = np.abs(stack) > tau
    counts = mask.sum(axis=0)
    sums = np.where(mask, stack, 0.0).sum(axis=0)
    values = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return BackgroundTemplate(values, counts.astype(np.int64), tau)


def temporal_window(stream: list[CsiTensor], t_ns: int,
                    delta_t_ns: int = int(DEFAULT_WINDOW_S * 1e9)) -> list[CsiTensor]:
    """Causal window: samples with t - delta_t <= t_i <= t (both ends inclusive)."""
    times = [s.timestamp_ns for s in stream]
    if any(b < a for a, b in zip(times, times[1:])):
        raise PipelineError("stream must be sorted by timestamp")
    lo = bisect.bisect_left(times, t_ns - delta_t_ns)
    hi = bisect.bisect_right(times, t_ns)
    return stream[lo:hi]


def coherent_average(window, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Element-wise complex mean over the window, skipping per-cell entries at
    or below tau; cells with no valid entry come out exactly zero."""
    if len(window) == 0:
        raise PipelineError("coherent_average needs a nonempty window")
    stack = np.stack([_values(s) for s in window]).astype(np.complex128)
    mask = np.abs(stack) > tau
    counts = mask.sum(axis=0)
    sums = np.where(mask, stack, 0.0).sum(axis=0)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def subtract_and_reduce(avg: np.ndarray, template: BackgroundTemplate | np.ndarray,
                        valid_mask: np.ndarray | None = None) -> np.ndarray:
    """Magnitude-domain background subtraction, then mean across DMRS symbols,
    restricted to valid subcarriers. Returns real [A, K_v]."""
    tmpl = template.values if isinstance(template, BackgroundTemplate) else np.asarray(template)
    avg = np.asarray(avg)
    if avg.shape != tmpl.shape:
        raise PipelineError(f"shape mismatch: avg {avg.shape} vs template {tmpl.shape}")
    diff = np.abs(avg.astype(np.complex128)) - np.abs(tmpl.astype(np.complex128))
    reduced = diff.mean(axis=2)  # [A, K]
    if valid_mask is None:
        return reduced
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if valid_mask.shape != (avg.shape[1],):
        raise PipelineError(f"valid_mask must be [K]={avg.shape[1]}, got {valid_mask.shape}")
    return reduced[:, valid_mask]


def compute_norm_stats(features, eps: float = ZSCORE_EPS) -> NormStats:
    """Fit mu/sigma over all samples, antennas, and valid subcarriers."""
    flat = np.concatenate([np.asarray(f, dtype=np.float64).ravel() for f in features])
    if flat.size == 0:
        raise PipelineError("no features to fit normalization stats")
    return NormStats(float(flat.mean()), float(flat.std()), eps)


def zscore(features: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - mu) / (sigma + eps), applied uniformly."""
    if not (math.isfinite(stats.mu) and math.isfinite(stats.sigma)):
        raise PipelineError("non-finite normalization stats")
    if stats.sigma < 0:
        raise PipelineError("sigma must be nonnegative")
    return (np.asarray(features, dtype=np.float64) - stats.mu) / (stats.sigma + stats.eps)


def smooth_labels(cell: tuple[int, int], grid_h: int, grid_w: int,
                  sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Truncated-Gaussian label smoothing of a one-hot grid.

    Equivalent to zero-padded convolution of the one-hot with a radius-3*sigma
    Gaussian kernel, renormalized to sum exactly 1. The argmax stays at the
    one-hot cell.
    """
    i0, j0 = cell
    if not (0 <= i0 < grid_h and 0 <= j0 < grid_w):
        raise PipelineError(f"cell {cell} outside {grid_h}x{grid_w} grid")
    grid = np.zeros((grid_h, grid_w), dtype=np.float64)
    if sigma <= 0:
        grid[i0, j0] = 1.0
        return grid
    radius = int(math.ceil(3 * sigma))
    ii = np.arange(max(i0 - radius, 0), min(i0 + radius + 1, grid_h))
    jj = np.arange(max(j0 - radius, 0), min(j0 + radius + 1, grid_w))
    di = (ii - i0)[:, None].astype(np.float64)
    dj = (jj - j0)[None, :].astype(np.float64)
    grid[ii[0]:ii[-1] + 1, jj[0]:jj[-1] + 1] = np.exp(-(di ** 2 + dj ** 2) / (2 * sigma * sigma))
    return grid / grid.sum()  # center term is 1, so the sum is always >= 1


BACKGROUND_MAGIC = b"CUSB0001"


def save_background(template: BackgroundTemplate, path) -> None:
    """Persist in the same tensor-record container as the weight file."""
    from cusense.nn import write_tensor_records

    write_tensor_records(path, BACKGROUND_MAGIC, (0, 0), [
        ("background.values", template.values.astype(np.complex128)),
        ("background.counts", template.counts.astype(np.int64)),
        ("background.tau", np.array([template.tau], dtype=np.float64)),
    ])


def load_background(path) -> BackgroundTemplate:
    from cusense.nn import read_tensor_records, WeightFileError

    _extras, records = read_tensor_records(path, BACKGROUND_MAGIC)
    by_name = dict(records)
    try:
        return BackgroundTemplate(by_name["background.values"],
                                  by_name["background.counts"],
                                  float(by_name["background.tau"][0]))
    except KeyError as e:
        raise WeightFileError(f"{path}: missing record {e}") from None


def kl_loss(p_target: np.ndarray, p_pred: np.ndarray) -> float:
    """KL divergence sum p_y * log(p_y / p_x) with p_x floored at 1e-12 and
    the 0 * log(0/x) terms dropped."""
    p_y = np.asarray(p_target, dtype=np.float64)
    p_x = np.asarray(p_pred, dtype=np.float64)
    if p_y.shape != p_x.shape:
        raise PipelineError(f"shape mismatch: {p_y.shape} vs {p_x.shape}")
    p_x = np.maximum(p_x, KL_FLOOR)
    mask = p_y > 0
    return float(np.sum(p_y[mask] * np.log(p_y[mask] / p_x[mask])))
