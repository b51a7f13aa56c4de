"""KL objective against Gaussian-smoothed grid targets."""

from __future__ import annotations

import math

import torch

PRED_FLOOR = 1e-12


def smooth_target(cell: tuple[int, int], grid_h: int, grid_w: int,
                  sigma: float = 8.0) -> torch.Tensor:
    """One-hot grid convolved with a truncated (radius 3*sigma) Gaussian and
    renormalized to sum 1; sigma -> 0 degenerates to the one-hot itself."""
    i0, j0 = cell
    if not (0 <= i0 < grid_h and 0 <= j0 < grid_w):
        raise ValueError(f"cell {cell} outside {grid_h}x{grid_w} grid")
    grid = torch.zeros(grid_h, grid_w, dtype=torch.float64)
    if sigma <= 0:
        grid[i0, j0] = 1.0
        return grid
    radius = int(math.ceil(3 * sigma))
    ii = torch.arange(max(i0 - radius, 0), min(i0 + radius + 1, grid_h))
    jj = torch.arange(max(j0 - radius, 0), min(j0 + radius + 1, grid_w))
    di = (ii - i0).double()[:, None]
    dj = (jj - j0).double()[None, :]
    grid[ii[0]:ii[-1] + 1, jj[0]:jj[-1] + 1] = \
        torch.exp(-(di ** 2 + dj ** 2) / (2 * sigma * sigma))
    return grid / grid.sum()


def _masked_terms(target: torch.Tensor, log_pred: torch.Tensor) -> torch.Tensor:
    # 0 * log(0 / x) contributes nothing; only positive-target cells count.
    mask = target > 0
    zero = torch.zeros((), dtype=log_pred.dtype, device=log_pred.device)
    return torch.where(mask, target * (target.clamp_min(PRED_FLOOR).log() - log_pred), zero)


def kl_divergence(target: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    """sum target * log(target / predicted), batch-meaned over leading axis.

    Predictions are floored at 1e-12 before the log so collapsed outputs keep
    the loss finite. Unbatched inputs return the plain sum.
    """
    terms = _masked_terms(target, predicted.clamp_min(PRED_FLOOR).log())
    if terms.dim() <= 1:
        return terms.sum()
    return terms.reshape(terms.shape[0], -1).sum(dim=-1).mean()


def kl_from_logits(target: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """KL with the prediction as raw logits, via log-softmax (never underflows)."""
    terms = _masked_terms(target, torch.log_softmax(logits, dim=-1))
    if terms.dim() <= 1:
        return terms.sum()
    return terms.reshape(terms.shape[0], -1).sum(dim=-1).mean()
