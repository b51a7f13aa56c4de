"""Feature-CSV dataset loading and target construction.

The dataset builder exports one row per slot: tti, t_ns, x_m, y_m, cell_i,
cell_j, split, f0..fN (raw background-subtracted features, antennas x valid subcarriers,
row-major). A JSON sidecar carries the global z-score stats and grid shape.
Normalization is applied here with those frozen stats, identically to every
split.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
import torch

from cusense_trainer.losses import smooth_target


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float
    eps: float = 1e-8

    @classmethod
    def from_json(cls, path) -> "NormStats":
        doc = json.loads(open(path).read())
        return cls(doc["mu"], doc["sigma"], doc.get("eps", 1e-8))


@dataclass
class FeatureDataset:
    features: np.ndarray  # [N, A, K_v] float32, normalized
    cells: np.ndarray  # [N, 2] int
    splits: np.ndarray  # [N] str
    antennas: int

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits == split
        return self.features[mask], self.cells[mask]

    def split_sizes(self) -> dict[str, int]:
        names, counts = np.unique(self.splits, return_counts=True)
        return dict(zip(names.tolist(), counts.tolist()))


def load_feature_csv(path, stats: NormStats, antennas: int) -> FeatureDataset:
    feats, cells, splits = [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:7] != ["tti", "t_ns", "x_m", "y_m", "cell_i", "cell_j", "split"]:
            raise ValueError(f"{path}: unexpected header {header[:7]}")
        n_feat = len(header) - 7
        if n_feat % antennas:
            raise ValueError(f"{path}: {n_feat} feature columns do not divide "
                             f"across {antennas} antennas")
        for row in reader:
            if not row:
                continue
            cells.append((int(row[4]), int(row[5])))
            splits.append(row[6])
            feats.append(np.array(row[7:], dtype=np.float64))
    if not feats:
        raise ValueError(f"{path}: no records")
    x = np.stack(feats)
    x = (x - stats.mu) / (stats.sigma + stats.eps)
    x = x.reshape(len(feats), antennas, -1).astype(np.float32)
    return FeatureDataset(x, np.array(cells), np.array(splits), antennas)


def validate_grid(ds: FeatureDataset, grid_h: int, grid_w: int) -> None:
    if ds.cells[:, 0].max() >= grid_h or ds.cells[:, 1].max() >= grid_w:
        raise ValueError(
            f"dataset cells reach ({ds.cells[:, 0].max()}, {ds.cells[:, 1].max()}), "
            f"outside the {grid_h}x{grid_w} grid")


def target_bank(grid_h: int, grid_w: int, sigma: float) -> torch.Tensor:
    """Smoothed target for every cell, [H*W, H*W] float32 (row = flat cell)."""
    bank = torch.empty(grid_h * grid_w, grid_h * grid_w, dtype=torch.float32)
    for i in range(grid_h):
        for j in range(grid_w):
            bank[i * grid_w + j] = smooth_target((i, j), grid_h, grid_w, sigma).flatten().float()
    return bank


def batches(features: np.ndarray, cells: np.ndarray, batch_size: int,
            generator: np.random.Generator | None = None):
    """Mini-batch index stream; shuffled when a generator is supplied."""
    idx = np.arange(len(features))
    if generator is not None:
        generator.shuffle(idx)
    for start in range(0, len(idx), batch_size):
        take = idx[start:start + batch_size]
        yield torch.from_numpy(features[take]), take
