"""Training loop: Adam on the KL objective, best-validation weight export."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field

import numpy as np
import torch

from cusense_trainer.data import (
    FeatureDataset,
    NormStats,
    batches,
    load_feature_csv,
    target_bank,
    validate_grid,
)
from cusense_trainer.losses import kl_from_logits
from cusense_trainer.model import GridLocalizer
from cusense_trainer.weights import save_weights


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    sigma: float = 8.0
    grid_h: int = 32
    grid_w: int = 32
    seed: int = 0


@dataclass
class TrainLog:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"config": self.config, "epochs": self.epochs,
                       "best_epoch": self.best_epoch,
                       "best_val_loss": self.best_val_loss}, f, indent=2)


def _epoch_loss(model, feats, cells, bank, grid_w, cfg, optimizer=None) -> float:
    training = optimizer is not None
    model.train(training)
    rng = np.random.default_rng(cfg.seed + (1 if training else 2))
    total = 0.0
    seen = 0
    for x, take in batches(feats, cells, cfg.batch_size, rng if training else None):
        flat = cells[take][:, 0] * grid_w + cells[take][:, 1]
        targets = bank[torch.from_numpy(flat)]
        if training:
            optimizer.zero_grad()
            loss = kl_from_logits(targets, model(x))
            loss.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                loss = kl_from_logits(targets, model(x))
        total += float(loss.detach()) * len(take)
        seen += len(take)
    return total / max(seen, 1)


def train(dataset: FeatureDataset, cfg: TrainConfig,
          log_every=None) -> tuple[GridLocalizer, TrainLog]:
    """Returns the best-validation model (falling back to final weights when
    the dataset has no validation split) and the per-epoch loss log."""
    validate_grid(dataset, cfg.grid_h, cfg.grid_w)
    sizes = dataset.split_sizes()
    if sizes.get("train", 0) == 0:
        raise ValueError(f"dataset has no train split (splits: {sizes})")
    torch.manual_seed(cfg.seed)
    model = GridLocalizer(dataset.antennas, cfg.grid_h, cfg.grid_w)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    bank = target_bank(cfg.grid_h, cfg.grid_w, cfg.sigma)
    tr_x, tr_c = dataset.subset("train")
    va_x, va_c = dataset.subset("val")

    log = TrainLog(config=vars(cfg).copy())
    best_state = None
    for epoch in range(cfg.epochs):
        train_loss = _epoch_loss(model, tr_x, tr_c, bank, cfg.grid_w, cfg, optimizer)
        val_loss = _epoch_loss(model, va_x, va_c, bank, cfg.grid_w, cfg) \
            if len(va_x) else float("nan")
        log.epochs.append({"epoch": epoch, "train_loss": train_loss,
                           "val_loss": val_loss})
        if len(va_x) and val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if log_every:
            log_every(epoch, train_loss, val_loss)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, log


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="cusense-train", description=__doc__)
    p.add_argument("--dataset", required=True, help="feature CSV from the dataset builder")
    p.add_argument("--stats", required=True, help="normalization stats JSON")
    p.add_argument("--out", required=True, help="weight file to write (CUSW0001)")
    p.add_argument("--log", help="training log JSON")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sigma", type=float, default=8.0)
    p.add_argument("--grid", default="32x32")
    p.add_argument("--antennas", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    try:
        grid_h, grid_w = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        p.error(f"--grid wants HxW, got {args.grid!r}")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                      sigma=args.sigma, grid_h=grid_h, grid_w=grid_w, seed=args.seed)
    try:
        stats = NormStats.from_json(args.stats)
        dataset = load_feature_csv(args.dataset, stats, args.antennas)
        model, log = train(dataset, cfg, log_every=lambda e, t, v: print(
            f"epoch {e:3d}  train {t:.5f}  val {v:.5f}", flush=True))
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    save_weights(model, args.out)
    print(f"weights -> {args.out} (best epoch {log.best_epoch})")
    if args.log:
        log.save(args.log)
        print(f"log -> {args.log}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
