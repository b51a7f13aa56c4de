"""Torch definition of the grid-localization network.

Topology is pinned to the inference engine's contract: Conv1d(A->64, k=7,
s=1, p=3) + BN + ReLU + MaxPool(2,2); three plain blocks with channel ladder
64->128->256->512 (first conv stride 2, second stride 1, both k=3 p=1, BN+ReLU
after each, no residual connections); adaptive average pooling to one tap;
Linear 512->512 + ReLU + Dropout(0.3); Linear 512->256 + ReLU + Dropout(0.15);
Linear 256->H*W. The softmax lives in the loss/inference path, not here.
"""

from __future__ import annotations

import math

import torch
from torch import nn

CHANNELS = (64, 128, 256, 512)
DROPOUT = (0.3, 0.15)


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv1d(c_in, c_out, kernel_size=3, stride=2, padding=1),
        nn.BatchNorm1d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv1d(c_out, c_out, kernel_size=3, stride=1, padding=1),
        nn.BatchNorm1d(c_out),
        nn.ReLU(inplace=True),
    )


class GridLocalizer(nn.Module):
    def __init__(self, in_channels: int = 4, grid_h: int = 32, grid_w: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.stem = nn.Sequential(
            nn.Conv1d(in_channels, CHANNELS[0], kernel_size=7, stride=1, padding=3),
            nn.BatchNorm1d(CHANNELS[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool1d(kernel_size=2, stride=2),
        )
        self.block1 = _block(CHANNELS[0], CHANNELS[1])
        self.block2 = _block(CHANNELS[1], CHANNELS[2])
        self.block3 = _block(CHANNELS[2], CHANNELS[3])
        self.pool = nn.AdaptiveAvgPool1d(1)
        self.head = nn.Sequential(
            nn.Linear(CHANNELS[3], CHANNELS[3]),
            nn.ReLU(inplace=True),
            nn.Dropout(DROPOUT[0]),
            nn.Linear(CHANNELS[3], CHANNELS[3] // 2),
            nn.ReLU(inplace=True),
            nn.Dropout(DROPOUT[1]),
            nn.Linear(CHANNELS[3] // 2, grid_h * grid_w),
        )
        self._init_weights()

    def _init_weights(self) -> None:
        # Fan-in scaled normal for convs and linears; identity batchnorm.
        for m in self.modules():
            if isinstance(m, (nn.Conv1d, nn.Linear)):
                fan_in = m.weight.shape[1] * (m.weight.shape[2] if m.weight.dim() == 3 else 1)
                nn.init.normal_(m.weight, std=1.0 / math.sqrt(fan_in))
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm1d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[B, A, K_v] features -> [B, H*W] logits."""
        h = self.stem(x)
        h = self.block3(self.block2(self.block1(h)))
        h = self.pool(h).flatten(1)
        return self.head(h)

    def predict_grid(self, x: torch.Tensor) -> torch.Tensor:
        """Inference-path probabilities, [B, H, W]."""
        self.eval()
        with torch.no_grad():
            logits = self.forward(x)
            probs = torch.softmax(logits, dim=1)
        return probs.reshape(-1, self.grid_h, self.grid_w)
