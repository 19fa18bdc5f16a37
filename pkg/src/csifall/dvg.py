"""Dynamic Variance Gate: local temporal variance -> sigmoid soft mask -> gated input."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VAR_EPS = 1e-6
INIT_BIAS = -3.0
DEFAULT_ALPHA = 100.0
DEFAULT_WINDOW = 15


@dataclass
class GateParams:
    kernel: np.ndarray  # (3, 1, 3, 3) depthwise, or (3, 3, 3, 3) dense
    bias: float
    alpha: float
    learnable: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


def init_gate(alpha: float = DEFAULT_ALPHA, channels: int = 3, wiring: str = "depthwise",
              learnable: bool = True) -> GateParams:
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if wiring == "depthwise":
        kernel = np.full((channels, 1, 3, 3), 1.0 / 9.0)
    elif wiring == "dense":
        kernel = np.full((channels, channels, 3, 3), 1.0 / (9.0 * channels))
    else:
        raise ValueError(f"unknown wiring {wiring!r}")
    return GateParams(kernel, INIT_BIAS, float(alpha), learnable)


def local_variance(x: torch.Tensor, window: int = DEFAULT_WINDOW, eps: float = VAR_EPS) -> torch.Tensor:
    """Windowed variance along time for (C, T, S) or (B, C, T, S) input.

    ReLU(E[x^2] - E[x]^2) + eps over a centred window of ``window`` samples with
    replicate padding at the sequence edges.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected (C,T,S) or (B,C,T,S), got shape {tuple(x.shape)}")
    # variance is shift invariant; centring each column first limits cancellation
    x = x - x.mean(dim=2, keepdim=True)
    half = window // 2
    xp = F.pad(x, (0, 0, half, half), mode="replicate") if half else x
    mean = F.avg_pool2d(xp, (window, 1), stride=1)
    mean_sq = F.avg_pool2d(xp * xp, (window, 1), stride=1)
    v = F.relu(mean_sq - mean * mean) + eps
    return v.squeeze(0) if squeeze else v


class DynamicVarianceGate(nn.Module):
    def __init__(self, params: GateParams | None = None, window: int = DEFAULT_WINDOW,
                 learnable_alpha: bool = False):
        super().__init__()
        params = params or init_gate()
        self.window = window
        self.channels = params.kernel.shape[0]
        self.depthwise = params.kernel.shape[1] == 1
        kernel = torch.tensor(params.kernel, dtype=torch.float32)
        bias = torch.tensor(float(params.bias))
        alpha = torch.tensor(float(params.alpha))
        if params.learnable:
            self.kernel = nn.Parameter(kernel)
            self.bias = nn.Parameter(bias)
        else:
            self.register_buffer("kernel", kernel)
            self.register_buffer("bias", bias)
        if learnable_alpha:
            self.alpha = nn.Parameter(alpha)
        else:
            self.register_buffer("alpha", alpha)

    def mask(self, x: torch.Tensor) -> torch.Tensor:
        v = local_variance(x, self.window)
        groups = self.channels if self.depthwise else 1
        z = F.conv2d(self.alpha * v, self.kernel, padding=1, groups=groups)
        return torch.sigmoid(z + self.bias)

    def forward(self, x: torch.Tensor):
        """Return (gated, mask) for (B, C, T, S) input."""
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, T, S), got {tuple(x.shape)}")
        m = self.mask(x)
        return x * m, m

    def params(self) -> GateParams:
        return GateParams(self.kernel.detach().cpu().double().numpy(), float(self.bias),
                          float(self.alpha), isinstance(self.kernel, nn.Parameter))


def gate_forward(x, params: GateParams, window: int = DEFAULT_WINDOW):
    """Functional gate on a single (3, T, 30) array/tensor. Returns (gated, mask) as numpy."""
    gate = DynamicVarianceGate(params, window).double()
    xt = torch.as_tensor(np.asarray(x), dtype=torch.float64).unsqueeze(0)
    if xt.shape[1] != gate.channels:
        raise ValueError(f"expected {gate.channels} channels, got {xt.shape[1]}")
    with torch.no_grad():
        out, m = gate(xt)
    return out[0].numpy(), m[0].numpy()
