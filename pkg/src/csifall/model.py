"""DVG -> CNN backbone -> CBAM -> Transformer encoder -> MLP classifier."""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .dvg import DEFAULT_ALPHA, DEFAULT_WINDOW, DynamicVarianceGate, init_gate

CHECKPOINT_VERSION = 1
FALL, NONFALL = 1, 0  # logit / probability column indices


class DvgConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    alpha: float = Field(DEFAULT_ALPHA, gt=0)
    window: int = DEFAULT_WINDOW
    learnable: bool = True
    learnable_alpha: bool = False
    wiring: Literal["depthwise", "dense"] = "depthwise"

    @model_validator(mode="after")
    def _odd(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("dvg window must be odd and >= 1")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backbone: Literal["efficientnet_b0", "tiny_cnn"] = "efficientnet_b0"
    pretrained: bool = False
    pretrained_path: str | None = None
    tiny_channels: int = Field(64, ge=4)
    d_model: int = 512
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    ff_mult: int = 4
    norm_first: bool = True
    encoder_dropout: float = Field(0.1, ge=0, lt=1)
    dropout: float = Field(0.3, ge=0, lt=1)
    n_classes: int = 2
    positional_encoding: bool = True
    cbam: bool = True
    cbam_reduction: int = Field(16, ge=1)
    transformer: bool = True
    dvg: DvgConfig = DvgConfig()

    @model_validator(mode="after")
    def _heads(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        return self


# --- backbones ----------------------------------------------------------------

def efficientnet_b0_features(pretrained_path: str | None = None) -> nn.Sequential:
    """torchvision EfficientNet-B0 ``features``: stem conv, seven MBConv stages, 1x1 conv head."""
    from torchvision.models import efficientnet_b0

    net = efficientnet_b0(weights=None)
    if pretrained_path:
        state = torch.load(pretrained_path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("classifier.")}
        net.load_state_dict(state, strict=False)
    return net.features


class TinyCNN(nn.Sequential):
    """Four strided conv blocks: (3, 625, 30) -> (C, 20, 1)."""

    def __init__(self, channels: int = 64):
        widths = [max(channels // 4, 4), max(channels // 2, 4), max(3 * channels // 4, 4), channels]
        strides = [(2, 2), (2, 2), (2, 2), (4, 4)]
        layers = []
        c_in = 3
        for w, s in zip(widths, strides):
            layers += [nn.Conv2d(c_in, w, 3, stride=s, padding=1, bias=False), nn.BatchNorm2d(w), nn.SiLU()]
            c_in = w
        super().__init__(*layers)
        self.out_channels = channels


def build_backbone(cfg: ModelConfig) -> tuple[nn.Module, int]:
    if cfg.backbone == "efficientnet_b0":
        path = cfg.pretrained_path if cfg.pretrained else None
        if cfg.pretrained and not path:
            raise ValueError("pretrained=True needs pretrained_path (weights are never downloaded)")
        return efficientnet_b0_features(path), 1280
    return TinyCNN(cfg.tiny_channels), cfg.tiny_channels


# --- CBAM ---------------------------------------------------------------------

class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(7)

    def forward(self, x):
        """Return (refined, channel mask (B, C, 1, 1), spatial mask (B, 1, H, W))."""
        mc = self.channel(x)
        x = x * mc
        ms = self.spatial(x)
        return x * ms, mc, ms


# --- temporal head --------------------------------------------------------------

def sinusoidal_encoding(length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe.float()


class EncoderLayer(nn.Module):
    """Transformer encoder layer (pre- or post-norm) that keeps its attention weights."""

    def __init__(self, d_model: int, n_heads: int, ff: int, dropout: float, norm_first: bool = False):
        super().__init__()
        self.norm_first = norm_first
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d_model, ff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ff, d_model))
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop1 = nn.Dropout(dropout)
        self.drop2 = nn.Dropout(dropout)
        self.last_attention = None

    def forward(self, x):
        if self.norm_first:
            h = self.norm1(x)
            a, w = self.attn(h, h, h, need_weights=True, average_attn_weights=False)
            self.last_attention = w.detach()
            x = x + self.drop1(a)
            return x + self.drop2(self.ff(self.norm2(x)))
        a, w = self.attn(x, x, x, need_weights=True, average_attn_weights=False)
        self.last_attention = w.detach()
        x = self.norm1(x + self.drop1(a))
        return self.norm2(x + self.drop2(self.ff(x)))


class TemporalHead(nn.Module):
    def __init__(self, in_channels: int, cfg: ModelConfig, max_len: int = 512):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, cfg.d_model, 1)
        self.use_pe = cfg.positional_encoding
        self.register_buffer("pe", sinusoidal_encoding(max_len, cfg.d_model), persistent=False)
        if cfg.transformer:
            self.layers = nn.ModuleList(
                EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_mult * cfg.d_model, cfg.encoder_dropout, cfg.norm_first)
                for _ in range(cfg.n_layers)
            )
        else:
            self.layers = nn.ModuleList()
        self.classifier = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_model // 2),
            nn.SiLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.d_model // 2, cfg.n_classes),
        )

    def embed(self, f):
        """(B, C, H, W) feature map -> (B, H, d_model) sequence (projection, then mean over W)."""
        return self.proj(f).mean(dim=3).transpose(1, 2)

    def forward_sequence(self, e):
        if self.use_pe:
            e = e + self.pe[: e.shape[1]].to(e.dtype)
        for layer in self.layers:
            e = layer(e)
        return self.classifier(e.mean(dim=1))

    def forward(self, f):
        return self.forward_sequence(self.embed(f))

    def attention_maps(self):
        return [layer.last_attention for layer in self.layers]


# --- full model -----------------------------------------------------------------

@dataclass
class Probabilities:
    p_fall: float
    p_nonfall: float


class FallDetector(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        if cfg.dvg.enabled:
            params = init_gate(cfg.dvg.alpha, 3, cfg.dvg.wiring, cfg.dvg.learnable)
            self.gate = DynamicVarianceGate(params, cfg.dvg.window, cfg.dvg.learnable_alpha)
        else:
            self.gate = None
        self.backbone, channels = build_backbone(cfg)
        self.cbam = CBAM(channels, cfg.cbam_reduction) if cfg.cbam else None
        self.head = TemporalHead(channels, cfg)

    def forward(self, x, diagnostics: dict | None = None):
        """Standardized (B, 3, T, 30) batch -> (B, n_classes) logits."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, T, S) input, got {tuple(x.shape)}")
        if self.gate is not None:
            x, mask = self.gate(x)
            if diagnostics is not None:
                diagnostics["dvg_mask"] = mask.detach()
        f = self.backbone(x)
        if self.cbam is not None:
            f, mc, ms = self.cbam(f)
            if diagnostics is not None:
                diagnostics["cbam_channel"] = mc.detach()
                diagnostics["cbam_spatial"] = ms.detach()
        if diagnostics is not None:
            diagnostics["features_shape"] = tuple(f.shape[1:])
        logits = self.head(f)
        if diagnostics is not None:
            diagnostics["attention"] = self.head.attention_maps()
        return logits

    def predict_proba(self, x) -> torch.Tensor:
        return F.softmax(self.forward(x), dim=-1)


def to_batch(x) -> torch.Tensor:
    data = getattr(x, "data", x)
    t = torch.as_tensor(np.asarray(data), dtype=torch.float32)
    return t.unsqueeze(0) if t.dim() == 3 else t


def model_forward(x, model: FallDetector, with_diagnostics: bool = False):
    """Eval-mode forward of one standardized tensor -> (Probabilities, diagnostics)."""
    model.eval()
    diag = {} if with_diagnostics else None
    with torch.no_grad():
        p = F.softmax(model(to_batch(x).to(next(model.parameters()).dtype), diag), dim=-1)[0]
    return Probabilities(float(p[FALL]), float(p[NONFALL])), diag or {}


def stage_shapes(backbone: nn.Module, x: torch.Tensor) -> list[tuple[int, ...]]:
    """Output shape (without batch dim) after each top-level backbone stage."""
    shapes = []
    with torch.no_grad():
        for stage in backbone:
            x = stage(x)
            shapes.append(tuple(x.shape[1:]))
    return shapes


# --- checkpoints ------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: FallDetector, extra: dict | None = None) -> None:
    """Zip archive: ``meta.json`` (version, config, tensor manifest) + raw little-endian f32 tensors."""
    state = model.state_dict()
    manifest = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, tensor) in enumerate(state.items()):
            arr = tensor.detach().cpu().numpy()
            member = f"tensors/{i:04d}.f32"
            manifest[name] = {"file": member, "shape": list(arr.shape), "dtype": str(arr.dtype)}
            zf.writestr(member, np.ascontiguousarray(arr, dtype="<f4").tobytes())
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "config": model.cfg.model_dump(),
            "tensors": manifest,
            "extra": extra or {},
        }
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))


def read_checkpoint_meta(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("meta.json"))


def load_checkpoint(path, expected: ModelConfig | None = None) -> FallDetector:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        cfg = ModelConfig.model_validate(meta["config"])
        if expected is not None and expected.model_dump() != cfg.model_dump():
            raise CheckpointError(f"{path}: checkpoint config does not match the requested model config")
        model = FallDetector(cfg)
        state = model.state_dict()
        if set(state) != set(meta["tensors"]):
            missing = sorted(set(state) ^ set(meta["tensors"]))
            raise CheckpointError(f"{path}: parameter names differ from config, e.g. {missing[:3]}")
        loaded = {}
        for name, ref in state.items():
            entry = meta["tensors"][name]
            if list(ref.shape) != entry["shape"]:
                raise CheckpointError(f"{path}: {name} has shape {entry['shape']}, model expects {list(ref.shape)}")
            arr = np.frombuffer(zf.read(entry["file"]), dtype="<f4").reshape(entry["shape"])
            loaded[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
        model.load_state_dict(loaded)
    model.eval()
    return model
