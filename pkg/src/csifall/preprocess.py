"""Window segmentation, down-sampling, tensor reorganization and normalization."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .ingest import N_RX, N_STREAMS, N_SUB, CsiFrame, apply_perm, butterworth_lowpass

WINDOW = 5000
DOWNSAMPLE = 8
T_DS = WINDOW // DOWNSAMPLE  # 625
TENSOR_SHAPE = (N_RX, T_DS, N_SUB)
IN_EPS = 1e-8

CHANNEL_MEAN = np.array([0.485, 0.456, 0.406])
CHANNEL_STD = np.array([0.229, 0.224, 0.225])


class Stage(str, enum.Enum):
    reorganized = "reorganized"
    instance_normalized = "instance_normalized"
    standardized = "standardized"
    gated = "gated"


class StageError(ValueError):
    pass


@dataclass(frozen=True)
class CsiWindow:
    data: np.ndarray  # (T0, 90)
    start_timestamp_us: int = 0

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != N_STREAMS:
            raise ValueError(f"window must be (T, {N_STREAMS}), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("window contains non-finite values")


@dataclass(frozen=True)
class CsiTensor:
    data: np.ndarray  # (3, T, 30)
    stage: Stage = Stage.reorganized

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != N_RX or self.data.shape[2] != N_SUB:
            raise ValueError(f"tensor must be (3, T, 30), got {self.data.shape}")

    def with_data(self, data: np.ndarray, stage: Stage | None = None) -> "CsiTensor":
        return CsiTensor(data, self.stage if stage is None else stage)


def frames_to_matrix(frames: Iterable[CsiFrame]) -> np.ndarray:
    return np.stack([apply_perm(f).amplitude.reshape(-1) for f in frames])


def segment_stream(frames: Iterable[CsiFrame], window: int = WINDOW, step: int | None = None) -> Iterator[CsiWindow]:
    """Count-based sliding windows over a frame stream (PERM applied per frame)."""
    step = window if step is None else step
    if not 1 <= step <= window:
        raise ValueError(f"step must be in [1, {window}], got {step}")
    buf = np.empty((window, N_STREAMS), dtype=np.float32)
    stamps = np.empty(window, dtype=np.int64)
    fill = 0
    for frame in frames:
        frame = apply_perm(frame)
        buf[fill] = frame.amplitude.reshape(-1)
        stamps[fill] = frame.timestamp_us
        fill += 1
        if fill == window:
            yield CsiWindow(buf.copy(), int(stamps[0]))
            keep = window - step
            buf[:keep] = buf[step:]
            stamps[:keep] = stamps[step:]
            fill = keep


def downsample(window, r: int = DOWNSAMPLE, method: str = "mean") -> np.ndarray:
    """Reduce the time axis by ``r``: block mean (default) or stride decimation."""
    data = window.data if isinstance(window, CsiWindow) else np.asarray(window)
    n = data.shape[0]
    if r < 1 or n % r:
        raise ValueError(f"factor {r} does not divide window length {n}")
    if method == "mean":
        return data.reshape(n // r, r, data.shape[1]).mean(axis=1, dtype=np.float64).astype(np.float32)
    if method == "decimate":
        return np.ascontiguousarray(data[::r]).astype(np.float32)
    raise ValueError(f"unknown downsample method {method!r}")


def reorganize(matrix: np.ndarray) -> CsiTensor:
    """(T, 90) antenna-major matrix -> (3, T, 30) tensor."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[1] != N_STREAMS:
        raise ValueError(f"expected (T, {N_STREAMS}) matrix, got {matrix.shape}")
    data = matrix.reshape(matrix.shape[0], N_RX, N_SUB).transpose(1, 0, 2)
    return CsiTensor(np.ascontiguousarray(data), Stage.reorganized)


def instance_normalize(t: CsiTensor, eps: float = IN_EPS) -> CsiTensor:
    if t.stage != Stage.reorganized:
        raise StageError(f"instance_normalize expects a reorganized tensor, got {t.stage.value}")
    x = t.data.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains non-finite values")
    lo, hi = x.min(), x.max()
    out = (x - lo) / (hi - lo + eps)
    # float32 rounding can land a value of 1 - 1e-9 on exactly 1.0
    out = np.minimum(out.astype(np.float32), np.nextafter(np.float32(1), np.float32(0)))
    return CsiTensor(out, Stage.instance_normalized)


def channel_standardize(t: CsiTensor) -> CsiTensor:
    if t.stage != Stage.instance_normalized:
        raise StageError(f"channel_standardize expects an instance-normalized tensor, got {t.stage.value}")
    x = (t.data.astype(np.float64) - CHANNEL_MEAN[:, None, None]) / CHANNEL_STD[:, None, None]
    return CsiTensor(x.astype(np.float32), Stage.standardized)


def channel_destandardize(t: CsiTensor) -> CsiTensor:
    if t.stage != Stage.standardized:
        raise StageError(f"expected a standardized tensor, got {t.stage.value}")
    x = t.data.astype(np.float64) * CHANNEL_STD[:, None, None] + CHANNEL_MEAN[:, None, None]
    return CsiTensor(x.astype(np.float32), Stage.instance_normalized)


def standardize_array(x):
    """Batch/array form of channel standardization; works on numpy or torch (…, 3, T, S)."""
    mean = CHANNEL_MEAN.reshape(3, 1, 1).astype(np.float32)
    std = CHANNEL_STD.reshape(3, 1, 1).astype(np.float32)
    if isinstance(x, np.ndarray):
        return ((x - mean) / std).astype(np.float32)
    import torch

    return (x - torch.as_tensor(mean, dtype=x.dtype)) / torch.as_tensor(std, dtype=x.dtype)


def preprocess_window(window, lowpass: bool = False, causal: bool = True, cutoff_hz: float = 50.0,
                      order: int = 4, rate_hz: float = 1000.0, r: int = DOWNSAMPLE,
                      method: str = "mean") -> CsiTensor:
    """Raw window -> instance-normalized (3, 625, 30) tensor.

    Channel standardization is left to the caller so augmentation can run in
    between during training.
    """
    data = window.data if isinstance(window, CsiWindow) else np.asarray(window)
    if lowpass:
        data = butterworth_lowpass(data, order=order, cutoff_hz=cutoff_hz, rate_hz=rate_hz, causal=causal)
    ds = downsample(data, r, method)
    return instance_normalize(reorganize(ds))


# --- sample archive ---------------------------------------------------------
# one tensor per file: 8-byte header of four little-endian u16 dims (unused = 0),
# then little-endian float32 payload in C order

_SHAPE_HEADER = struct.Struct("<4H")


def save_tensor(path, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim > 4:
        raise ValueError("at most 4 dimensions supported")
    dims = list(data.shape) + [0] * (4 - data.ndim)
    with open(path, "wb") as fh:
        fh.write(_SHAPE_HEADER.pack(*dims))
        fh.write(data.tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _SHAPE_HEADER.size:
        raise ValueError(f"{path}: file too short for shape header")
    dims = [d for d in _SHAPE_HEADER.unpack(raw[: _SHAPE_HEADER.size]) if d]
    expected = int(np.prod(dims)) * 4
    payload = raw[_SHAPE_HEADER.size:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, shape {dims} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    file: str
    label: str  # "fall" | "nonfall"
    environment_id: str


@dataclass
class DatasetIndex:
    """Environment-labelled sample list; tensor files are relative to ``root``."""

    samples: list[SampleRecord]
    root: Path = Path(".")
    environments: dict | None = None  # env_id -> {"nlos": bool, ...}

    def __post_init__(self):
        for s in self.samples:
            if s.label not in ("fall", "nonfall"):
                raise ValueError(f"sample {s.sample_id}: label must be fall|nonfall, got {s.label!r}")
            if not s.environment_id:
                raise ValueError(f"sample {s.sample_id}: empty environment_id")

    def __len__(self):
        return len(self.samples)

    def by_id(self) -> dict[str, SampleRecord]:
        return {s.sample_id: s for s in self.samples}

    def env_ids(self) -> list[str]:
        return sorted({s.environment_id for s in self.samples})

    def path_of(self, s: SampleRecord) -> Path:
        return self.root / s.file

    def load(self, sample_id: str) -> CsiTensor:
        return CsiTensor(load_tensor(self.path_of(self.by_id()[sample_id])), Stage.instance_normalized)

    def save(self, path) -> None:
        path = Path(path)
        doc = {
            "version": 1,
            "samples": [vars(s) for s in self.samples],
            "environments": self.environments or {},
        }
        path.write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def read(cls, path, check_files: bool = True) -> "DatasetIndex":
        path = Path(path)
        doc = json.loads(path.read_text())
        samples = [SampleRecord(**s) for s in doc["samples"]]
        idx = cls(samples, path.parent, doc.get("environments") or {})
        if check_files:
            missing = [s.file for s in samples if not idx.path_of(s).exists()]
            if missing:
                raise FileNotFoundError(f"{len(missing)} sample files missing under {path.parent}, e.g. {missing[0]}")
        return idx
