"""Training-time augmentations that mimic wireless propagation effects.

All functions take and return :class:`CsiTensor` values and never mutate
their input. Randomness comes only from the ``numpy.random.Generator`` passed
in.
"""

from __future__ import annotations

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .preprocess import CsiTensor, Stage, StageError


class AugmentPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    p_noise: float = Field(0.5, ge=0, le=1)
    p_scale: float = Field(0.5, ge=0, le=1)
    p_shift: float = Field(0.5, ge=0, le=1)
    p_nlos: float = Field(0.3, ge=0, le=1)
    sigma: float = Field(0.02, ge=0)
    scale_lo: float = 0.5
    scale_hi: float = 1.5
    shift_max: int = Field(50, ge=0)
    nlos_scale: float = 0.5
    rng_seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if not self.scale_lo < self.scale_hi:
            raise ValueError("scale_lo must be < scale_hi")
        if not 0 < self.nlos_scale <= 1:
            raise ValueError("nlos_scale must be in (0, 1]")
        return self

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(p_noise=0, p_scale=0, p_shift=0, p_nlos=0)


def inject_noise(t: CsiTensor, sigma: float, rng: np.random.Generator) -> CsiTensor:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return t.with_data(t.data.copy())
    noise = rng.normal(0.0, sigma, size=t.data.shape)
    return t.with_data((t.data + noise).astype(np.float32))


def scale_amplitude(t: CsiTensor, rng: np.random.Generator | None = None, lo: float = 0.5, hi: float = 1.5,
                    lambdas=None) -> tuple[CsiTensor, np.ndarray]:
    """Scale each receive antenna by its own factor drawn from U(lo, hi).

    ``lambdas`` forces the factors (used by tests); the drawn factors are
    returned either way.
    """
    if lambdas is None:
        lambdas = rng.uniform(lo, hi, size=t.data.shape[0])
    lambdas = np.asarray(lambdas, dtype=np.float64)
    out = t.data * lambdas[:, None, None].astype(np.float32)
    return t.with_data(out.astype(np.float32)), lambdas


def time_shift(t: CsiTensor, delta: int) -> CsiTensor:
    """Circular shift along time: out[:, k] = in[:, (k - delta) mod T]."""
    return t.with_data(np.roll(t.data, int(delta), axis=1))


def spectral_smooth(x: np.ndarray, factor: int = 2, axis: int = 1) -> np.ndarray:
    """Block-mean down-sample by ``factor`` then linearly interpolate back.

    Interpolation nodes sit at block centres, so the temporal mean of every
    column is preserved when the length divides by ``factor``. Other lengths
    are edge-padded to a multiple first and cropped afterwards.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    n = x.shape[0]
    if n < 1:
        raise ValueError("empty time axis")
    pad = (-n) % factor
    if pad:
        x = np.concatenate([x, np.repeat(x[-1:], pad, axis=0)], axis=0)
    m = x.shape[0] // factor
    blocks = x.reshape((m, factor) + x.shape[1:]).mean(axis=1)
    centers = np.arange(m) * factor + (factor - 1) / 2.0
    pos = np.clip(np.arange(n, dtype=np.float64), centers[0], centers[-1])
    hi = np.searchsorted(centers, pos, side="left").clip(1, max(m - 1, 1))
    lo = hi - 1
    if m == 1:
        out = np.repeat(blocks[:1], n, axis=0)
    else:
        w = ((pos - centers[lo]) / factor).reshape((n,) + (1,) * (x.ndim - 1))
        out = blocks[lo] * (1 - w) + blocks[hi] * w
    return np.moveaxis(out, 0, axis)


def simulate_nlos(t: CsiTensor, scale: float = 0.5) -> CsiTensor:
    """Halve the temporal resolution (mean of adjacent samples) and interpolate back."""
    factor = int(round(1 / scale))
    if factor < 1 or abs(factor * scale - 1) > 1e-9:
        raise ValueError(f"scale must be 1/k for integer k, got {scale}")
    return t.with_data(spectral_smooth(t.data, factor, axis=1).astype(np.float32))


def augment_sample(t: CsiTensor, policy: AugmentPolicy, rng: np.random.Generator) -> CsiTensor:
    """Apply noise -> scale -> shift -> NLoS, each gated by its probability.

    Per step the generator is consumed as: one uniform gate draw, then the
    step's own draws only when the step fires.
    """
    if t.stage != Stage.instance_normalized:
        raise StageError(f"augment_sample expects an instance-normalized tensor, got {t.stage.value}")
    out = t
    if rng.random() < policy.p_noise:
        out = inject_noise(out, policy.sigma, rng)
    if rng.random() < policy.p_scale:
        out, _ = scale_amplitude(out, rng, policy.scale_lo, policy.scale_hi)
    if rng.random() < policy.p_shift:
        out = time_shift(out, int(rng.integers(-policy.shift_max, policy.shift_max + 1)))
    if rng.random() < policy.p_nlos:
        out = simulate_nlos(out, policy.nlos_scale)
    return out
