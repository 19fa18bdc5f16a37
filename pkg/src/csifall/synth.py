"""Synthetic CSI generator: static per-room multipath background plus motion envelopes.

The model is envelope based. Each activity contributes a band-limited random
fluctuation whose strength follows a kind-specific time envelope, scaled by a
smooth per-subcarrier sensitivity profile and added on top of a background
that is constant in time. The background is specific to the environment, with
a per-recording perturbation (furniture moved, slightly different placement).
Falls also leave a posture step: the body ends up somewhere else, so the
static level after the burst differs from the level before it. NLoS
environments attenuate and temporally smooth the dynamic part.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import signal

from .augment import spectral_smooth
from .ingest import N_RX, N_STREAMS, N_SUB, CsiFrame, invert_perm
from .preprocess import CsiWindow, DatasetIndex, SampleRecord, preprocess_window, save_tensor


class EventKind(str, enum.Enum):
    fall_front = "fall_front"
    fall_back = "fall_back"
    fall_left = "fall_left"
    fall_right = "fall_right"
    sit = "sit"
    stand = "stand"
    walk = "walk"
    pick = "pick"
    wave = "wave"
    still = "still"

    @property
    def is_fall(self) -> bool:
        return self.value.startswith("fall_")

    @property
    def label(self) -> str:
        return "fall" if self.is_fall else "nonfall"


FALL_KINDS = [k for k in EventKind if k.is_fall]
NONFALL_KINDS = [k for k in EventKind if not k.is_fall]


class EnvSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    env_id: str
    background_seed: int
    nlos: bool = False


def _balanced_counts(falls: int, nonfalls: int) -> dict:
    counts = {}
    for kinds, total in ((FALL_KINDS, falls), (NONFALL_KINDS, nonfalls)):
        q, r = divmod(total, len(kinds))
        for i, k in enumerate(kinds):
            counts[k] = q + (1 if i < r else 0)
    return counts


def _default_envs(n: int = 4, nlos=(3,), seed: int = 0) -> list[EnvSpec]:
    return [EnvSpec(env_id=chr(ord("A") + i), background_seed=1000 + 7919 * i + seed, nlos=i in nlos)
            for i in range(n)]


class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    environments: list[EnvSpec] = Field(default_factory=_default_envs)
    counts: dict[EventKind, int] = Field(default_factory=lambda: _balanced_counts(40, 40))
    rate_hz: int = 1000
    window: int = 5000
    seed: int = 0
    noise_std: float = Field(0.05, ge=0)
    background_scale: float = Field(1.0, gt=0)
    background_drift: float = Field(1.5, ge=0)
    fall_amplitude: float = 3.0
    nlos_attenuation: float = Field(0.6, gt=0, le=1)
    nlos_smoothing: int = Field(16, ge=1)
    lowpass: bool = False

    @model_validator(mode="after")
    def _check(self):
        if any(c < 0 for c in self.counts.values()):
            raise ValueError("event counts must be >= 0")
        ids = [e.env_id for e in self.environments]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate environment ids in {ids}")
        return self

    @property
    def n_environments(self) -> int:
        return len(self.environments)

    @classmethod
    def balanced(cls, n_environments: int = 4, falls: int = 40, nonfalls: int = 40,
                 nlos: tuple[int, ...] = (3,), seed: int = 0, **kw) -> "SynthSpec":
        """Spread ``falls`` / ``nonfalls`` per environment as evenly as possible over the kinds."""
        return cls(environments=_default_envs(n_environments, nlos, seed),
                   counts=_balanced_counts(falls, nonfalls), seed=seed, **kw)


@dataclass(frozen=True)
class Environment:
    env_id: str
    background: np.ndarray  # (3, 30) static amplitude per antenna/subcarrier
    sensitivity: np.ndarray  # (3, 30) motion sensitivity profile
    nlos: bool
    noise_std: float
    attenuation: float
    smoothing: int
    drift: float = 0.0  # per-recording background perturbation scale


def _smooth_profile(rng, n_terms: int = 3) -> np.ndarray:
    s = np.arange(N_SUB)
    prof = np.zeros((N_RX, N_SUB))
    for a in range(N_RX):
        for k in range(1, n_terms + 1):
            prof[a] += rng.normal() * np.cos(2 * np.pi * k * s / N_SUB + rng.uniform(0, 2 * np.pi)) / k
    return prof


def make_environment(env: EnvSpec, spec: SynthSpec | None = None) -> Environment:
    spec = spec or SynthSpec()
    rng = np.random.default_rng(env.background_seed)
    base = rng.uniform(9.0, 13.0, size=(N_RX, 1))
    # every room gets the same multipath depth; only where the peaks and nulls fall differs
    profile = _smooth_profile(rng)
    profile /= profile.std(axis=1, keepdims=True)
    background = spec.background_scale * (base + 2.0 * profile)
    sensitivity = 1.0 + 0.4 * np.tanh(_smooth_profile(rng))
    return Environment(env.env_id, background, sensitivity, env.nlos, spec.noise_std,
                       spec.nlos_attenuation if env.nlos else 1.0, spec.nlos_smoothing if env.nlos else 1,
                       spec.background_drift * spec.background_scale)


def _bandlimited(rng, n: int, cutoff_hz: float, rate_hz: float, columns: int = N_STREAMS) -> np.ndarray:
    white = rng.normal(size=(n + 200, columns))
    sos = signal.butter(2, cutoff_hz, fs=rate_hz, output="sos")
    y = signal.sosfilt(sos, white, axis=0)[200:]
    return y / y.std(axis=0, keepdims=True)


def _ramp(t, start, stop, edge=0.05):
    """Raised-cosine plateau that is 1 on [start, stop]."""
    up = np.clip((t - start + edge) / edge, 0, 1)
    down = np.clip((stop + edge - t) / edge, 0, 1)
    return 0.5 - 0.5 * np.cos(np.pi * np.minimum(up, down))


def _envelope(kind: EventKind, t: np.ndarray, rng, fall_amp: float, onset: float | None = None):
    """Return (envelope (n,), band cutoff Hz, burst interval or None, subcarrier mask (3, 30) or None,
    posture shift (n,)).

    The posture shift scales a static change of the multipath profile once the body has settled
    somewhere new: abrupt and large after a fall, gradual and small after sitting or standing.
    """
    dur = t[-1] + (t[1] - t[0])
    jitter = rng.uniform(0.8, 1.2)
    if kind.is_fall:
        burst = rng.uniform(0.3, 0.5)
        t0 = rng.uniform(1.2, dur - 1.0 - burst) if onset is None else onset
        pre = rng.uniform(0.5, 1.0)
        env = 0.08 * fall_amp * _ramp(t, t0 - pre, t0) + fall_amp * jitter * _ramp(t, t0, t0 + burst, 0.03)
        settle = 0.8 * fall_amp * jitter * _ramp(t, t0 + burst, t[-1] + 1.0, burst)
        return env, 25.0, (t0, t0 + burst), None, settle
    if kind in (EventKind.sit, EventKind.stand):
        d = rng.uniform(1.0, 1.6)
        t0 = rng.uniform(0.5, dur - 0.5 - d) if onset is None else onset
        env = 1.1 * jitter * _ramp(t, t0, t0 + d, 0.2)
        if kind is EventKind.stand:
            env = env + 0.05 * (t > t0 + d)
        return env, 6.0, (t0, t0 + d), None, 0.1 * _ramp(t, t0 + d, t[-1] + 1.0, d)
    if kind is EventKind.pick:
        d = rng.uniform(0.8, 1.2)
        t0 = rng.uniform(0.5, dur - 0.6 - 2 * d) if onset is None else onset
        env = 0.9 * jitter * (_ramp(t, t0, t0 + d, 0.2) + _ramp(t, t0 + d + 0.1, t0 + 2 * d + 0.1, 0.2))
        return env, 5.0, (t0, t0 + 2 * d + 0.1), None, np.zeros_like(t)
    if kind is EventKind.walk:
        f = rng.uniform(1.5, 2.2)
        env = 0.8 * jitter * (0.6 + 0.4 * np.abs(np.sin(2 * np.pi * f * t + rng.uniform(0, np.pi))))
        return env, 8.0, None, None, np.zeros_like(t)
    if kind is EventKind.wave:
        f = rng.uniform(1.0, 2.0)
        env = 1.0 * jitter * (0.5 + 0.5 * np.abs(np.sin(2 * np.pi * f * t)))
        mask = np.zeros((N_RX, N_SUB))
        width = int(rng.integers(6, 11))
        start = int(rng.integers(0, N_SUB - width + 1))
        mask[:, start:start + width] = 1.0
        return env, 4.0, None, mask, np.zeros_like(t)
    return np.zeros_like(t), 5.0, None, None, np.zeros_like(t)


def render(kind: EventKind, env: Environment, rng: np.random.Generator, n: int = 5000, rate_hz: int = 1000,
           fall_amplitude: float = 3.0, onset: float | None = None):
    """Raw (n, 90) amplitude matrix for one activity plus the burst interval in seconds."""
    kind = EventKind(kind)
    t = np.arange(n) / rate_hz
    envelope, cutoff, burst, sub_mask, settle = _envelope(kind, t, rng, fall_amplitude, onset)
    motion = _bandlimited(rng, n, cutoff, rate_hz).reshape(n, N_RX, N_SUB)
    gain = env.sensitivity if sub_mask is None else env.sensitivity * sub_mask
    dynamic = envelope[:, None, None] * gain[None] * motion
    if settle.any():
        pattern = np.tanh(_smooth_profile(rng))
        dynamic = dynamic + settle[:, None, None] * (env.sensitivity * pattern)[None]
    # subject-to-link distance varies per recording; log-uniform gain in [1/sqrt(2), sqrt(2)]
    dynamic = dynamic * np.exp(rng.uniform(-0.5, 0.5) * np.log(2.0))
    if env.nlos:
        dynamic = env.attenuation * spectral_smooth(dynamic, env.smoothing, axis=0)
    noise = rng.normal(0.0, env.noise_std, size=dynamic.shape)
    # the static profile shifts a little between sessions (furniture, doors, people nearby)
    background = env.background + env.drift * (_smooth_profile(rng) + rng.normal(size=(N_RX, 1)))
    raw = background[None] + dynamic + noise
    return np.maximum(raw, 0.0).reshape(n, N_STREAMS).astype(np.float32), burst


def generate_event(kind: EventKind, env: Environment, rng: np.random.Generator, spec: SynthSpec | None = None):
    """One 5 s window and its label."""
    spec = spec or SynthSpec()
    raw, _ = render(kind, env, rng, spec.window, spec.rate_hz, spec.fall_amplitude)
    return CsiWindow(raw, 0), EventKind(kind).label


def generate_recording(kind: EventKind, env: Environment, rng: np.random.Generator, duration_s: float = 12.0,
                       onset_s: float = 6.0, spec: SynthSpec | None = None, scramble_perm: bool = True):
    """A continuous frame list with one event at ``onset_s``; antenna rows stored under random PERMs.

    Returns (frames, burst interval in seconds or None).
    """
    spec = spec or SynthSpec()
    n = int(round(duration_s * spec.rate_hz))
    raw, burst = render(kind, env, rng, n, spec.rate_hz, spec.fall_amplitude, onset=onset_s)
    raw = raw.reshape(n, N_RX, N_SUB)
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    frames = []
    for i in range(n):
        perm = perms[int(rng.integers(len(perms)))] if scramble_perm else (0, 1, 2)
        # stored row j holds logical antenna inv[j], so apply_perm restores the logical order
        stored = raw[i][list(invert_perm(perm))]
        frames.append(CsiFrame(i * 1_000_000 // spec.rate_hz, perm, stored))
    return frames, burst


def generate_dataset(spec: SynthSpec, out_dir) -> DatasetIndex:
    """Render, preprocess and archive every sample; writes ``index.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    environments = {}
    for e_i, env_spec in enumerate(spec.environments):
        env = make_environment(env_spec, spec)
        environments[env_spec.env_id] = {"nlos": env_spec.nlos, "background_seed": env_spec.background_seed}
        n = 0
        for kind in EventKind:
            for _ in range(spec.counts.get(kind, 0)):
                rng = np.random.default_rng([spec.seed, e_i, n])
                window, label = generate_event(kind, env, rng, spec)
                tensor = preprocess_window(window, lowpass=spec.lowpass, rate_hz=spec.rate_hz)
                sample_id = f"{env_spec.env_id}-{n:04d}"
                rel = f"samples/{sample_id}.f32"
                try:
                    save_tensor(out_dir / rel, tensor.data)
                except OSError as exc:
                    raise OSError(f"failed to write sample {out_dir / rel}: {exc}") from exc
                records.append(SampleRecord(sample_id, rel, label, env_spec.env_id))
                n += 1
    index = DatasetIndex(records, out_dir, environments)
    index.save(out_dir / "index.json")
    return index
