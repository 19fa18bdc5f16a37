"""CSI replay ingestion: binary/CSV replay parsing, antenna permutation, low-pass filtering."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np
from scipy import signal

N_RX = 3
N_SUB = 30
N_STREAMS = N_RX * N_SUB

MAGIC = b"CSIR"
VERSION = 1
HEADER = struct.Struct("<4sHBBI")
FRAME_DTYPE = np.dtype(
    [("timestamp_us", "<u8"), ("perm", "u1", (3,)), ("pad", "u1"), ("amplitude", "<f4", (N_STREAMS,))]
)
FRAME_SIZE = FRAME_DTYPE.itemsize  # 372 bytes


class ReplayFormatError(ValueError):
    pass


class ReplayTruncatedError(ReplayFormatError):
    def __init__(self, offset: int, msg: str | None = None):
        self.offset = offset
        super().__init__(msg or f"truncated frame record at byte offset {offset}")


def _check_perm(perm) -> tuple[int, int, int]:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != [0, 1, 2]:
        raise ValueError(f"perm {perm} is not a permutation of (0, 1, 2)")
    return perm


@dataclass(frozen=True)
class CsiFrame:
    """One received packet: 3x30 linear amplitudes plus its PERM array."""

    timestamp_us: int
    perm: tuple[int, int, int]
    amplitude: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "perm", _check_perm(self.perm))
        amp = np.array(self.amplitude, dtype=np.float32).reshape(N_RX, N_SUB)
        if not np.all(np.isfinite(amp)) or np.any(amp < 0):
            raise ValueError("amplitude must be finite and nonnegative")
        amp.flags.writeable = False
        object.__setattr__(self, "amplitude", amp)


@dataclass(frozen=True)
class ReplayHeader:
    magic: bytes = MAGIC
    version: int = VERSION
    n_rx: int = N_RX
    n_sub: int = N_SUB
    nominal_rate_hz: int = 1000

    def pack(self) -> bytes:
        return HEADER.pack(self.magic, self.version, self.n_rx, self.n_sub, self.nominal_rate_hz)

    @classmethod
    def unpack(cls, raw: bytes) -> "ReplayHeader":
        if len(raw) < HEADER.size:
            raise ReplayFormatError(f"header too short ({len(raw)} bytes)")
        magic, version, n_rx, n_sub, rate = HEADER.unpack(raw[: HEADER.size])
        if magic != MAGIC:
            raise ReplayFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ReplayFormatError(f"unsupported replay version {version}")
        if (n_rx, n_sub) != (N_RX, N_SUB):
            raise ReplayFormatError(f"unsupported layout n_rx={n_rx} n_sub={n_sub}")
        return cls(magic, version, n_rx, n_sub, rate)


def apply_perm(frame: CsiFrame) -> CsiFrame:
    """Reorder antenna rows so row i holds physical antenna perm[i]; result has identity perm."""
    perm = _check_perm(frame.perm)
    if perm == (0, 1, 2):
        return frame
    return CsiFrame(frame.timestamp_us, (0, 1, 2), frame.amplitude[list(perm)])


def invert_perm(perm) -> tuple[int, int, int]:
    perm = _check_perm(perm)
    inv = [0, 0, 0]
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


def iter_frames(fh: BinaryIO, chunk_frames: int = 1024) -> Iterator[CsiFrame]:
    """Parse a binary replay stream (file or socket) frame by frame."""
    ReplayHeader.unpack(_read_exact(fh, HEADER.size))
    offset = HEADER.size
    while True:
        buf = _read_exact(fh, FRAME_SIZE * chunk_frames)
        if not buf:
            return
        n_full, rest = divmod(len(buf), FRAME_SIZE)
        records = np.frombuffer(buf[: n_full * FRAME_SIZE], dtype=FRAME_DTYPE)
        for rec in records:
            yield CsiFrame(int(rec["timestamp_us"]), tuple(rec["perm"]), rec["amplitude"])
        if rest:
            raise ReplayTruncatedError(offset + n_full * FRAME_SIZE)
        offset += len(buf)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    # sockets may return short reads; loop until n bytes or EOF
    parts = []
    got = 0
    while got < n:
        chunk = fh.read(n - got)
        if not chunk:
            break
        parts.append(chunk)
        got += len(chunk)
    return b"".join(parts)


def _iter_csv(path: Path) -> Iterator[CsiFrame]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            if len(cells) != 4 + N_STREAMS:
                raise ReplayFormatError(f"{path}:{lineno}: expected {4 + N_STREAMS} fields, got {len(cells)}")
            yield CsiFrame(int(cells[0]), tuple(int(c) for c in cells[1:4]), [float(c) for c in cells[4:]])


def read_replay(path) -> Iterator[CsiFrame]:
    """Yield frames from a binary (``CSIR``) or CSV replay file in file order."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        yield from _iter_csv(path)
        return
    with open(path, "rb") as fh:
        yield from iter_frames(fh)


def _pack_frame(frame: CsiFrame) -> bytes:
    rec = np.zeros(1, dtype=FRAME_DTYPE)
    rec["timestamp_us"] = frame.timestamp_us
    rec["perm"] = frame.perm
    rec["amplitude"] = frame.amplitude.reshape(-1)
    return rec.tobytes()


def write_replay(path, frames: Iterable[CsiFrame], rate_hz: int = 1000) -> int:
    """Write frames in the binary replay format. Returns the number of frames written."""
    n = 0
    with open(path, "wb") as fh:
        fh.write(ReplayHeader(nominal_rate_hz=rate_hz).pack())
        for frame in frames:
            fh.write(_pack_frame(frame))
            n += 1
    return n


def write_replay_csv(path, frames: Iterable[CsiFrame]) -> None:
    with open(path, "w") as fh:
        for f in frames:
            vals = ",".join(repr(float(v)) for v in f.amplitude.reshape(-1))
            fh.write(f"{f.timestamp_us},{f.perm[0]},{f.perm[1]},{f.perm[2]},{vals}\n")


def encode_frames(frames: Iterable[CsiFrame], rate_hz: int = 1000) -> bytes:
    """Binary replay bytes for in-memory or socket use."""
    return ReplayHeader(nominal_rate_hz=rate_hz).pack() + b"".join(_pack_frame(f) for f in frames)


def butterworth_lowpass(series, order: int = 4, cutoff_hz: float = 50.0, rate_hz: float = 1000.0,
                        causal: bool = True) -> np.ndarray:
    """Butterworth low-pass along axis 0.

    Accepts a 1-D series or a (T, streams) window; every column is filtered
    independently. The causal path starts from the steady state of the first
    sample so a constant input passes through unchanged. ``causal=False``
    runs the zero-phase forward-backward filter instead.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    nyquist = rate_hz / 2.0
    if not 0 < cutoff_hz < nyquist:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz")
    x = np.asarray(series, dtype=np.float64)
    sos = signal.butter(order, cutoff_hz, btype="low", fs=rate_hz, output="sos")
    if x.shape[0] < 3 * order:
        raise ValueError(f"series length {x.shape[0]} shorter than filter warm-up {3 * order}")
    if not causal:
        return signal.sosfiltfilt(sos, x, axis=0)
    zi = signal.sosfilt_zi(sos)  # (n_sections, 2)
    zi = zi.reshape(zi.shape + (1,) * (x.ndim - 1)) * x[0]
    y, _ = signal.sosfilt(sos, x, axis=0, zi=zi)
    return y
