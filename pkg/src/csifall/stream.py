"""Real-time inference: ring buffer, per-window preprocessing, model call, alert smoothing."""

from __future__ import annotations

import collections
import enum
import json
import threading
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .ingest import N_STREAMS, CsiFrame, apply_perm
from .model import FallDetector, model_forward
from .preprocess import CsiTensor, CsiWindow, channel_standardize, preprocess_window


class SmootherConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    threshold: float = Field(0.5, gt=0, lt=1)
    history_size: int = Field(3, ge=1)
    strict: bool = False  # Alert only once the run exceeds history_size
    window: int = 5000
    step: int = 500
    queue_size: int = Field(4, ge=1)
    lowpass: bool = True
    causal: bool = True
    cutoff_hz: float = 50.0
    order: int = 4
    rate_hz: float = 1000.0


class RingBuffer:
    """Fixed-capacity frame buffer that releases a window every ``step`` frames once full."""

    def __init__(self, capacity: int = 5000, step: int = 500):
        if not 1 <= step <= capacity:
            raise ValueError(f"step must be in [1, {capacity}], got {step}")
        self.capacity = capacity
        self.step = step
        self._data = np.zeros((capacity, N_STREAMS), dtype=np.float32)
        self._stamps = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0  # next write slot
        self.fill = 0
        self.total = 0

    def push(self, frame: CsiFrame) -> CsiWindow | None:
        self._data[self.cursor] = frame.amplitude.reshape(-1)
        self._stamps[self.cursor] = frame.timestamp_us
        self.cursor = (self.cursor + 1) % self.capacity
        self.fill = min(self.fill + 1, self.capacity)
        self.total += 1
        if self.total >= self.capacity and (self.total - self.capacity) % self.step == 0:
            # oldest frame sits at the cursor once the buffer is full
            order = np.roll(np.arange(self.capacity), -self.cursor)
            return CsiWindow(self._data[order], int(self._stamps[order[0]]))
        return None

    def last_timestamp(self) -> int:
        return int(self._stamps[(self.cursor - 1) % self.capacity])


def push_frame(buf: RingBuffer, frame: CsiFrame) -> CsiWindow | None:
    return buf.push(frame)


class AlertLevel(str, enum.Enum):
    Normal = "Normal"
    Wait = "Wait"
    Alert = "Alert"


@dataclass(frozen=True)
class AlertState:
    state: AlertLevel = AlertLevel.Normal
    consecutive_count: int = 0


def alert_level(count: int, history_size: int, strict: bool = False) -> AlertLevel:
    if count == 0:
        return AlertLevel.Normal
    if count > history_size or (count == history_size and not strict):
        return AlertLevel.Alert
    return AlertLevel.Wait


def update_alert(state: AlertState, p_fall: float, cfg: SmootherConfig) -> AlertState:
    count = state.consecutive_count + 1 if p_fall > cfg.threshold else 0
    return AlertState(alert_level(count, cfg.history_size, cfg.strict), count)


@dataclass
class LiveRecord:
    window_id: int
    t_end_us: int
    p_fall: float
    state: str
    latency_ms: float
    drops: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def live_preprocess(window: CsiWindow, cfg: SmootherConfig) -> CsiTensor:
    t = preprocess_window(window, lowpass=cfg.lowpass, causal=cfg.causal, cutoff_hz=cfg.cutoff_hz,
                          order=cfg.order, rate_hz=cfg.rate_hz)
    return channel_standardize(t)


@dataclass
class _Pending:
    window_id: int
    window: CsiWindow
    t_end_us: int
    emitted_at: float


def _windows(source: Iterable[CsiFrame], cfg: SmootherConfig) -> Iterator[_Pending]:
    buf = RingBuffer(cfg.window, cfg.step)
    wid = 0
    for frame in source:
        w = buf.push(apply_perm(frame))
        if w is not None:
            yield _Pending(wid, w, buf.last_timestamp(), time.perf_counter())
            wid += 1


class LiveRunner:
    """Producer/consumer live loop.

    ``threaded=False`` processes every window inline (deterministic, no drops).
    ``threaded=True`` reads frames on a producer thread into a bounded queue that
    drops the oldest pending window when inference falls behind.
    """

    def __init__(self, model: FallDetector, cfg: SmootherConfig | None = None):
        self.model = model.eval()
        self.cfg = cfg or SmootherConfig()
        self.state = AlertState()
        self.drops = 0

    def _infer(self, item: _Pending) -> LiveRecord:
        x = live_preprocess(item.window, self.cfg)
        probs, _ = model_forward(x, self.model)
        self.state = update_alert(self.state, probs.p_fall, self.cfg)
        latency = (time.perf_counter() - item.emitted_at) * 1e3
        return LiveRecord(item.window_id, item.t_end_us, probs.p_fall, self.state.state.value, latency, self.drops)

    def run(self, source: Iterable[CsiFrame], threaded: bool = False) -> Iterator[LiveRecord]:
        if not threaded:
            for item in _windows(source, self.cfg):
                yield self._infer(item)
            return
        queue: collections.deque[_Pending] = collections.deque()
        cond = threading.Condition()
        done = threading.Event()
        error: list[BaseException] = []

        def produce():
            try:
                for item in _windows(source, self.cfg):
                    with cond:
                        if len(queue) >= self.cfg.queue_size:
                            queue.popleft()
                            self.drops += 1
                        queue.append(item)
                        cond.notify()
            except BaseException as exc:  # surfaced on the consumer side
                error.append(exc)
            finally:
                with cond:
                    done.set()
                    cond.notify()

        producer = threading.Thread(target=produce, name="csi-producer", daemon=True)
        producer.start()
        while True:
            with cond:
                while not queue and not done.is_set():
                    cond.wait()
                if not queue:
                    break
                item = queue.popleft()
            yield self._infer(item)
        producer.join()
        if error:
            raise error[0]


def run_live(source: Iterable[CsiFrame], model: FallDetector, cfg: SmootherConfig | None = None,
             threaded: bool = False) -> Iterator[LiveRecord]:
    return LiveRunner(model, cfg).run(source, threaded)
