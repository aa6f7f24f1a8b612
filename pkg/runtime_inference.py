"""
Runtime Inference Module
Streaming failure detection: per-sensor reconstruction residuals, EWMA
smoothing, threshold verdicts and isolate-and-continue masking.

Calibration and runtime share window_residuals, so a window seen during
calibration produces bit-identical residuals when it is replayed.
"""

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from feature_encoding import INTERVAL_S, SEQ_LEN, ChannelStats, SequenceWindow, bin_intervals, encode_interval
from masked_encoder import PROB_CLAMP, MaskSet, ModelParams, apply_mask, forward, sigmoid
from sensor_model import DataError, HomeSchema, Trace


VERDICT_COLUMNS = ["segment_id", "sensor_id", "flag_interval", "flag_time_s", "r_hat", "theta"]


@dataclass
class Baselines:
    theta: Dict[str, float]

    def to_dict(self) -> Dict[str, float]:
        return dict(self.theta)

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "Baselines":
        theta = {k: float(v) for k, v in data.items()}
        negative = [k for k, v in theta.items() if not v >= 0]
        if negative:
            raise DataError(f"baselines must be >= 0, got invalid values for {negative}")
        return cls(theta)


@dataclass
class ResidualState:
    alpha: float
    r_hat: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    def initialized(self, sensor_id: str) -> bool:
        return sensor_id in self.r_hat


@dataclass
class IsolationSet:
    flagged: List[Tuple[str, int]] = field(default_factory=list)

    def __contains__(self, sensor_id: str) -> bool:
        return any(s == sensor_id for s, _ in self.flagged)

    def __len__(self) -> int:
        return len(self.flagged)

    @property
    def sensor_ids(self) -> List[str]:
        return [s for s, _ in self.flagged]

    def add(self, sensor_id: str, tau: int) -> None:
        if sensor_id in self:
            raise ValueError(f"sensor {sensor_id} is already isolated")
        self.flagged.append((sensor_id, tau))


@dataclass(frozen=True)
class Verdict:
    sensor_id: str
    tau: int
    r_hat: float
    theta: float
    flag_time_s: float


def interval_close_time(tau: int) -> float:
    """Stream time at which interval tau closes."""
    return (tau + 1) * INTERVAL_S


@dataclass
class VerdictLog:
    segment_id: str
    verdicts: List[Verdict]
    isolation: IsolationSet
    n_intervals: int
    step_seconds: List[float] = field(default_factory=list, repr=False)

    @property
    def mean_step_ms(self) -> Optional[float]:
        return float(np.mean(self.step_seconds)) * 1e3 if self.step_seconds else None

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "segment_id": self.segment_id,
                "sensor_id": v.sensor_id,
                "flag_interval": v.tau,
                "flag_time_s": v.flag_time_s,
                "r_hat": v.r_hat,
                "theta": v.theta,
            }
            for v in self.verdicts
        ]
        return pd.DataFrame(rows, columns=VERDICT_COLUMNS)


def per_sensor_residuals(logits: np.ndarray, bits: np.ndarray, schema: HomeSchema) -> np.ndarray:
    """
    Mean clamped binary cross-entropy over each sensor's bit range and all rows.

    Args:
        logits: (L, D) or (B, L, D)
        bits: Observed window bits, same shape

    Returns:
        (S,) or (B, S) residuals in schema order
    """
    p = np.clip(sigmoid(np.asarray(logits, dtype=np.float64)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(bits, dtype=np.float64)
    bce = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    L = bce.shape[-2]
    column_sums = bce.sum(axis=-2)
    sums = np.add.reduceat(column_sums, schema.bit_offsets, axis=-1)
    return sums / (L * schema.bit_widths)


def sensor_residual(logits: np.ndarray, window: Union[SequenceWindow, np.ndarray], sensor_id: str, schema: HomeSchema) -> float:
    rows = window.rows if isinstance(window, SequenceWindow) else window
    return float(per_sensor_residuals(logits, rows, schema)[schema.index_of(sensor_id)])


def ewma_alpha_from_halflife(L: int) -> float:
    """Smoothing factor whose weights halve every L steps."""
    if L < 1:
        raise ValueError(f"half-life must be >= 1, got {L}")
    return 1.0 - 2.0 ** (-1.0 / L)


def ewma_update(state: ResidualState, sensor_id: str, r: float) -> ResidualState:
    """First observation initializes r_hat = r; afterwards r_hat <- alpha*r + (1-alpha)*r_hat."""
    if not np.isfinite(r):
        raise ValueError(f"residual for {sensor_id} is not finite: {r}")
    if sensor_id not in state.r_hat:
        state.r_hat[sensor_id] = float(r)
        return state
    prev = state.r_hat[sensor_id]
    mixed = state.alpha * r + (1.0 - state.alpha) * prev
    # rounding may step outside the convex hull of (r, prev)
    state.r_hat[sensor_id] = float(min(max(mixed, min(r, prev)), max(r, prev)))
    return state


def window_residuals(
    params: ModelParams,
    window: Union[SequenceWindow, np.ndarray],
    schema: HomeSchema,
    isolated: Sequence[str] = (),
) -> np.ndarray:
    """
    Unsmoothed residual of every sensor for one window, with isolated sensors
    masked exactly as during training. Isolated sensors get NaN.
    """
    rows = window.rows if isinstance(window, SequenceWindow) else np.asarray(window)
    masked = apply_mask(rows, MaskSet(tuple(isolated)), params, schema)
    logits, _ = forward(params, masked[None])
    residuals = per_sensor_residuals(logits[0], rows, schema)
    for sensor_id in isolated:
        residuals[schema.index_of(sensor_id)] = np.nan
    return residuals


def calibrate_baselines(
    params: ModelParams,
    clean_validation_windows: Iterable[Union[SequenceWindow, np.ndarray]],
    schema: HomeSchema,
) -> Baselines:
    """theta_k = max over clean validation windows of the unsmoothed residual."""
    theta = None
    for window in clean_validation_windows:
        r = window_residuals(params, window, schema)
        theta = r if theta is None else np.maximum(theta, r)
    if theta is None:
        raise DataError("cannot calibrate baselines on an empty validation stream")
    return Baselines({sensor_id: float(t) for sensor_id, t in zip(schema.sensor_ids, theta)})


class StreamingDetector:
    """
    One stream's detection loop: buffers interval vectors, scores every full
    window and isolates sensors whose smoothed residual exceeds baseline.
    """

    def __init__(
        self,
        params: ModelParams,
        stats: Mapping[str, ChannelStats],
        baselines: Baselines,
        schema: HomeSchema,
        seq_len: int = SEQ_LEN,
    ):
        missing = [s for s in schema.sensor_ids if s not in baselines.theta]
        if missing:
            raise DataError(f"baselines missing for sensors {missing}")
        self.params = params
        self.stats = stats
        self.baselines = baselines
        self.schema = schema
        self.seq_len = seq_len
        self.state = ResidualState(ewma_alpha_from_halflife(seq_len))
        self.isolation = IsolationSet()
        self.buffer: Deque[np.ndarray] = deque(maxlen=seq_len)
        self.tau = -1

    def step(self, new_interval_events: Mapping[str, Sequence[float]]) -> List[Verdict]:
        """Consume one interval's readings (sensor_id -> values in time order)."""
        vector = encode_interval(new_interval_events, self.stats, self.schema, self.tau + 1)
        return self.step_encoded(vector.bits)

    def step_encoded(self, bits: np.ndarray) -> List[Verdict]:
        self.tau += 1
        self.buffer.append(np.asarray(bits))
        if len(self.buffer) < self.seq_len:
            return []
        window = np.stack(self.buffer)
        residuals = window_residuals(self.params, window, self.schema, self.isolation.sensor_ids)
        verdicts = []
        for position, sensor_id in enumerate(self.schema.sensor_ids):
            if sensor_id in self.isolation:
                continue
            ewma_update(self.state, sensor_id, float(residuals[position]))
            r_hat = self.state.r_hat[sensor_id]
            theta = self.baselines.theta[sensor_id]
            if r_hat > theta:
                verdicts.append(Verdict(sensor_id, self.tau, r_hat, theta, interval_close_time(self.tau)))
        for verdict in verdicts:
            self.isolation.add(verdict.sensor_id, verdict.tau)
        return verdicts


def run_stream(
    params: ModelParams,
    stats: Mapping[str, ChannelStats],
    baselines: Baselines,
    trace: Trace,
    schema: HomeSchema,
    segment_id: str = "",
) -> VerdictLog:
    """
    Drive a fresh StreamingDetector over every interval of a trace.

    Returns:
        VerdictLog with verdicts in stream order, the final isolation set and
        the wall-clock time of every step
    """
    detector = StreamingDetector(params, stats, baselines, schema)
    grouped = bin_intervals(trace, schema)
    verdicts: List[Verdict] = []
    step_seconds: List[float] = []
    for events in grouped:
        started = time.perf_counter()
        verdicts.extend(detector.step(events))
        step_seconds.append(time.perf_counter() - started)
    return VerdictLog(segment_id, verdicts, detector.isolation, len(grouped), step_seconds)


# For testing this module independently
if __name__ == "__main__":
    print(f"✓ EWMA alpha for L={SEQ_LEN}: {ewma_alpha_from_halflife(SEQ_LEN):.5f}")
