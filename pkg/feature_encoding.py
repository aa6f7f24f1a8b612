"""
Feature Encoding Module
Turns raw event streams into bit-level, early-fused interval vectors and
L x D sequence windows.

Every sensor contributes two activity bits per one-minute interval (silent /
low / medium / high against its training percentiles). Numeric sensors add a
jumpy bit (volatility of successive differences above baseline) and a burst bit
(largest absolute step above the typical step size).
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from sensor_model import DataError, HomeSchema, SensorEvent, SensorKind, Trace


INTERVAL_S = 60.0
SEQ_LEN = 5
MIN_CALIBRATION_INTERVALS = 100


@dataclass(frozen=True)
class ChannelStats:
    sensor_id: str
    p25: float
    p75: float
    sigma_delta: Optional[float] = None
    med_delta: Optional[float] = None

    def to_dict(self) -> Dict:
        out = {"p25": self.p25, "p75": self.p75}
        if self.sigma_delta is not None:
            out["sigma_delta"] = self.sigma_delta
            out["med_delta"] = self.med_delta
        return out

    @classmethod
    def from_dict(cls, sensor_id: str, data: Mapping) -> "ChannelStats":
        return cls(
            sensor_id=sensor_id,
            p25=float(data["p25"]),
            p75=float(data["p75"]),
            sigma_delta=None if data.get("sigma_delta") is None else float(data["sigma_delta"]),
            med_delta=None if data.get("med_delta") is None else float(data["med_delta"]),
        )


def stats_to_dict(stats: Mapping[str, ChannelStats]) -> Dict[str, Dict]:
    return {sensor_id: s.to_dict() for sensor_id, s in stats.items()}


def stats_from_dict(data: Mapping[str, Mapping]) -> Dict[str, ChannelStats]:
    return {sensor_id: ChannelStats.from_dict(sensor_id, d) for sensor_id, d in data.items()}


@dataclass(frozen=True, eq=False)
class IntervalVector:
    tau: int
    bits: np.ndarray


@dataclass(frozen=True, eq=False)
class SequenceWindow:
    start_tau: int
    rows: np.ndarray

    @property
    def L(self) -> int:
        return self.rows.shape[0]


def interval_count(trace: Trace) -> int:
    return int(trace.duration // INTERVAL_S)


def nearest_rank(values: Sequence[float], percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    if len(ordered) == 0:
        return 0.0
    rank = max(int(np.ceil(percentile / 100.0 * len(ordered))), 1)
    return float(ordered[rank - 1])


def bin_intervals(trace: Trace, schema: HomeSchema, n_intervals: Optional[int] = None) -> List[Dict[str, np.ndarray]]:
    """
    Group readings per one-minute interval and sensor.

    Returns:
        One dict per interval mapping sensor_id to its readings in time order;
        silent sensors are absent.
    """
    n = interval_count(trace) if n_intervals is None else n_intervals
    grouped: List[Dict[str, np.ndarray]] = [dict() for _ in range(n)]
    if len(trace) == 0 or n == 0:
        return grouped
    times, codes, values = trace.arrays(schema)
    taus = np.floor(times / INTERVAL_S).astype(np.int64)
    keep = taus < n
    keys = taus[keep] * len(schema) + codes[keep]
    values = values[keep]
    order = np.argsort(keys, kind="stable")
    keys, values = keys[order], values[order]
    bounds = np.concatenate(([0], np.flatnonzero(np.diff(keys)) + 1, [len(keys)]))
    ids = schema.sensor_ids
    for start, end in zip(bounds[:-1], bounds[1:]):
        if start == end:
            continue
        tau, code = divmod(int(keys[start]), len(schema))
        grouped[tau][ids[code]] = values[start:end]
    return grouped


def group_events(events: Iterable[SensorEvent]) -> Dict[str, np.ndarray]:
    """Readings of one interval keyed by sensor, in arrival order."""
    grouped: Dict[str, List[float]] = {}
    for event in events:
        grouped.setdefault(event.sensor_id, []).append(event.value)
    return {k: np.asarray(v, dtype=np.float64) for k, v in grouped.items()}


def calibrate_stats(training_trace: Trace, schema: HomeSchema) -> Dict[str, ChannelStats]:
    """
    Per-sensor encoding thresholds from a failure-free training trace.

    Percentiles are taken over intervals where the sensor emitted at least once;
    successive differences are pooled across all training intervals.

    Args:
        training_trace: Clean trace covering at least 100 one-minute intervals
        schema: Sensor inventory

    Returns:
        Map sensor_id -> ChannelStats
    """
    n = interval_count(training_trace)
    if n < MIN_CALIBRATION_INTERVALS:
        raise DataError(f"calibration needs >= {MIN_CALIBRATION_INTERVALS} one-minute intervals, trace has {n}")

    frame = training_trace.frame.copy()
    frame["tau"] = np.floor(frame["timestamp"] / INTERVAL_S).astype(np.int64)
    frame = frame[frame["tau"] < n].copy()
    counts = frame.groupby(["sensor_id", "tau"], sort=False).size()
    frame["delta"] = frame.groupby(["sensor_id", "tau"], sort=False)["value"].diff()

    stats = {}
    for sensor in schema.sensors:
        sid = sensor.sensor_id
        active = counts.xs(sid, level="sensor_id").to_numpy() if sid in counts.index.get_level_values(0) else np.array([])
        if len(active) == 0:
            print(f"⚠ Sensor {sid} is silent in training; any runtime activity will encode as high")
        p25 = nearest_rank(active, 25)
        p75 = nearest_rank(active, 75)
        if sensor.kind is SensorKind.BINARY:
            stats[sid] = ChannelStats(sid, p25, p75)
            continue
        deltas = frame.loc[frame["sensor_id"] == sid, "delta"].dropna().to_numpy()
        if len(deltas) == 0:
            print(f"⚠ Numeric sensor {sid} never has two readings in one interval; dynamics thresholds set to 0")
            stats[sid] = ChannelStats(sid, p25, p75, 0.0, 0.0)
            continue
        stats[sid] = ChannelStats(sid, p25, p75, float(np.std(deltas)), float(np.median(np.abs(deltas))))
    return stats


def activity_bits(m: int, p25: float, p75: float) -> Tuple[int, int]:
    if m == 0:
        return 0, 0
    if m < p25:
        return 0, 1
    if m < p75:
        return 1, 0
    return 1, 1


def encode_interval(
    events_by_sensor: Mapping[str, Sequence[float]],
    stats: Mapping[str, ChannelStats],
    schema: HomeSchema,
    tau: int = 0,
) -> IntervalVector:
    """
    Encode one interval into its D-bit fused vector.

    Args:
        events_by_sensor: Readings of this interval per sensor, in time order
        stats: Calibrated thresholds for every sensor in the schema
        schema: Bit layout
        tau: Interval index recorded on the result

    Returns:
        IntervalVector with bits in {0,1}^D
    """
    bits = np.zeros(schema.D, dtype=np.uint8)
    for sensor in schema.sensors:
        try:
            st = stats[sensor.sensor_id]
        except KeyError:
            raise ValueError(f"no encoding stats for sensor {sensor.sensor_id!r}") from None
        readings = events_by_sensor.get(sensor.sensor_id)
        m = 0 if readings is None else len(readings)
        offset = sensor.bit_offset
        bits[offset], bits[offset + 1] = activity_bits(m, st.p25, st.p75)
        if sensor.kind is SensorKind.NUMERIC and m >= 2:
            deltas = np.diff(np.asarray(readings, dtype=np.float64))
            bits[offset + 2] = np.std(deltas) > (st.sigma_delta or 0.0)
            bits[offset + 3] = np.max(np.abs(deltas)) > (st.med_delta or 0.0)
    return IntervalVector(tau=tau, bits=bits)


def encode_intervals(trace: Trace, stats: Mapping[str, ChannelStats], schema: HomeSchema) -> np.ndarray:
    """(n_intervals, D) uint8 matrix of every interval vector of the trace."""
    grouped = bin_intervals(trace, schema)
    matrix = np.zeros((len(grouped), schema.D), dtype=np.uint8)
    for tau, events in enumerate(grouped):
        matrix[tau] = encode_interval(events, stats, schema, tau).bits
    return matrix


def encode_stream(
    trace: Trace,
    stats: Mapping[str, ChannelStats],
    schema: HomeSchema,
    seq_len: int = SEQ_LEN,
) -> Iterator[SequenceWindow]:
    """Stride-1 windows of seq_len consecutive interval vectors, anchored at t=0."""
    matrix = encode_intervals(trace, stats, schema)
    matrix.setflags(write=False)
    for start in range(len(matrix) - seq_len + 1):
        yield SequenceWindow(start_tau=start, rows=matrix[start:start + seq_len])


def stack_windows(windows: Iterable[SequenceWindow]) -> np.ndarray:
    rows = [w.rows for w in windows]
    if not rows:
        return np.zeros((0, SEQ_LEN, 0), dtype=np.uint8)
    return np.stack(rows)


def _activity_matrix(trace: Trace, sensor_ids: List[str]) -> np.ndarray:
    n = interval_count(trace)
    active = np.zeros((n, len(sensor_ids)), dtype=bool)
    column = {sid: i for i, sid in enumerate(sensor_ids)}
    codes = trace.frame["sensor_id"].map(column)
    hit = codes.notna().to_numpy()
    taus = np.floor(trace.frame["timestamp"].to_numpy()[hit] / INTERVAL_S).astype(np.int64)
    cols = codes[hit].to_numpy(dtype=np.int64)
    inside = taus < n
    active[taus[inside], cols[inside]] = True
    return active


def coactivation_gap(
    trace: Trace,
    correlated_pairs: Sequence[Tuple[str, str]],
    uncorrelated_pairs: Sequence[Tuple[str, str]],
    L_candidate: int,
) -> float:
    """
    Mean joint-activity probability of correlated pairs minus that of
    uncorrelated pairs, over all stride-1 windows of L_candidate intervals.

    A pair coactivates in a window when both sensors emit at least once in it.
    """
    if L_candidate < 1:
        raise ValueError(f"L_candidate must be >= 1, got {L_candidate}")
    if not correlated_pairs or not uncorrelated_pairs:
        raise ValueError("both pair lists must be non-empty")
    sensor_ids = sorted({s for pair in list(correlated_pairs) + list(uncorrelated_pairs) for s in pair})
    active = _activity_matrix(trace, sensor_ids)
    if len(active) < L_candidate:
        raise DataError(f"trace has {len(active)} intervals, fewer than L={L_candidate}")
    cumulative = np.vstack([np.zeros((1, len(sensor_ids)), dtype=np.int64), np.cumsum(active, axis=0)])
    in_window = (cumulative[L_candidate:] - cumulative[:-L_candidate]) > 0
    column = {sid: i for i, sid in enumerate(sensor_ids)}

    def mean_joint(pairs):
        return float(np.mean([np.mean(in_window[:, column[a]] & in_window[:, column[b]]) for a, b in pairs]))

    return mean_joint(correlated_pairs) - mean_joint(uncorrelated_pairs)


def coactivation_sweep(
    trace: Trace,
    correlated_pairs: Sequence[Tuple[str, str]],
    uncorrelated_pairs: Sequence[Tuple[str, str]],
    lengths: Iterable[int] = range(1, 16),
) -> pd.DataFrame:
    """Gap for every candidate window length, as an (L, gap) table."""
    rows = [{"L": L, "gap": coactivation_gap(trace, correlated_pairs, uncorrelated_pairs, L)} for L in lengths]
    return pd.DataFrame(rows, columns=["L", "gap"])


# For testing this module independently
if __name__ == "__main__":
    from synthetic_home import SynthConfig, generate_synthetic_trace, room_pairs

    trace, schema, log = generate_synthetic_trace(SynthConfig(duration_hours=12, seed=3))
    stats = calibrate_stats(trace, schema)
    windows = list(encode_stream(trace, stats, schema))
    print(f"✓ Encoded {len(windows)} windows of shape {windows[0].rows.shape}")
    same, cross = room_pairs(log, schema)
    print(coactivation_sweep(trace, same, cross).to_string(index=False))
