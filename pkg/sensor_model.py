"""
Sensor Model Module
Sensor inventory, event stream types and CASAS-style trace parsing.

A home is described by a HomeSchema: an ordered list of sensors, each owning a
contiguous range of bits in the early-fused interval vector (two bits for a
binary sensor, four for a numeric one). A Trace is the timestamped event stream
every other module reads.
"""

from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd


BINARY_WIDTH = 2
NUMERIC_WIDTH = 4

ON_TOKENS = {"ON", "OPEN", "PRESENT"}
OFF_TOKENS = {"OFF", "CLOSE", "CLOSED", "ABSENT"}

TRACE_COLUMNS = ["timestamp", "sensor_id", "value"]


class DataError(ValueError):
    """Root of every problem caused by input data rather than by the caller."""


class TraceParseError(DataError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class UnknownSensorError(DataError):
    pass


class SensorKind(str, Enum):
    BINARY = "binary"
    NUMERIC = "numeric"

    @property
    def bit_width(self) -> int:
        return BINARY_WIDTH if self is SensorKind.BINARY else NUMERIC_WIDTH


@dataclass(frozen=True)
class SensorSchema:
    sensor_id: str
    kind: SensorKind
    bit_offset: int
    bit_width: int

    def __post_init__(self):
        if self.bit_width != self.kind.bit_width:
            raise ValueError(
                f"sensor {self.sensor_id}: {self.kind.value} sensors use {self.kind.bit_width} bits, got {self.bit_width}"
            )

    @property
    def bits(self) -> slice:
        return slice(self.bit_offset, self.bit_offset + self.bit_width)


@dataclass(frozen=True)
class HomeSchema:
    """Ordered sensor inventory and the bit layout of the fused feature vector."""

    sensors: Tuple[SensorSchema, ...] = ()
    _index: Dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        cursor = 0
        for position, sensor in enumerate(self.sensors):
            if sensor.sensor_id in index:
                raise DataError(f"duplicate sensor id {sensor.sensor_id!r}")
            if sensor.bit_offset != cursor:
                raise DataError(
                    f"bit range of {sensor.sensor_id} starts at {sensor.bit_offset}, expected {cursor} (ranges must tile [0, D))"
                )
            index[sensor.sensor_id] = position
            cursor += sensor.bit_width
        object.__setattr__(self, "_index", index)

    @property
    def D(self) -> int:
        if not self.sensors:
            return 0
        last = self.sensors[-1]
        return last.bit_offset + last.bit_width

    @property
    def sensor_ids(self) -> List[str]:
        return [s.sensor_id for s in self.sensors]

    @property
    def binary_ids(self) -> List[str]:
        return [s.sensor_id for s in self.sensors if s.kind is SensorKind.BINARY]

    @property
    def numeric_ids(self) -> List[str]:
        return [s.sensor_id for s in self.sensors if s.kind is SensorKind.NUMERIC]

    @property
    def bit_offsets(self) -> np.ndarray:
        return np.array([s.bit_offset for s in self.sensors], dtype=np.int64)

    @property
    def bit_widths(self) -> np.ndarray:
        return np.array([s.bit_width for s in self.sensors], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.sensors)

    def __contains__(self, sensor_id: str) -> bool:
        return sensor_id in self._index

    def index_of(self, sensor_id: str) -> int:
        try:
            return self._index[sensor_id]
        except KeyError:
            raise UnknownSensorError(f"unknown sensor {sensor_id!r}") from None

    def sensor(self, sensor_id: str) -> SensorSchema:
        return self.sensors[self.index_of(sensor_id)]

    def bit_mask(self, sensor_ids: Iterable[str]) -> np.ndarray:
        """Boolean (D,) vector selecting the bits owned by the given sensors."""
        mask = np.zeros(self.D, dtype=bool)
        for sensor_id in sensor_ids:
            mask[self.sensor(sensor_id).bits] = True
        return mask

    def to_dict(self) -> Dict[str, List[str]]:
        return {"binary": self.binary_ids, "numeric": self.numeric_ids}

    @classmethod
    def from_dict(cls, data: Dict) -> "HomeSchema":
        unknown = set(data) - {"binary", "numeric"}
        if unknown:
            raise DataError(f"schema has unknown keys: {sorted(unknown)}")
        return build_schema(list(data.get("binary", [])), list(data.get("numeric", [])))


@dataclass(frozen=True)
class SensorEvent:
    timestamp: float
    sensor_id: str
    value: float


@dataclass(frozen=True, eq=False)
class Trace:
    """
    Timestamped event stream backed by a pandas frame.

    The frame has columns timestamp (seconds since the stream epoch),
    sensor_id and value, sorted by timestamp with ties kept in input order.
    """

    frame: pd.DataFrame
    duration: float

    def __post_init__(self):
        ts = self.frame["timestamp"].to_numpy()
        if len(ts):
            if np.any(np.diff(ts) < 0):
                raise DataError("trace timestamps must be non-decreasing")
            if ts[0] < 0:
                raise DataError("trace timestamps must be non-negative")
            if ts[-1] >= self.duration:
                raise DataError(f"event at t={ts[-1]} lies beyond trace duration {self.duration}")

    @classmethod
    def from_events(cls, events: Sequence[SensorEvent], duration: float) -> "Trace":
        frame = pd.DataFrame(
            {
                "timestamp": np.array([e.timestamp for e in events], dtype=np.float64),
                "sensor_id": pd.Series([e.sensor_id for e in events], dtype=object),
                "value": np.array([e.value for e in events], dtype=np.float64),
            }
        )
        return cls.from_frame(frame, duration)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, duration: float) -> "Trace":
        """Build a trace from an unsorted frame; sorting is stable."""
        frame = frame[TRACE_COLUMNS].sort_values("timestamp", kind="mergesort").reset_index(drop=True)
        frame["timestamp"] = frame["timestamp"].astype(np.float64)
        frame["value"] = frame["value"].astype(np.float64)
        return cls(frame=frame, duration=float(duration))

    @classmethod
    def empty(cls, duration: float = 0.0) -> "Trace":
        return cls.from_frame(pd.DataFrame({c: [] for c in TRACE_COLUMNS}), duration)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def events(self) -> List[SensorEvent]:
        return list(self.iter_events())

    def iter_events(self) -> Iterator[SensorEvent]:
        for ts, sensor_id, value in self.frame.itertuples(index=False, name=None):
            yield SensorEvent(float(ts), sensor_id, float(value))

    def sensor_frame(self, sensor_id: str) -> pd.DataFrame:
        return self.frame[self.frame["sensor_id"] == sensor_id]

    def slice(self, start: float, end: float) -> "Trace":
        """Events in [start, end), re-based so the slice starts at t=0."""
        duration = float(end - start)
        rebased = self.frame["timestamp"] - start
        part = self.frame[(self.frame["timestamp"] >= start) & (rebased < duration)].copy()
        part["timestamp"] = rebased[part.index]
        return Trace(frame=part.reset_index(drop=True), duration=duration)

    def arrays(self, schema: HomeSchema) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(timestamps, sensor index into schema, values) as numpy arrays."""
        codes = self.frame["sensor_id"].map(schema._index)
        if codes.isna().any():
            missing = self.frame.loc[codes.isna(), "sensor_id"].iloc[0]
            raise UnknownSensorError(f"unknown sensor {missing!r}")
        return (
            self.frame["timestamp"].to_numpy(dtype=np.float64),
            codes.to_numpy(dtype=np.int64),
            self.frame["value"].to_numpy(dtype=np.float64),
        )


def build_schema(binary_ids: Sequence[str], numeric_ids: Sequence[str]) -> HomeSchema:
    """
    Assign bit ranges: binary sensors first, then numeric, each in listed order.

    Args:
        binary_ids: Binary sensor ids (two bits each)
        numeric_ids: Numeric sensor ids (four bits each)

    Returns:
        HomeSchema with D = 2*len(binary_ids) + 4*len(numeric_ids)
    """
    if not binary_ids and not numeric_ids:
        raise ValueError("a schema needs at least one sensor")
    overlap = set(binary_ids) & set(numeric_ids)
    if overlap:
        raise DataError(f"sensor ids listed as both binary and numeric: {sorted(overlap)}")
    sensors = []
    offset = 0
    for kind, ids in ((SensorKind.BINARY, binary_ids), (SensorKind.NUMERIC, numeric_ids)):
        for sensor_id in ids:
            sensors.append(SensorSchema(sensor_id, kind, offset, kind.bit_width))
            offset += kind.bit_width
    return HomeSchema(tuple(sensors))


def _parse_value(token: str, line_number: int) -> Tuple[float, bool]:
    """Returns (value, came_from_state_token)."""
    upper = token.upper()
    if upper in ON_TOKENS:
        return 1.0, True
    if upper in OFF_TOKENS:
        return 0.0, True
    try:
        value = float(token)
    except ValueError:
        raise TraceParseError(line_number, f"unparsable value token {token!r}") from None
    if not np.isfinite(value):
        raise TraceParseError(line_number, f"non-finite value {token!r}")
    return value, False


def parse_trace(
    text: Union[str, TextIO, Iterable[str]],
    schema: Optional[HomeSchema] = None,
    origin: Optional[datetime] = None,
    duration: Optional[float] = None,
) -> Tuple[Trace, HomeSchema]:
    """
    Parse a CASAS-style event log.

    Each non-empty, non-comment line reads: date time sensor_id value [annotations...].
    Timestamps are re-based to origin (default: the earliest event). Without a schema one is
    inferred: a sensor is numeric iff any of its values parsed as a real
    outside {0, 1}.

    Args:
        text: Whole file contents, an open text stream, or an iterable of lines
        schema: Known inventory; events from sensors outside it are rejected
        origin: Stream epoch; events before it are rejected
        duration: Trace length in seconds; defaults to the end of the minute
            holding the last event

    Returns:
        (Trace, HomeSchema)
    """
    lines = text.splitlines() if isinstance(text, str) else text
    stamps: List[datetime] = []
    sensor_ids: List[str] = []
    values: List[float] = []
    first_seen: List[str] = []
    known = set()
    numeric_seen = set()

    for line_number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) < 4:
            raise TraceParseError(line_number, f"expected 'date time sensor value', got {line!r}")
        try:
            stamp = datetime.fromisoformat(f"{tokens[0]} {tokens[1]}")
        except ValueError:
            raise TraceParseError(line_number, f"bad timestamp {tokens[0]} {tokens[1]!r}") from None
        sensor_id = tokens[2]
        if schema is not None and sensor_id not in schema:
            raise UnknownSensorError(f"line {line_number}: unknown sensor {sensor_id!r}")
        value, is_state = _parse_value(tokens[3], line_number)
        if sensor_id not in numeric_seen and not is_state and value not in (0.0, 1.0):
            numeric_seen.add(sensor_id)
        if schema is not None and schema.sensor(sensor_id).kind is SensorKind.BINARY and value not in (0.0, 1.0):
            raise TraceParseError(line_number, f"binary sensor {sensor_id} has value {tokens[3]!r}")
        if sensor_id not in known:
            known.add(sensor_id)
            first_seen.append(sensor_id)
        stamps.append(stamp)
        sensor_ids.append(sensor_id)
        values.append(value)

    if schema is None:
        if first_seen:
            schema = build_schema(
                [s for s in first_seen if s not in numeric_seen],
                [s for s in first_seen if s in numeric_seen],
            )
        else:
            schema = HomeSchema(())

    if not stamps:
        return Trace.empty(duration or 0.0), schema

    origin = origin if origin is not None else min(stamps)
    seconds = np.array([(s - origin).total_seconds() for s in stamps], dtype=np.float64)
    if seconds.min() < 0:
        raise DataError(f"events precede the stream origin {origin.isoformat()}")
    frame = pd.DataFrame(
        {"timestamp": seconds, "sensor_id": pd.Series(sensor_ids, dtype=object), "value": np.array(values)}
    )
    # the trace ends at the close of the minute holding the last event
    if duration is None:
        duration = (np.floor(seconds.max() / 60.0) + 1.0) * 60.0
    return Trace.from_frame(frame, duration), schema


TEXT_TIME_RESOLUTION_S = 1e-6


def serialize_trace(trace: Trace, schema: HomeSchema, epoch: datetime = datetime(2000, 1, 1)) -> str:
    """
    Write a trace in the format parse_trace reads; binary values become ON/OFF.

    Timestamps are written with microsecond resolution, so a text round trip
    moves each one by up to TEXT_TIME_RESOLUTION_S / 2. Numeric values are
    written with repr and survive exactly. Use parquet for a bit-exact copy.
    """
    kinds = {s.sensor_id: s.kind for s in schema.sensors}
    lines = []
    for ts, sensor_id, value in trace.frame.itertuples(index=False, name=None):
        stamp = epoch + timedelta(seconds=float(ts))
        if kinds.get(sensor_id) is SensorKind.BINARY:
            token = "ON" if value >= 0.5 else "OFF"
        else:
            token = repr(float(value))
        lines.append(f"{stamp.strftime('%Y-%m-%d %H:%M:%S.%f')} {sensor_id} {token}")
    return "\n".join(lines) + ("\n" if lines else "")


# For testing this module independently
if __name__ == "__main__":
    sample = """# a tiny CASAS excerpt
2009-02-02 12:18:43.08 M01 ON
2009-02-02 12:18:44.30 M01 OFF
2009-02-02 12:19:02.00 T01 21.5 Kitchen
"""
    trace, schema = parse_trace(sample)
    print(f"✓ Parsed {len(trace)} events from {len(schema)} sensors (D={schema.D})")
    for event in trace.events:
        print(f"  t={event.timestamp:8.2f}s  {event.sensor_id:4s}  {event.value}")
