"""
Synthetic Home Generator
Generates multi-resident smart-home event traces for desk-scale experiments,
standing in for real CASAS recordings.

Residents wander between rooms on independent Markov schedules. While a room is
occupied its binary sensors fire ON/OFF pairs, so sensors sharing a room are
correlated and sensors in different rooms are not. Numeric channels report a
daily sinusoid with AR(1) noise every few seconds.

By default a motion sensor alternates between activity bouts, in which it
retriggers periodically, and short pauses; the long-run occupied rate stays at
binary_rate_per_min. binary_process="poisson" gives plain Poisson firing
instead. Numeric noise only evolves while the channel's room is occupied and
readings are quantized to the sensor resolution, so an empty room reads flat.
"""

import math
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from sensor_model import DataError, HomeSchema, Trace, build_schema


SECONDS_PER_DAY = 86400.0
BINARY_PROCESSES = ("bouts", "poisson")


@dataclass
class SynthConfig:
    n_rooms: int = 4
    binary_per_room: int = 2
    numeric_channels: int = 2
    n_residents: int = 2
    duration_hours: float = 78.0
    seed: int = 1
    mean_dwell_min: float = 20.0
    binary_rate_per_min: float = 2.0
    binary_process: str = "bouts"
    pause_fraction: float = 0.4
    mean_pause_min: float = 1.2
    retrigger_jitter_s: float = 1.0
    max_hold_s: float = 5.0
    numeric_period_s: float = 15.0
    ar_coef: float = 0.9
    noise_sigma: float = 0.1
    numeric_baseline: float = 21.0
    numeric_amplitude: float = 1.0
    numeric_resolution: float = 0.1
    occupancy_coupled: bool = True

    @property
    def mean_bout_min(self) -> float:
        return self.mean_pause_min * (1.0 - self.pause_fraction) / self.pause_fraction

    @property
    def retrigger_period_s(self) -> float:
        # in-bout period that keeps the long-run occupied rate at binary_rate_per_min
        return 60.0 * (1.0 - self.pause_fraction) / self.binary_rate_per_min

    @classmethod
    def from_dict(cls, data: Dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class Stint:
    resident: int
    room: int
    start: float
    end: float


@dataclass
class GroundTruthActivityLog:
    """Where every sensor sits and who occupied which room when."""

    room_of_sensor: Dict[str, int] = field(default_factory=dict)
    stints: List[Stint] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "room_of_sensor": dict(self.room_of_sensor),
            "stints": [asdict(s) for s in self.stints],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "GroundTruthActivityLog":
        return cls(
            room_of_sensor={k: int(v) for k, v in data.get("room_of_sensor", {}).items()},
            stints=[Stint(**s) for s in data.get("stints", [])],
        )


class SyntheticHomeGenerator:
    """Generates deterministic synthetic home traces from a SynthConfig."""

    def __init__(self, config: SynthConfig):
        for name in ("n_rooms", "binary_per_room", "numeric_channels", "n_residents"):
            if getattr(config, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(config, name)}")
        if config.duration_hours <= 0:
            raise DataError("cannot generate a zero-duration trace")
        if config.duration_hours < 1:
            raise ValueError(f"duration_hours must be >= 1, got {config.duration_hours}")
        if config.binary_process not in BINARY_PROCESSES:
            raise ValueError(f"binary_process must be one of {BINARY_PROCESSES}, got {config.binary_process!r}")
        if not 0.0 < config.pause_fraction < 1.0:
            raise ValueError(f"pause_fraction must lie in (0, 1), got {config.pause_fraction}")
        if config.binary_rate_per_min <= 0 or config.mean_pause_min <= 0:
            raise ValueError("binary_rate_per_min and mean_pause_min must be positive")
        self.config = config
        self.duration = float(config.duration_hours) * 3600.0
        self.rng = np.random.default_rng(config.seed)

    def build_schema(self) -> Tuple[HomeSchema, Dict[str, int]]:
        cfg = self.config
        binary_ids, numeric_ids, rooms = [], [], {}
        for room in range(cfg.n_rooms):
            for _ in range(cfg.binary_per_room):
                sensor_id = f"M{len(binary_ids) + 1:03d}"
                binary_ids.append(sensor_id)
                rooms[sensor_id] = room
        for channel in range(cfg.numeric_channels):
            sensor_id = f"T{channel + 1:03d}"
            numeric_ids.append(sensor_id)
            rooms[sensor_id] = channel % cfg.n_rooms
        return build_schema(binary_ids, numeric_ids), rooms

    def generate_schedule(self, resident: int) -> List[Stint]:
        """Markov walk over rooms with exponential dwell times."""
        cfg = self.config
        stints = []
        t = 0.0
        room = int(self.rng.integers(cfg.n_rooms))
        while t < self.duration:
            dwell = self.rng.exponential(cfg.mean_dwell_min * 60.0)
            end = min(t + dwell, self.duration)
            stints.append(Stint(resident, room, t, end))
            t = end
            if cfg.n_rooms > 1:
                step = int(self.rng.integers(1, cfg.n_rooms))
                room = (room + step) % cfg.n_rooms
        return stints

    def bout_on_times(self, start: float, end: float) -> np.ndarray:
        """ON times of one sensor over one stint: periodic retriggers inside bouts, nothing in pauses."""
        cfg = self.config
        period = cfg.retrigger_period_s
        chunks = []
        t = start
        in_bout = self.rng.random() >= cfg.pause_fraction
        while t < end:
            mean_min = cfg.mean_bout_min if in_bout else cfg.mean_pause_min
            span_end = min(t + self.rng.exponential(mean_min * 60.0), end)
            if in_bout:
                grid = np.arange(t, span_end, period)
                grid = grid + np.abs(self.rng.normal(0.0, cfg.retrigger_jitter_s, size=len(grid)))
                chunks.append(grid[grid < span_end])
            t = span_end
            in_bout = not in_bout
        return np.concatenate(chunks) if chunks else np.empty(0)

    def generate_binary_events(self, stints: List[Stint], room_sensors: Dict[int, List[str]]) -> List[Tuple[float, str, float]]:
        cfg = self.config
        rate_per_s = cfg.binary_rate_per_min / 60.0
        events = []
        for stint in stints:
            span = stint.end - stint.start
            for sensor_id in room_sensors[stint.room]:
                if cfg.binary_process == "poisson":
                    count = int(self.rng.poisson(rate_per_s * span))
                    on_times = np.sort(self.rng.uniform(stint.start, stint.end, size=count))
                else:
                    on_times = self.bout_on_times(stint.start, stint.end)
                if len(on_times) == 0:
                    continue
                holds = self.rng.uniform(0.5, cfg.max_hold_s, size=len(on_times))
                for on, hold in zip(on_times, holds):
                    events.append((float(on), sensor_id, 1.0))
                    off = on + hold
                    if off < self.duration:
                        events.append((float(off), sensor_id, 0.0))
        return events

    def generate_numeric_events(
        self,
        numeric_ids: List[str],
        occupied_spans: Optional[Dict[str, List[Tuple[float, float]]]] = None,
    ) -> List[Tuple[np.ndarray, str, np.ndarray]]:
        """
        Readings per numeric channel.

        With occupancy coupling the AR(1) state only advances at readings taken
        while the channel's room is occupied (spans from occupied_spans) and
        holds its value otherwise.
        """
        cfg = self.config
        phi = cfg.ar_coef
        series = []
        for channel, sensor_id in enumerate(numeric_ids):
            offset = channel * cfg.numeric_period_s / max(len(numeric_ids), 1)
            times = np.arange(offset, self.duration, cfg.numeric_period_s)
            shocks = self.rng.normal(0.0, cfg.noise_sigma, size=len(times))
            if cfg.occupancy_coupled and occupied_spans is not None:
                moving = occupancy_mask(times, occupied_spans.get(sensor_id, []))
            else:
                moving = np.ones(len(times), dtype=bool)
            noise = np.empty(len(times))
            # start from the stationary distribution
            noise[0] = shocks[0] / math.sqrt(1.0 - phi * phi) if abs(phi) < 1 else shocks[0]
            for i in range(1, len(times)):
                noise[i] = phi * noise[i - 1] + shocks[i] if moving[i] else noise[i - 1]
            phase = self.rng.uniform(0.0, 2.0 * math.pi)
            values = cfg.numeric_baseline + cfg.numeric_amplitude * np.sin(2.0 * math.pi * times / SECONDS_PER_DAY + phase) + noise
            if cfg.numeric_resolution > 0:
                values = np.round(values / cfg.numeric_resolution) * cfg.numeric_resolution
            series.append((times, sensor_id, values))
        return series

    def generate(self) -> Tuple[Trace, HomeSchema, GroundTruthActivityLog]:
        schema, rooms = self.build_schema()
        room_sensors: Dict[int, List[str]] = {r: [] for r in range(self.config.n_rooms)}
        for sensor_id in schema.binary_ids:
            room_sensors[rooms[sensor_id]].append(sensor_id)

        stints = []
        for resident in range(self.config.n_residents):
            stints.extend(self.generate_schedule(resident))

        binary = self.generate_binary_events(stints, room_sensors)
        spans = {sid: [(s.start, s.end) for s in stints if s.room == rooms[sid]] for sid in schema.numeric_ids}
        numeric = self.generate_numeric_events(schema.numeric_ids, spans)

        times = [np.array([e[0] for e in binary], dtype=np.float64)]
        sensors = [np.array([e[1] for e in binary], dtype=object)]
        values = [np.array([e[2] for e in binary], dtype=np.float64)]
        for t, sensor_id, v in numeric:
            times.append(t)
            sensors.append(np.full(len(t), sensor_id, dtype=object))
            values.append(v)
        frame = pd.DataFrame(
            {
                "timestamp": np.concatenate(times),
                "sensor_id": np.concatenate(sensors),
                "value": np.concatenate(values),
            }
        )
        trace = Trace.from_frame(frame, self.duration)
        return trace, schema, GroundTruthActivityLog(room_of_sensor=rooms, stints=stints)


def occupancy_mask(times: np.ndarray, spans: List[Tuple[float, float]]) -> np.ndarray:
    """True where a sorted time falls inside any [start, end) span."""
    mask = np.zeros(len(times), dtype=bool)
    for start, end in spans:
        mask[np.searchsorted(times, start, side="left"):np.searchsorted(times, end, side="left")] = True
    return mask


def generate_synthetic_trace(config: SynthConfig) -> Tuple[Trace, HomeSchema, GroundTruthActivityLog]:
    """
    Generate a synthetic home trace.

    Args:
        config: Generator settings; identical configs yield identical traces

    Returns:
        (Trace, HomeSchema, GroundTruthActivityLog)
    """
    return SyntheticHomeGenerator(config).generate()


def room_pairs(activity_log: GroundTruthActivityLog, schema: HomeSchema) -> Tuple[List[Tuple[str, str]], List[Tuple[str, str]]]:
    """Binary sensor pairs split into (same room, different rooms)."""
    same, cross = [], []
    for a, b in combinations(schema.binary_ids, 2):
        if activity_log.room_of_sensor[a] == activity_log.room_of_sensor[b]:
            same.append((a, b))
        else:
            cross.append((a, b))
    return same, cross


# For testing this module independently
if __name__ == "__main__":
    config = SynthConfig(duration_hours=6, seed=7)
    trace, schema, log = generate_synthetic_trace(config)

    print("=" * 80)
    print("SYNTHETIC HOME")
    print("=" * 80)
    print(f"Sensors: {len(schema)} (binary={len(schema.binary_ids)}, numeric={len(schema.numeric_ids)}, D={schema.D})")
    print(f"Events: {len(trace)} over {trace.duration / 3600:.1f} h")
    print(f"Room stints: {len(log.stints)}")
    counts = trace.frame["sensor_id"].value_counts().sort_index()
    for sensor_id, count in counts.items():
        print(f"  {sensor_id} (room {log.room_of_sensor[sensor_id]}): {count} events")
