"""
Fault Injection Module
Realizes the six sensor fault models as trace transformations and samples
single- and multi-failure injection plans.

Numeric channels get their readings rewritten inside the fault window. Binary
channels have no reading to bend, so each fault is realized in event space:
spurious toggles, bursts, suppressed state changes or a ramping false-activation
rate.
"""

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from sensor_model import DataError, HomeSchema, SensorKind, Trace, UnknownSensorError


class InjectionError(DataError):
    pass


class FaultKind(str, Enum):
    OUTLIER = "outlier"
    SPIKE = "spike"
    STUCK_AT = "stuck_at"
    HIGH_NOISE = "high_noise"
    DRIFT = "drift"
    FAIL_STOP = "fail_stop"

    @property
    def windowed(self) -> bool:
        return self not in (FaultKind.OUTLIER, FaultKind.FAIL_STOP)


ALL_KINDS = list(FaultKind)


@dataclass
class FaultConfig:
    delta_default_min: float = 30.0
    outlier_sigmas: float = 6.0
    spike_sigmas: float = 6.0
    noise_sigmas: float = 6.0
    drift_sigmas: float = 10.0
    sigma_floor: float = 1.0
    binary_rate_floor_per_min: float = 1.0
    spike_rate_multiplier: float = 10.0
    spike_burst_min: float = 2.0
    noise_rate_multiplier: float = 5.0
    drift_rate_multiplier: float = 5.0
    multi_fault_mean: float = 3.0
    multi_fault_min: int = 1
    multi_fault_max: int = 5
    min_active_minutes: float = 10.0
    sample_attempts: int = 100

    @classmethod
    def from_dict(cls, data: Dict) -> "FaultConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise DataError(f"unknown faults config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def delta_default_s(self) -> float:
        return self.delta_default_min * 60.0


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    sensor_id: str
    start_tau: float
    duration_delta: float = 0.0
    params: Dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.start_tau < 0:
            raise InjectionError(f"fault start must be >= 0, got {self.start_tau}")
        if self.kind.windowed and not self.duration_delta > 0:
            raise InjectionError(f"{self.kind.value} needs a positive duration, got {self.duration_delta}")

    @property
    def effective_duration(self) -> float:
        if self.kind is FaultKind.FAIL_STOP:
            return math.inf
        return self.duration_delta if self.kind.windowed else 0.0

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind.value,
            "sensor": self.sensor_id,
            "start": self.start_tau,
            "delta": self.duration_delta if self.kind.windowed else None,
            "params": dict(self.params),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FaultSpec":
        try:
            kind = FaultKind(data["kind"])
            return cls(
                kind=kind,
                sensor_id=str(data["sensor"]),
                start_tau=float(data["start"]),
                duration_delta=float(data.get("delta") or 0.0),
                params={k: float(v) for k, v in (data.get("params") or {}).items()},
                seed=int(data.get("seed", 0)),
            )
        except KeyError as e:
            raise InjectionError(f"fault spec is missing field {e.args[0]!r}") from None
        except ValueError as e:
            if isinstance(e, InjectionError):
                raise
            raise InjectionError(f"malformed fault spec {dict(data)!r}: {e}") from None


@dataclass(frozen=True)
class ChannelProfile:
    sensor_id: str
    mean: float
    std: float
    event_rate: float
    kind: SensorKind = SensorKind.NUMERIC


@dataclass(frozen=True)
class InjectionRecord:
    spec: FaultSpec
    segment_id: str
    injected_event_count: int

    def to_dict(self) -> Dict:
        return {"segment_id": self.segment_id, "injected_event_count": self.injected_event_count, **self.spec.to_dict()}


def profile_channels(trace: Trace, schema: HomeSchema) -> Dict[str, ChannelProfile]:
    """
    Clean-stream statistics per sensor.

    Numeric sensors get mean/std of their readings; binary sensors get the
    fraction of events that are activations. Rates are events per minute over
    the trace duration.
    """
    if len(trace) == 0:
        raise DataError("cannot profile an empty trace")
    minutes = trace.duration / 60.0
    grouped = trace.frame.groupby("sensor_id", sort=False)["value"].agg(["mean", "count", lambda v: float(np.std(v))])
    grouped.columns = ["mean", "count", "std"]

    profiles = {}
    for sensor in schema.sensors:
        sid = sensor.sensor_id
        if sid not in grouped.index:
            print(f"⚠ Sensor {sid} has no events; profiled as silent")
            profiles[sid] = ChannelProfile(sid, 0.0, 0.0, 0.0, sensor.kind)
            continue
        row = grouped.loc[sid]
        profiles[sid] = ChannelProfile(
            sensor_id=sid,
            mean=float(row["mean"]),
            std=float(row["std"]),
            event_rate=float(row["count"]) / minutes,
            kind=sensor.kind,
        )
    return profiles


def _last_reading_before(trace: Trace, sensor_id: str, t: float) -> Optional[float]:
    readings = trace.sensor_frame(sensor_id)
    before = readings[readings["timestamp"] <= t]
    if before.empty:
        return None
    return float(before["value"].iloc[-1])


def resolve_params(
    spec: FaultSpec,
    profile: ChannelProfile,
    config: Optional[FaultConfig] = None,
    trace: Optional[Trace] = None,
) -> FaultSpec:
    """
    Fill the magnitudes a spec leaves open from the channel profile.

    Values already present in spec.params are kept, so a resolved spec written
    to a plan file replays exactly.
    """
    config = config or FaultConfig()
    params = dict(spec.params)
    sigma = profile.std if profile.std > 0 else config.sigma_floor
    kind = spec.kind

    if profile.kind is SensorKind.BINARY:
        base_rate = max(profile.event_rate, config.binary_rate_floor_per_min)
        multiplier = {
            FaultKind.SPIKE: config.spike_rate_multiplier,
            FaultKind.HIGH_NOISE: config.noise_rate_multiplier,
            FaultKind.DRIFT: config.drift_rate_multiplier,
        }.get(kind)
        if multiplier is not None:
            params.setdefault("rate_per_min", multiplier * base_rate)
        return replace(spec, params=params)

    if kind is FaultKind.OUTLIER and "o" not in params:
        sign = 1.0 if np.random.default_rng(spec.seed).random() < 0.5 else -1.0
        params["o"] = profile.mean + sign * config.outlier_sigmas * sigma
    elif kind is FaultKind.SPIKE:
        params.setdefault("delta", max(config.spike_sigmas * profile.std, config.sigma_floor))
    elif kind is FaultKind.STUCK_AT and "s" not in params:
        held = _last_reading_before(trace, spec.sensor_id, spec.start_tau) if trace is not None else None
        params["s"] = profile.mean if held is None else held
    elif kind is FaultKind.HIGH_NOISE:
        params.setdefault("sigma", max(config.noise_sigmas * profile.std, config.sigma_floor))
    elif kind is FaultKind.DRIFT:
        total = max(config.drift_sigmas * profile.std, config.sigma_floor)
        params.setdefault("slope", total / spec.duration_delta)
    return replace(spec, params=params)


def _toggle_frame(sensor_id: str, times: np.ndarray) -> pd.DataFrame:
    times = np.sort(times)
    return pd.DataFrame(
        {
            "timestamp": times.astype(np.float64),
            "sensor_id": pd.Series([sensor_id] * len(times), dtype=object),
            "value": (np.arange(len(times)) % 2 == 0).astype(np.float64),
        }
    )


def _poisson_times(rng: np.random.Generator, rate_per_min: float, start: float, end: float) -> np.ndarray:
    count = int(rng.poisson(rate_per_min * (end - start) / 60.0))
    return rng.uniform(start, end, size=count)


def _inject_numeric(frame: pd.DataFrame, spec: FaultSpec, window_end: float, rng: np.random.Generator) -> Tuple[pd.DataFrame, int]:
    target = frame["sensor_id"] == spec.sensor_id
    ts = frame["timestamp"]
    in_window = target & (ts >= spec.start_tau) & (ts < window_end)
    rows = np.flatnonzero(in_window.to_numpy())
    values = frame["value"].to_numpy(copy=True)
    p = spec.params

    if spec.kind is FaultKind.OUTLIER:
        extra = pd.DataFrame({"timestamp": [spec.start_tau], "sensor_id": [spec.sensor_id], "value": [p["o"]]})
        return pd.concat([frame, extra], ignore_index=True), 1
    if spec.kind is FaultKind.FAIL_STOP:
        dropped = target & (ts >= spec.start_tau)
        return frame[~dropped], int(dropped.sum())

    if spec.kind is FaultKind.SPIKE:
        signs = np.where(np.arange(len(rows)) % 2 == 0, 1.0, -1.0)
        values[rows] += signs * p["delta"]
    elif spec.kind is FaultKind.STUCK_AT:
        values[rows] = p["s"]
    elif spec.kind is FaultKind.HIGH_NOISE:
        values[rows] += rng.normal(0.0, p["sigma"], size=len(rows))
    elif spec.kind is FaultKind.DRIFT:
        values[rows] += p["slope"] * (ts.to_numpy()[rows] - spec.start_tau)
    out = frame.copy()
    out["value"] = values
    return out, len(rows)


def _inject_binary(frame: pd.DataFrame, spec: FaultSpec, window_end: float, duration: float, rng: np.random.Generator, config: FaultConfig) -> Tuple[pd.DataFrame, int]:
    target = frame["sensor_id"] == spec.sensor_id
    ts = frame["timestamp"]
    kind = spec.kind
    start = spec.start_tau

    if kind is FaultKind.FAIL_STOP:
        dropped = target & (ts >= start)
        return frame[~dropped], int(dropped.sum())
    if kind is FaultKind.STUCK_AT:
        dropped = target & (ts >= start) & (ts < window_end)
        return frame[~dropped], int(dropped.sum())

    if kind is FaultKind.OUTLIER:
        times = np.array([start, min(start + 1.0, (start + duration) / 2.0)])
    elif kind is FaultKind.SPIKE:
        burst_end = min(window_end, start + config.spike_burst_min * 60.0)
        times = _poisson_times(rng, spec.params["rate_per_min"], start, burst_end)
    elif kind is FaultKind.HIGH_NOISE:
        times = _poisson_times(rng, spec.params["rate_per_min"], start, window_end)
    else:
        # thinning: candidates at the peak rate, kept with probability rising 0 -> 1
        candidates = _poisson_times(rng, spec.params["rate_per_min"], start, window_end)
        keep = rng.random(len(candidates)) < (candidates - start) / spec.duration_delta
        times = candidates[keep]
    extra = _toggle_frame(spec.sensor_id, times)
    return pd.concat([frame, extra], ignore_index=True), len(extra)


def inject(
    trace: Trace,
    spec: FaultSpec,
    profile: ChannelProfile,
    config: Optional[FaultConfig] = None,
) -> Tuple[Trace, int]:
    """
    Apply one fault to a trace.

    Args:
        trace: Clean (or already injected) trace; never modified
        spec: Fault to apply; missing magnitudes are resolved from the profile
        profile: Clean statistics of the target channel
        config: Magnitude conventions

    Returns:
        (new Trace, number of events added, modified or removed)
    """
    config = config or FaultConfig()
    if profile.sensor_id != spec.sensor_id:
        raise InjectionError(f"profile is for {profile.sensor_id}, fault targets {spec.sensor_id}")
    if spec.start_tau >= trace.duration:
        raise InjectionError(f"fault start {spec.start_tau} lies beyond trace duration {trace.duration}")

    spec = resolve_params(spec, profile, config, trace)
    window_end = spec.start_tau + spec.effective_duration
    if spec.kind.windowed and window_end > trace.duration:
        print(f"⚠ {spec.kind.value} window on {spec.sensor_id} runs past the trace end; clipped at {trace.duration:.0f}s")
        window_end = trace.duration

    rng = np.random.default_rng(spec.seed)
    if profile.kind is SensorKind.BINARY:
        frame, count = _inject_binary(trace.frame, spec, window_end, trace.duration, rng, config)
    else:
        frame, count = _inject_numeric(trace.frame, spec, window_end, rng)
    if spec.kind is FaultKind.FAIL_STOP and count == 0:
        print(f"⚠ fail_stop on {spec.sensor_id}: sensor already silent after t={spec.start_tau:.0f}s")
    return Trace.from_frame(frame, trace.duration), count


def apply_plan(
    trace: Trace,
    specs: Sequence[FaultSpec],
    profiles: Mapping[str, ChannelProfile],
    segment_id: str = "",
    config: Optional[FaultConfig] = None,
) -> Tuple[Trace, List[InjectionRecord]]:
    """Inject every spec in order; records carry the resolved parameters."""
    records = []
    for spec in specs:
        if spec.sensor_id not in profiles:
            raise UnknownSensorError(f"fault targets unknown sensor {spec.sensor_id!r}")
        profile = profiles[spec.sensor_id]
        resolved = resolve_params(spec, profile, config, trace)
        trace, count = inject(trace, resolved, profile, config)
        records.append(InjectionRecord(resolved, segment_id, count))
    return trace, records


SILENCING_KINDS = (FaultKind.STUCK_AT, FaultKind.FAIL_STOP)


def active_minutes(trace: Trace, sensor_id: str, start: float, end: float, numeric: bool = False) -> int:
    """
    One-minute intervals in [start, end) where a sensor shows activity: any
    event for a binary sensor, a reading that differs from the previous one for
    a numeric sensor.
    """
    readings = trace.sensor_frame(sensor_id)
    ts = readings["timestamp"].to_numpy()
    if numeric:
        ts = ts[np.flatnonzero(np.diff(readings["value"].to_numpy()) != 0) + 1]
    ts = ts[(ts >= start) & (ts < end)]
    return len(np.unique(np.floor(ts / 60.0)))


def _sample_spec(
    rng: np.random.Generator,
    schema: HomeSchema,
    candidates: Sequence[str],
    t0: float,
    t1: float,
    config: FaultConfig,
    trace: Optional[Trace] = None,
) -> FaultSpec:
    """
    Kind first, then sensor and start. Given the trace, a stuck-at or fail-stop
    target is redrawn until it is active in at least min_active_minutes of the
    fault window; silencing a sensor that is idle anyway changes nothing.
    """
    kind = ALL_KINDS[int(rng.integers(len(ALL_KINDS)))]
    delta = min(config.delta_default_s, t1 - t0)
    for _ in range(max(config.sample_attempts, 1)):
        sensor_id = candidates[int(rng.integers(len(candidates)))]
        start = float(rng.uniform(t0, t1 - delta)) if t1 - delta > t0 else float(t0)
        if trace is None or kind not in SILENCING_KINDS:
            break
        numeric = schema.sensor(sensor_id).kind is SensorKind.NUMERIC
        if active_minutes(trace, sensor_id, start, start + delta, numeric) >= config.min_active_minutes:
            break
    else:
        print(f"⚠ no target active for {config.min_active_minutes:g} min found for {kind.value}; using {sensor_id} at t={start:.0f}s")
    return FaultSpec(
        kind=kind,
        sensor_id=sensor_id,
        start_tau=start,
        duration_delta=delta if kind.windowed else 0.0,
        seed=int(rng.integers(0, 2**32)),
    )


def sample_single_fault(
    schema: HomeSchema,
    eval_window: Tuple[float, float],
    rng_seed: int,
    config: Optional[FaultConfig] = None,
    trace: Optional[Trace] = None,
) -> FaultSpec:
    """
    Uniformly sample a fault kind, a sensor and an insertion time.

    Args:
        schema: Sensors to choose from
        eval_window: (t0, t1) in seconds
        rng_seed: Seed; identical seeds yield identical specs
        trace: Clean stream the fault will be applied to; enables the
            activity check for stuck-at and fail-stop targets

    Returns:
        FaultSpec with magnitudes left for resolve_params
    """
    config = config or FaultConfig()
    t0, t1 = eval_window
    if not t1 > t0:
        raise ValueError(f"eval_window must have t1 > t0, got {eval_window}")
    rng = np.random.default_rng(rng_seed)
    return _sample_spec(rng, schema, schema.sensor_ids, t0, t1, config, trace)


def sample_fault_count(rng: np.random.Generator, config: Optional[FaultConfig] = None) -> int:
    config = config or FaultConfig()
    return int(np.clip(rng.poisson(config.multi_fault_mean), config.multi_fault_min, config.multi_fault_max))


def sample_multi_faults(
    schema: HomeSchema,
    eval_window: Tuple[float, float],
    rng_seed: int,
    config: Optional[FaultConfig] = None,
    trace: Optional[Trace] = None,
) -> List[FaultSpec]:
    """Simultaneous faults on distinct sensors; count = clip(Poisson(3), 1, 5)."""
    config = config or FaultConfig()
    t0, t1 = eval_window
    if not t1 > t0:
        raise ValueError(f"eval_window must have t1 > t0, got {eval_window}")
    if len(schema) < config.multi_fault_max:
        raise ValueError(f"multi-fault sampling needs >= {config.multi_fault_max} sensors, schema has {len(schema)}")
    rng = np.random.default_rng(rng_seed)
    remaining = list(schema.sensor_ids)
    specs = []
    for _ in range(sample_fault_count(rng, config)):
        spec = _sample_spec(rng, schema, remaining, t0, t1, config, trace)
        remaining.remove(spec.sensor_id)
        specs.append(spec)
    return specs


def save_plan(specs: Sequence[FaultSpec]) -> List[Dict]:
    return [s.to_dict() for s in specs]


def load_plan(data: Union[Sequence[Mapping], Mapping[str, Sequence[Mapping]]], segment_id: Optional[str] = None) -> List[FaultSpec]:
    """
    Fault specs from a plan file: either a list of specs, or a mapping of
    segment id to such a list as written by an evaluation run, in which case
    segment_id selects the entry.
    """
    if isinstance(data, Mapping):
        if segment_id not in data:
            raise InjectionError(f"plan has no entry for segment {segment_id!r}")
        data = data[segment_id]
    if not isinstance(data, list):
        raise InjectionError("an injection plan must be a JSON list of fault specs")
    return [FaultSpec.from_dict(d) for d in data]


# For testing this module independently
if __name__ == "__main__":
    from synthetic_home import SynthConfig, generate_synthetic_trace

    trace, schema, _ = generate_synthetic_trace(SynthConfig(duration_hours=6, seed=11))
    profiles = profile_channels(trace, schema)
    specs = sample_multi_faults(schema, (0.0, trace.duration), rng_seed=5, trace=trace)
    injected, records = apply_plan(trace, specs, profiles, segment_id="demo")
    print(f"✓ Injected {len(records)} faults ({len(trace)} -> {len(injected)} events)")
    for record in records:
        spec = record.spec
        print(f"  {spec.kind.value:10s} {spec.sensor_id}  start={spec.start_tau:8.0f}s  events={record.injected_event_count}  {spec.params}")
