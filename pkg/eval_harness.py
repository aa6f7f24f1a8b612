"""
Evaluation Harness Module
Segment-based evaluation protocol, single- and multi-failure experiments and
the detection / localization metrics.

A trace is split into a training block, a clean validation block and an
evaluation block cut into equal segments. Every segment is scored twice: as a
clean copy and as a copy with injected faults.
"""

import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from data_storage import rss_mb
from fault_injection import (
    ALL_KINDS,
    ChannelProfile,
    FaultConfig,
    FaultSpec,
    InjectionRecord,
    apply_plan,
    profile_channels,
    sample_multi_faults,
    sample_single_fault,
)
from feature_encoding import INTERVAL_S, SEQ_LEN, ChannelStats, calibrate_stats, encode_stream, stack_windows
from masked_encoder import ModelParams, TrainConfig, load_checkpoint, save_checkpoint, train
from runtime_inference import (
    VERDICT_COLUMNS,
    Baselines,
    IsolationSet,
    Verdict,
    VerdictLog,
    calibrate_baselines,
    run_stream,
)
from sensor_model import DataError, HomeSchema, Trace


HOUR = 3600.0
MODES = ("single", "multi")
REPORT_COLUMNS = [
    "segment_id",
    "copy",
    "mode",
    "injected_sensors",
    "flagged_sensors",
    "tp",
    "fp",
    "fn",
    "first_correct_delay_min",
    "mean_step_ms",
]


class ProtocolError(DataError):
    pass


@dataclass
class ProtocolConfig:
    train_hours: float = 500.0
    val_hours: float = 100.0
    eval_hours: float = 180.0
    segments: int = 30
    segment_hours: float = 6.0
    min_scaled_hours: float = 10.0

    def __post_init__(self):
        if self.segments < 1:
            raise ValueError(f"segments must be >= 1, got {self.segments}")
        if abs(self.segments * self.segment_hours - self.eval_hours) > 1e-9:
            raise ValueError(
                f"{self.segments} segments of {self.segment_hours} h do not tile {self.eval_hours} h of evaluation"
            )

    @property
    def total_hours(self) -> float:
        return self.train_hours + self.val_hours + self.eval_hours

    @classmethod
    def from_dict(cls, data: Dict) -> "ProtocolConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise DataError(f"unknown protocol config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Segment:
    index: int
    start: float
    end: float


@dataclass
class ProtocolPlan:
    train_window: Tuple[float, float]
    val_window: Tuple[float, float]
    eval_window: Tuple[float, float]
    segments: List[Segment]
    scaled: bool = False
    scale: float = 1.0

    def to_dict(self) -> Dict:
        return {
            "train_window_h": [t / HOUR for t in self.train_window],
            "val_window_h": [t / HOUR for t in self.val_window],
            "eval_window_h": [t / HOUR for t in self.eval_window],
            "segments": len(self.segments),
            "segment_hours": (self.segments[0].end - self.segments[0].start) / HOUR,
            "scaled": self.scaled,
            "scale": self.scale,
        }


def _floor_to_interval(t: float) -> float:
    return math.floor(t / INTERVAL_S + 1e-9) * INTERVAL_S


def build_protocol(trace: Trace, config: Optional[ProtocolConfig] = None) -> ProtocolPlan:
    """
    Split a trace into train / validation / evaluation windows and segments.

    Traces shorter than the canonical total are scaled proportionally and the
    plan is flagged as scaled; anything beyond the total is ignored. Every
    boundary is floored to the one-minute grid, the last segment absorbs the
    remainder of the evaluation window.

    Raises:
        ProtocolError: trace shorter than min_scaled_hours, or segments too
            short to hold one sequence window
    """
    config = config or ProtocolConfig()
    duration_h = trace.duration / HOUR
    if duration_h < config.min_scaled_hours:
        raise ProtocolError(
            f"trace covers {duration_h:.2f} h; the protocol refuses to scale below {config.min_scaled_hours} h"
        )
    scale = min(1.0, duration_h / config.total_hours)
    scaled = scale < 1.0

    train_end = _floor_to_interval(config.train_hours * scale * HOUR)
    val_end = _floor_to_interval((config.train_hours + config.val_hours) * scale * HOUR)
    eval_end = _floor_to_interval(min(config.total_hours * scale * HOUR, trace.duration))
    seg_len = _floor_to_interval(config.segment_hours * scale * HOUR)
    if seg_len / INTERVAL_S < SEQ_LEN:
        raise ProtocolError(
            f"segments of {seg_len / INTERVAL_S:.0f} one-minute intervals cannot hold a window of L={SEQ_LEN}; "
            f"trace of {duration_h:.2f} h is too short for {config.segments} segments"
        )
    segments = [
        Segment(i, val_end + i * seg_len, eval_end if i == config.segments - 1 else val_end + (i + 1) * seg_len)
        for i in range(config.segments)
    ]
    return ProtocolPlan((0.0, train_end), (train_end, val_end), (val_end, eval_end), segments, scaled, scale)


@dataclass
class SegmentCopy:
    segment_id: str
    copy: str
    trace: Trace
    faults: List[FaultSpec] = field(default_factory=list)
    records: List[InjectionRecord] = field(default_factory=list)

    @property
    def injected(self) -> bool:
        return self.copy == "injected"

    @property
    def injected_sensors(self) -> List[str]:
        return [f.sensor_id for f in self.faults]


def segment_seeds(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2**32, size=n)


def build_segment_copies(
    trace: Trace,
    plan: ProtocolPlan,
    schema: HomeSchema,
    mode: str,
    seed: int,
    profiles: Mapping[str, ChannelProfile],
    fault_config: Optional[FaultConfig] = None,
    id_prefix: str = "",
) -> List[SegmentCopy]:
    """Clean and injected copy of every evaluation segment, re-based to t=0."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    copies = []
    for segment, segment_seed in zip(plan.segments, segment_seeds(seed, len(plan.segments))):
        segment_id = f"{id_prefix}{segment.index:02d}"
        clean = trace.slice(segment.start, segment.end)
        window = (0.0, clean.duration)
        if mode == "single":
            specs = [sample_single_fault(schema, window, int(segment_seed), fault_config, clean)]
        else:
            specs = sample_multi_faults(schema, window, int(segment_seed), fault_config, clean)
        injected, records = apply_plan(clean, specs, profiles, segment_id, fault_config)
        copies.append(SegmentCopy(segment_id, "clean", clean))
        copies.append(SegmentCopy(segment_id, "injected", injected, [r.spec for r in records], records))
    return copies


class Detector(Protocol):
    def detect(self, copy: SegmentCopy) -> VerdictLog: ...


class ModelDetector:
    """Streams a segment copy through the trained encoder."""

    def __init__(self, params: ModelParams, stats: Mapping[str, ChannelStats], baselines: Baselines, schema: HomeSchema):
        self.params = params
        self.stats = stats
        self.baselines = baselines
        self.schema = schema

    def detect(self, copy: SegmentCopy) -> VerdictLog:
        return run_stream(self.params, self.stats, self.baselines, copy.trace, self.schema, copy.segment_id)


class OracleDetector:
    """Flags exactly the injected sensors at their fault start."""

    def detect(self, copy: SegmentCopy) -> VerdictLog:
        isolation = IsolationSet()
        verdicts = []
        for spec in copy.faults:
            tau = int(spec.start_tau // 60)
            verdicts.append(Verdict(spec.sensor_id, tau, 1.0, 0.0, spec.start_tau))
            isolation.add(spec.sensor_id, tau)
        return VerdictLog(copy.segment_id, verdicts, isolation, int(copy.trace.duration // 60))


class MuteDetector:
    """Never flags anything."""

    def detect(self, copy: SegmentCopy) -> VerdictLog:
        return VerdictLog(copy.segment_id, [], IsolationSet(), int(copy.trace.duration // 60))


def prf(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    """Precision, recall, F1 with 0/0 scored as 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _flagged(log: VerdictLog) -> List[str]:
    seen = []
    for v in log.verdicts:
        if v.sensor_id not in seen:
            seen.append(v.sensor_id)
    return seen


def compute_detection_metrics(logs: Sequence[VerdictLog], copies: Sequence[SegmentCopy]) -> Tuple[float, float, float]:
    """Segment-level: a copy is detected faulty iff it has at least one verdict."""
    tp = fp = fn = 0
    for log, copy in zip(logs, copies):
        detected = bool(log.verdicts)
        if copy.injected:
            tp += detected
            fn += not detected
        else:
            fp += detected
    return prf(tp, fp, fn)


def _localization_counts(log: VerdictLog, copy: SegmentCopy) -> Tuple[int, int, int]:
    flagged = set(_flagged(log))
    injected = set(copy.injected_sensors)
    return len(flagged & injected), len(flagged - injected), len(injected - flagged)


def compute_localization_metrics(logs: Sequence[VerdictLog], copies: Sequence[SegmentCopy]) -> Tuple[float, float, float]:
    """Sensor-level over all copies; clean-copy flags are false positives."""
    tp = fp = fn = 0
    for log, copy in zip(logs, copies):
        a, b, c = _localization_counts(log, copy)
        tp, fp, fn = tp + a, fp + b, fn + c
    return prf(tp, fp, fn)


def localization_delays(log: VerdictLog, copy: SegmentCopy) -> Tuple[List[float], int]:
    """
    Minutes from each fault's start to the first verdict on its sensor at or
    after that start. Faults without such a verdict are counted as misses.
    """
    delays, misses = [], 0
    for spec in copy.faults:
        times = [v.flag_time_s for v in log.verdicts if v.sensor_id == spec.sensor_id and v.flag_time_s >= spec.start_tau]
        if times:
            delays.append((min(times) - spec.start_tau) / 60.0)
        else:
            misses += 1
    return delays, misses


def compute_localization_time(logs: Sequence[VerdictLog], copies: Sequence[SegmentCopy]) -> Optional[float]:
    """Mean localization delay in minutes; None when nothing was localized."""
    delays = []
    for log, copy in zip(logs, copies):
        delays.extend(localization_delays(log, copy)[0])
    return float(np.mean(delays)) if delays else None


def step_latency(logs: Sequence[VerdictLog], copies: Sequence[SegmentCopy], mode: str) -> Dict[str, Dict[str, float]]:
    """
    Per-interval inference latency per stream class: clean copies, and
    injected copies under the failure mode. Classes without timed steps are
    left out.
    """
    table = {}
    for stream_class in ("clean", mode):
        steps = [
            s
            for log, copy in zip(logs, copies)
            if (copy.copy == "clean") == (stream_class == "clean")
            for s in log.step_seconds
        ]
        if not steps:
            continue
        ms = np.asarray(steps) * 1e3
        table[stream_class] = {
            "intervals": int(len(ms)),
            "mean_ms": float(ms.mean()),
            "p95_ms": float(np.percentile(ms, 95)),
            "max_ms": float(ms.max()),
        }
    return table


@dataclass
class MetricsReport:
    mode: str
    detection: Tuple[float, float, float]
    localization: Tuple[float, float, float]
    localization_time_min: Optional[float]
    localization_misses: int
    per_fault_type: Dict[str, Dict[str, float]]
    rows: List[Dict]
    n_segments: int
    scaled: bool = False
    seeds: List[int] = field(default_factory=list)
    wall_clock_s: Optional[float] = None
    peak_rss_mb: Optional[float] = None
    latency: Dict[str, Dict[str, float]] = field(default_factory=dict)
    verdict_logs: List[VerdictLog] = field(default_factory=list, repr=False)
    copies: List[SegmentCopy] = field(default_factory=list, repr=False)
    detectors: Dict[int, "TrainedDetector"] = field(default_factory=dict, repr=False)

    def to_dict(self) -> Dict:
        return {
            "mode": self.mode,
            "seeds": list(self.seeds),
            "scaled": self.scaled,
            "n_segments": self.n_segments,
            "detection": dict(zip(("precision", "recall", "f1"), self.detection)),
            "localization": dict(zip(("precision", "recall", "f1"), self.localization)),
            "localization_time_min": self.localization_time_min,
            "localization_misses": self.localization_misses,
            "per_fault_type": self.per_fault_type,
            "latency_ms": self.latency,
            "wall_clock_s": self.wall_clock_s,
            "peak_rss_mb": self.peak_rss_mb,
        }

    def rows_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def verdicts_frame(self) -> pd.DataFrame:
        columns = VERDICT_COLUMNS[:1] + ["copy"] + VERDICT_COLUMNS[1:]
        frames = []
        for log, row in zip(self.verdict_logs, self.rows):
            if log.verdicts:
                frame = log.to_frame()
                frame.insert(1, "copy", row["copy"])
                frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=columns)
        return pd.concat(frames, ignore_index=True)[columns]

    def plans(self) -> Dict[str, List[Dict]]:
        """Resolved fault specs of every injected copy, keyed by segment id."""
        return {c.segment_id: [r.spec.to_dict() for r in c.records] for c in self.copies if c.injected}


def _per_fault_type(logs: Sequence[VerdictLog], copies: Sequence[SegmentCopy]) -> Dict[str, Dict[str, float]]:
    table = {}
    for kind in ALL_KINDS:
        detected = segments = localized = faults = 0
        for log, copy in zip(logs, copies):
            kinds = [f for f in copy.faults if f.kind is kind]
            if not kinds:
                continue
            segments += 1
            detected += bool(log.verdicts)
            flagged = set(_flagged(log))
            faults += len(kinds)
            localized += sum(f.sensor_id in flagged for f in kinds)
        if faults:
            table[kind.value] = {
                "faults": faults,
                "detection_rate": detected / segments,
                "localization_rate": localized / faults,
            }
    return table


def evaluate_segments(copies: Sequence[SegmentCopy], detector: Detector, mode: str) -> MetricsReport:
    """Run a detector over every segment copy and score the verdicts."""
    return score_segments([detector.detect(copy) for copy in copies], copies, mode)


def score_segments(logs: Sequence[VerdictLog], copies: Sequence[SegmentCopy], mode: str) -> MetricsReport:
    """Metrics and per-copy report rows; logs align with copies."""
    if len(logs) != len(copies):
        raise ValueError(f"{len(logs)} verdict logs for {len(copies)} segment copies")
    rows = []
    misses = 0
    for log, copy in zip(logs, copies):
        tp, fp, fn = _localization_counts(log, copy)
        delays, missed = localization_delays(log, copy)
        misses += missed
        rows.append(
            {
                "segment_id": copy.segment_id,
                "copy": copy.copy,
                "mode": mode,
                "injected_sensors": ";".join(copy.injected_sensors),
                "flagged_sensors": ";".join(_flagged(log)),
                "tp": tp,
                "fp": fp,
                "fn": fn,
                "first_correct_delay_min": min(delays) if delays else None,
                "mean_step_ms": log.mean_step_ms,
            }
        )
    return MetricsReport(
        mode=mode,
        detection=compute_detection_metrics(logs, copies),
        localization=compute_localization_metrics(logs, copies),
        localization_time_min=compute_localization_time(logs, copies),
        localization_misses=misses,
        per_fault_type=_per_fault_type(logs, copies),
        rows=rows,
        n_segments=sum(c.injected for c in copies),
        latency=step_latency(logs, copies, mode),
        verdict_logs=list(logs),
        copies=list(copies),
    )


@dataclass
class TrainedDetector:
    params: ModelParams
    stats: Dict[str, ChannelStats]
    baselines: Baselines
    profiles: Dict[str, ChannelProfile]
    loss_curve: List[float]
    checkpoint: bytes = b""


def fit_detector(
    trace: Trace,
    schema: HomeSchema,
    plan: ProtocolPlan,
    train_config: TrainConfig,
    verbose: bool = False,
) -> TrainedDetector:
    """
    Encoding stats and encoder from the training block, thresholds from validation.

    The trained parameters go through a checkpoint round trip before
    thresholds are calibrated, so the returned detector runs on exactly the
    float32 weights a saved checkpoint reloads to.
    """
    train_trace = trace.slice(*plan.train_window)
    val_trace = trace.slice(*plan.val_window)
    stats = calibrate_stats(train_trace, schema)
    windows = stack_windows(encode_stream(train_trace, stats, schema))
    trained, curve = train(windows, schema, train_config, verbose=verbose)
    checkpoint = save_checkpoint(trained, schema, stats)
    params, _, stats = load_checkpoint(checkpoint, schema)
    baselines = calibrate_baselines(params, encode_stream(val_trace, stats, schema), schema)
    return TrainedDetector(params, stats, baselines, profile_channels(train_trace, schema), curve, checkpoint)


def run_experiment(
    trace: Trace,
    schema: HomeSchema,
    mode: str,
    seeds: Sequence[int],
    train_config: Optional[TrainConfig] = None,
    protocol_config: Optional[ProtocolConfig] = None,
    fault_config: Optional[FaultConfig] = None,
    verbose: bool = True,
) -> MetricsReport:
    """
    Full protocol for every seed: train, calibrate, inject, detect; metrics
    are pooled over all seeds' segment copies. The report keeps every seed's
    detector and segment copies so the run can be written out and replayed.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not seeds:
        raise ValueError("run_experiment needs at least one seed")
    started = time.perf_counter()
    train_config = train_config or TrainConfig()
    plan = build_protocol(trace, protocol_config)
    if plan.scaled and verbose:
        print(f"⚠ Trace shorter than the canonical protocol; windows scaled by {plan.scale:.3f}")

    copies: List[SegmentCopy] = []
    logs: List[VerdictLog] = []
    detectors: Dict[int, TrainedDetector] = {}
    peak_rss = rss_mb()
    for seed in seeds:
        if verbose:
            print(f"✓ Seed {seed}: training on {plan.train_window[1] / HOUR:.1f} h")
        fitted = fit_detector(trace, schema, plan, replace(train_config, seed=int(seed)), verbose=False)
        detectors[int(seed)] = fitted
        seed_copies = build_segment_copies(trace, plan, schema, mode, int(seed), fitted.profiles, fault_config, f"s{seed}-")
        detector = ModelDetector(fitted.params, fitted.stats, fitted.baselines, schema)
        seed_logs = [detector.detect(copy) for copy in seed_copies]
        copies.extend(seed_copies)
        logs.extend(seed_logs)
        peak_rss = max(peak_rss, rss_mb())
        if verbose:
            print(f"✓ Seed {seed}: {sum(bool(log.verdicts) for log in seed_logs)} of {len(seed_logs)} copies flagged")

    report = score_segments(logs, copies, mode)
    report.scaled = plan.scaled
    report.seeds = [int(s) for s in seeds]
    report.detectors = detectors
    report.wall_clock_s = time.perf_counter() - started
    report.peak_rss_mb = peak_rss
    return report


# For testing this module independently
if __name__ == "__main__":
    from synthetic_home import SynthConfig, generate_synthetic_trace

    trace, schema, _ = generate_synthetic_trace(SynthConfig(duration_hours=20, seed=2))
    plan = build_protocol(trace)
    profiles = profile_channels(trace.slice(*plan.train_window), schema)
    copies = build_segment_copies(trace, plan, schema, "single", 1, profiles)
    oracle = evaluate_segments(copies, OracleDetector(), "single")
    print(f"✓ Oracle detection {oracle.detection}, localization {oracle.localization}, time {oracle.localization_time_min}")
