"""
maskguard command-line interface.

Every subcommand reads its inputs from files, writes its artifacts to the --out
directory and records the action in <out>/logs/actions.log.

Exit codes: 0 success, 1 usage error, 2 data error (or gradcheck bound exceeded).
"""

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from data_storage import ArtifactStore, load_json, load_trace
from eval_harness import ProtocolConfig, run_experiment
from fault_injection import FaultConfig, apply_plan, load_plan, profile_channels, sample_multi_faults, sample_single_fault, save_plan
from feature_encoding import calibrate_stats, coactivation_sweep, encode_stream, stack_windows, stats_from_dict, stats_to_dict
from masked_encoder import (
    SEQ_LEN,
    TrainConfig,
    gradcheck_schema,
    gradient_check,
    load_checkpoint,
    random_params,
    save_checkpoint,
    train,
)
from runtime_inference import Baselines, calibrate_baselines, run_stream
from sensor_model import DataError, HomeSchema
from synthetic_home import GroundTruthActivityLog, SynthConfig, generate_synthetic_trace, room_pairs


DEFAULT_OUT = "out"
GRADCHECK_BOUND = 1e-3
HOUR = 3600.0


@dataclass
class RunConfig:
    model: TrainConfig = field(default_factory=TrainConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    faults: FaultConfig = field(default_factory=FaultConfig)
    storage: Dict = field(default_factory=lambda: {"format": "text", "log_actions": True})


def load_config(path: Optional[str] = None) -> RunConfig:
    """
    Load configuration from a JSON file; missing sections keep their defaults.

    Args:
        path: Config file; None returns the defaults
    """
    if path is None:
        return RunConfig()
    with open(path) as f:
        data = json.load(f)
    unknown = set(data) - {"model", "protocol", "synth", "faults", "storage"}
    if unknown:
        raise DataError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(
        model=TrainConfig.from_dict(data.get("model", {})),
        protocol=ProtocolConfig.from_dict(data.get("protocol", {})),
        synth=SynthConfig.from_dict(data.get("synth", {})),
        faults=FaultConfig.from_dict(data.get("faults", {})),
        storage=dict(data.get("storage", {"format": "text", "log_actions": True})),
    )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _hours_slice(trace, start_h: Optional[float], end_h: Optional[float]):
    if start_h is None and end_h is None:
        return trace
    start = (start_h or 0.0) * HOUR
    end = trace.duration if end_h is None else min(end_h * HOUR, trace.duration)
    if not end > start:
        raise DataError(f"empty time range [{start_h}, {end_h}) h")
    return trace.slice(start, end)


def cmd_gen_trace(args, config: RunConfig, store: ArtifactStore) -> Dict:
    synth = config.synth if args.hours is None else replace(config.synth, duration_hours=args.hours)
    trace, schema, activity = generate_synthetic_trace(synth)
    trace_path = store.save_trace(trace, schema, "trace")
    activity_path = store.save_json("activity.json", activity.to_dict())
    return {"trace": str(trace_path), "activity": str(activity_path), "events": len(trace), "D": schema.D}


def cmd_calibrate(args, config: RunConfig, store: ArtifactStore) -> Dict:
    trace, schema = load_trace(args.trace)
    stats = calibrate_stats(_hours_slice(trace, args.start_hours, args.end_hours), schema)
    path = store.save_json("stats.json", {"schema": schema.to_dict(), "stats": stats_to_dict(stats)})
    print(f"✓ Encoding stats for {len(stats)} sensors saved to {path}")
    return {"stats": str(path)}


def _load_stats(path: str):
    data = load_json(path)
    return HomeSchema.from_dict(data["schema"]), stats_from_dict(data["stats"])


def cmd_train(args, config: RunConfig, store: ArtifactStore) -> Dict:
    trace, _ = load_trace(args.trace)
    schema, stats = _load_stats(args.stats)
    windows = stack_windows(encode_stream(_hours_slice(trace, args.start_hours, args.end_hours), stats, schema))
    print(f"✓ Training on {len(windows)} windows (D={schema.D})")
    params, curve = train(windows, schema, config.model)
    checkpoint = store.save_bytes("model.turs", save_checkpoint(params, schema, stats))
    store.save_table("loss_curve.csv", _curve_frame(curve))
    print(f"✓ Checkpoint saved to {checkpoint} ({checkpoint.stat().st_size / 1e6:.3f} MB)")
    return {"checkpoint": str(checkpoint), "final_loss": curve[-1]}


def _curve_frame(curve: List[float]) -> pd.DataFrame:
    return pd.DataFrame({"epoch": np.arange(1, len(curve) + 1), "loss": curve})


def cmd_calibrate_thresholds(args, config: RunConfig, store: ArtifactStore) -> Dict:
    params, schema, stats = load_checkpoint(Path(args.checkpoint).read_bytes())
    trace, _ = load_trace(args.trace, schema)
    windows = encode_stream(_hours_slice(trace, args.start_hours, args.end_hours), stats, schema)
    baselines = calibrate_baselines(params, windows, schema)
    path = store.save_json("baselines.json", baselines.to_dict())
    print(f"✓ Thresholds for {len(baselines.theta)} sensors saved to {path}")
    return {"baselines": str(path)}


def cmd_inject(args, config: RunConfig, store: ArtifactStore) -> Dict:
    trace, schema = load_trace(args.trace)
    profile_source = trace if args.profile_trace is None else load_trace(args.profile_trace, schema)[0]
    profiles = profile_channels(profile_source, schema)
    if args.plan:
        specs = load_plan(load_json(args.plan), args.segment_id)
    elif args.mode == "multi":
        specs = sample_multi_faults(schema, (0.0, trace.duration), args.seed, config.faults, trace)
    else:
        specs = [sample_single_fault(schema, (0.0, trace.duration), args.seed, config.faults, trace)]
    injected, records = apply_plan(trace, specs, profiles, args.segment_id, config.faults)
    trace_path = store.save_trace(injected, schema, "injected")
    plan_path = store.save_json("plan.json", save_plan([r.spec for r in records]))
    for record in records:
        print(f"  {record.spec.kind.value:10s} {record.spec.sensor_id}  start={record.spec.start_tau:.0f}s  events={record.injected_event_count}")
    return {"trace": str(trace_path), "plan": str(plan_path), "faults": len(records)}


def cmd_run(args, config: RunConfig, store: ArtifactStore) -> Dict:
    params, schema, stats = load_checkpoint(Path(args.checkpoint).read_bytes())
    trace, _ = load_trace(args.trace, schema)
    baselines = Baselines.from_dict(load_json(args.baselines))
    log = run_stream(params, stats, baselines, trace, schema, args.segment_id)
    path = store.save_table("verdicts.csv", log.to_frame())
    print(f"✓ {len(log.verdicts)} verdicts over {log.n_intervals} intervals saved to {path}")
    return {"verdicts": str(path), "flagged": log.isolation.sensor_ids}


def cmd_evaluate(args, config: RunConfig, store: ArtifactStore) -> Dict:
    if args.trace:
        trace, schema = load_trace(args.trace)
    else:
        trace, schema, _ = generate_synthetic_trace(config.synth)
        print(f"✓ Generated a {config.synth.duration_hours:g} h synthetic home ({len(schema)} sensors)")
    seeds = args.seeds or [config.model.seed]
    report = run_experiment(trace, schema, args.mode, seeds, config.model, config.protocol, config.faults)
    store.save_json("report.json", report.to_dict())
    store.save_table("report.csv", report.rows_frame())
    store.save_table("verdicts.csv", report.verdicts_frame())
    store.save_json("plan.json", report.plans())
    for seed, fitted in report.detectors.items():
        store.save_bytes(f"model.s{seed}.turs", fitted.checkpoint)
        store.save_json(f"stats.s{seed}.json", {"schema": schema.to_dict(), "stats": stats_to_dict(fitted.stats)})
        store.save_json(f"baselines.s{seed}.json", fitted.baselines.to_dict())
        store.save_table(f"loss_curve.s{seed}.csv", _curve_frame(fitted.loss_curve))
    for copy in report.copies:
        if not copy.injected:
            store.save_trace(copy.trace, schema, f"segments/{copy.segment_id}")
    det, loc = report.detection, report.localization
    print(f"✓ Detection     P={det[0]:.3f} R={det[1]:.3f} F1={det[2]:.3f}")
    print(f"✓ Localization  P={loc[0]:.3f} R={loc[1]:.3f} F1={loc[2]:.3f}")
    if report.localization_time_min is not None:
        print(f"✓ Mean localization time {report.localization_time_min:.1f} min ({report.localization_misses} missed)")
    for stream_class, latency in report.latency.items():
        print(f"✓ Step latency ({stream_class}) mean {latency['mean_ms']:.2f} ms, p95 {latency['p95_ms']:.2f} ms")
    return {"report": str(store.path("report.json")), "detection_f1": det[2], "localization_f1": loc[2]}


def cmd_coactivation_gap(args, config: RunConfig, store: ArtifactStore) -> Dict:
    trace, schema = load_trace(args.trace)
    activity = GroundTruthActivityLog.from_dict(load_json(args.activity))
    same, cross = room_pairs(activity, schema)
    if not same or not cross:
        raise DataError("the activity log yields no same-room or no cross-room sensor pairs")
    table = coactivation_sweep(trace, same, cross, range(1, args.max_length + 1))
    path = store.save_table("coactivation.csv", table)
    best = int(table.loc[table["gap"].idxmax(), "L"])
    print(f"✓ Coactivation gap peaks at L={best}; table saved to {path}")
    return {"table": str(path), "best_L": best}


def cmd_gradcheck(args, config: RunConfig, store: ArtifactStore) -> Dict:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for model in range(args.models):
        schema = gradcheck_schema(args.D)
        params = random_params(schema, int(rng.integers(0, 2**32)))
        x = (rng.random((2, SEQ_LEN, schema.D)) < 0.5).astype(np.float64)
        bit_mask = np.zeros((2, schema.D), dtype=bool)
        for row in bit_mask:
            row[schema.sensors[int(rng.integers(len(schema)))].bits] = True
        errors = gradient_check(
            params, x, bit_mask, gamma=config.model.focal_gamma, seed=int(rng.integers(0, 2**31)), exhaustive=args.exhaustive
        )
        worst = max(worst, max(errors.values()))
    print(f"max relative error: {worst:.3e}")
    return {"max_relative_error": worst, "passed": worst < GRADCHECK_BOUND}


COMMANDS = {
    "gen-trace": cmd_gen_trace,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "calibrate-thresholds": cmd_calibrate_thresholds,
    "inject": cmd_inject,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "coactivation-gap": cmd_coactivation_gap,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskguard", description="Masked-reconstruction sensor failure detection")
    parser.add_argument("--config", default=os.environ.get("MASKGUARD_CONFIG"), help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="overrides model.seed and synth.seed")
    parser.add_argument("--out", default=os.environ.get("MASKGUARD_OUT_DIR", DEFAULT_OUT), help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def ranged(p):
        p.add_argument("--start-hours", type=float, default=None)
        p.add_argument("--end-hours", type=float, default=None)

    p = sub.add_parser("gen-trace", help="generate a synthetic home trace")
    p.add_argument("--hours", type=float, default=None)

    p = sub.add_parser("calibrate", help="compute encoding stats from a clean trace")
    p.add_argument("--trace", required=True)
    ranged(p)

    p = sub.add_parser("train", help="train the encoder")
    p.add_argument("--trace", required=True)
    p.add_argument("--stats", required=True)
    ranged(p)

    p = sub.add_parser("calibrate-thresholds", help="per-sensor thresholds from clean validation data")
    p.add_argument("--trace", required=True)
    p.add_argument("--checkpoint", required=True)
    ranged(p)

    p = sub.add_parser("inject", help="inject faults from a plan file or by sampling")
    p.add_argument("--trace", required=True)
    p.add_argument("--plan", default=None)
    p.add_argument("--mode", choices=("single", "multi"), default="single")
    p.add_argument("--profile-trace", default=None, help="clean trace to profile channels on")
    p.add_argument("--segment-id", default="")

    p = sub.add_parser("run", help="stream a trace through the detector")
    p.add_argument("--trace", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baselines", required=True)
    p.add_argument("--segment-id", default="")

    p = sub.add_parser("evaluate", help="full segment protocol")
    p.add_argument("--trace", default=None, help="defaults to a generated synthetic home")
    p.add_argument("--mode", choices=("single", "multi"), default="single")
    p.add_argument("--seeds", type=int, nargs="+", default=None)

    p = sub.add_parser("coactivation-gap", help="window-length sweep of the coactivation gap")
    p.add_argument("--trace", required=True)
    p.add_argument("--activity", required=True, help="activity.json written by gen-trace")
    p.add_argument("--max-length", type=int, default=15)

    p = sub.add_parser("gradcheck", help="finite-difference check of the encoder gradients")
    p.add_argument("--D", type=int, choices=(6, 12), default=6)
    p.add_argument("--models", type=int, default=1)
    p.add_argument("--exhaustive", action="store_true", help="perturb every parameter entry")
    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.model = replace(config.model, seed=args.seed)
            config.synth = replace(config.synth, seed=args.seed)
        else:
            args.seed = config.model.seed
        store = ArtifactStore(args.out, config.storage)
        started = time.perf_counter()
        result = COMMANDS[args.command](args, config, store)
        store.append_log(
            {
                "action": args.command,
                "inputs": {k: v for k, v in vars(args).items() if k != "command"},
                "result": result,
                "wall_clock_s": round(time.perf_counter() - started, 3),
            }
        )
    except (DataError, ValueError, OSError, KeyError) as e:
        print(f"✗ {e}", file=sys.stderr)
        return 2

    if args.command == "gradcheck" and not result["passed"]:
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(cli_main())
