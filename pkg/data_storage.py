"""
Data Storage Module
Handles persistence of run artifacts: traces (text or parquet), JSON
artifacts, CSV tables, checkpoints and the JSON-lines action log.
"""

import json
import os
import time
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import pandas as pd
import psutil

from sensor_model import DataError, HomeSchema, Trace, parse_trace, serialize_trace


TRACE_EPOCH = datetime(2000, 1, 1)


def rss_mb() -> float:
    """Resident set size of this process in MiB."""
    return psutil.Process().memory_info().rss / (1024.0 * 1024.0)


FORMATS = ("text", "parquet")


class ArtifactStore:
    """
    Artifact directory of one run.

    Traces are written with a sidecar `<name>.meta.json` holding the schema
    and duration, so a reload reproduces the original stream exactly.
    """

    def __init__(self, out_dir: Union[str, Path], storage_config: Optional[Dict] = None):
        """
        Args:
            out_dir: Artifact directory (created if missing)
            storage_config: The `storage` section of the config file
        """
        config = dict(storage_config or {})
        unknown = set(config) - {"format", "log_actions"}
        if unknown:
            raise DataError(f"unknown storage config keys: {sorted(unknown)}")
        self.format = config.get("format", "text")
        if self.format not in FORMATS:
            raise DataError(f"storage format must be one of {FORMATS}, got {self.format!r}")
        self.log_actions = bool(config.get("log_actions", True))
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._started = time.perf_counter()

    def path(self, name: str) -> Path:
        filepath = self.out_dir / name
        filepath.parent.mkdir(parents=True, exist_ok=True)
        return filepath

    def save_trace(self, trace: Trace, schema: HomeSchema, name: str = "trace") -> Path:
        """Save a trace in the configured format; returns the trace file path."""
        meta = {"schema": schema.to_dict(), "duration": trace.duration, "epoch": TRACE_EPOCH.isoformat()}
        if self.format == "parquet":
            filepath = self.path(f"{name}.parquet")
            trace.frame.to_parquet(filepath, index=False, engine="pyarrow")
        else:
            filepath = self.path(f"{name}.txt")
            filepath.write_text(serialize_trace(trace, schema, TRACE_EPOCH))
        self.save_json(f"{name}.meta.json", meta)
        print(f"✓ Trace saved to {filepath} ({len(trace)} events)")
        return filepath

    def save_json(self, name: str, payload) -> Path:
        filepath = self.path(name)
        filepath.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return filepath

    def save_table(self, name: str, frame: pd.DataFrame) -> Path:
        filepath = self.path(name)
        frame.to_csv(filepath, index=False)
        return filepath

    def save_bytes(self, name: str, data: bytes) -> Path:
        filepath = self.path(name)
        filepath.write_bytes(data)
        return filepath

    def append_log(self, log_entry: Dict) -> None:
        """
        Append an action log entry to logs/actions.log.

        Args:
            log_entry: JSON-serializable action record; timestamp, elapsed
                seconds and resident memory are added
        """
        if not self.log_actions:
            return
        log_dir = self.path("logs")
        log_dir.mkdir(exist_ok=True)
        entry = dict(log_entry)
        entry["timestamp"] = datetime.now().isoformat()
        entry["elapsed_s"] = round(time.perf_counter() - self._started, 3)
        entry["rss_mb"] = round(rss_mb(), 1)
        with open(log_dir / "actions.log", "a") as f:
            f.write(json.dumps(entry, sort_keys=True, default=str) + "\n")


def load_json(path: Union[str, Path]):
    with open(path) as f:
        return json.load(f)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name.rsplit(".", 1)[0] + ".meta.json")


def load_trace(path: Union[str, Path], schema: Optional[HomeSchema] = None) -> Tuple[Trace, HomeSchema]:
    """
    Load a trace file written by ArtifactStore.save_trace, or any CASAS-style log.

    A sidecar meta file, when present, supplies schema, epoch and duration;
    otherwise the schema is inferred and timestamps re-base to the first event.
    """
    path = Path(path)
    meta_path = _meta_path(path)
    meta = load_json(meta_path) if meta_path.exists() else None
    if schema is None and meta is not None:
        schema = HomeSchema.from_dict(meta["schema"])

    if path.suffix == ".parquet":
        if schema is None or meta is None:
            raise DataError(f"parquet trace {path} needs its {meta_path.name} sidecar")
        frame = pd.read_parquet(path, engine="pyarrow")
        trace = Trace.from_frame(frame, float(meta["duration"]))
        unknown = set(trace.frame["sensor_id"]) - set(schema.sensor_ids)
        if unknown:
            raise DataError(f"trace {path} has sensors outside its schema: {sorted(unknown)}")
    else:
        with open(path) as f:
            if meta is not None:
                trace, schema = parse_trace(
                    f, schema, origin=datetime.fromisoformat(meta["epoch"]), duration=float(meta["duration"])
                )
            else:
                trace, schema = parse_trace(f, schema)
    print(f"✓ Loaded {len(trace)} events from {path}")
    return trace, schema


# For testing this module independently
if __name__ == "__main__":
    import tempfile

    from synthetic_home import SynthConfig, generate_synthetic_trace

    trace, schema, _ = generate_synthetic_trace(SynthConfig(duration_hours=2, seed=4))
    with tempfile.TemporaryDirectory() as tmp:
        store = ArtifactStore(tmp, {"format": "parquet"})
        filepath = store.save_trace(trace, schema)
        loaded, _ = load_trace(filepath)
        store.append_log({"action": "demo", "events": len(loaded)})
        print((Path(tmp) / "logs" / "actions.log").read_text())
