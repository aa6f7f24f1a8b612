import json

import numpy as np
import pandas as pd
import pytest

from data_storage import ArtifactStore, load_json, load_trace
from sensor_model import TEXT_TIME_RESOLUTION_S, DataError
from synthetic_home import SynthConfig, generate_synthetic_trace


@pytest.fixture(scope="module")
def home():
    trace, schema, _ = generate_synthetic_trace(SynthConfig(duration_hours=2, seed=8))
    return trace, schema


def test_text_trace_roundtrip(tmp_path, home):
    trace, schema = home
    store = ArtifactStore(tmp_path)
    path = store.save_trace(trace, schema)

    assert path.name == "trace.txt"
    assert (tmp_path / "trace.meta.json").exists()
    loaded, loaded_schema = load_trace(path)
    assert loaded_schema == schema
    assert loaded.duration == trace.duration
    assert loaded.frame["sensor_id"].tolist() == trace.frame["sensor_id"].tolist()
    np.testing.assert_array_equal(loaded.frame["value"], trace.frame["value"])
    np.testing.assert_allclose(loaded.frame["timestamp"], trace.frame["timestamp"], rtol=0, atol=TEXT_TIME_RESOLUTION_S)


def test_parquet_trace_roundtrip_is_exact(tmp_path, home):
    trace, schema = home
    store = ArtifactStore(tmp_path, {"format": "parquet"})
    path = store.save_trace(trace, schema, "clean")

    assert path.name == "clean.parquet"
    loaded, loaded_schema = load_trace(path)
    assert loaded_schema == schema
    pd.testing.assert_frame_equal(loaded.frame, trace.frame, check_dtype=False)


def test_parquet_needs_sidecar(tmp_path, home):
    trace, schema = home
    path = ArtifactStore(tmp_path, {"format": "parquet"}).save_trace(trace, schema)
    (tmp_path / "trace.meta.json").unlink()
    with pytest.raises(DataError):
        load_trace(path)


def test_plain_casas_log_without_sidecar(tmp_path):
    path = tmp_path / "home.txt"
    path.write_text("2011-06-15 00:06:32.834414 M021 ON\n2011-06-15 00:06:33.988964 M021 OFF\n2011-06-15 00:07:01 T102 19.5\n")
    trace, schema = load_trace(path)
    assert schema.binary_ids == ["M021"]
    assert schema.numeric_ids == ["T102"]
    assert trace.duration == 60.0


def test_storage_config_validation(tmp_path):
    with pytest.raises(DataError):
        ArtifactStore(tmp_path, {"format": "hdf5"})
    with pytest.raises(DataError):
        ArtifactStore(tmp_path, {"compression": "gzip"})


def test_json_and_table_artifacts(tmp_path):
    store = ArtifactStore(tmp_path / "nested")
    store.save_json("baselines.json", {"B": 0.2, "A": 0.1})
    store.save_table("curve.csv", pd.DataFrame({"epoch": [1, 2], "loss": [0.3, 0.2]}))

    assert load_json(tmp_path / "nested" / "baselines.json") == {"A": 0.1, "B": 0.2}
    assert pd.read_csv(tmp_path / "nested" / "curve.csv")["loss"].tolist() == [0.3, 0.2]


def test_action_log(tmp_path):
    store = ArtifactStore(tmp_path)
    store.append_log({"action": "train", "result": {"final_loss": 0.05}})
    store.append_log({"action": "run"})

    lines = (tmp_path / "logs" / "actions.log").read_text().splitlines()
    assert len(lines) == 2
    entry = json.loads(lines[0])
    assert entry["action"] == "train"
    assert {"timestamp", "elapsed_s", "rss_mb"} <= set(entry)
    assert entry["rss_mb"] > 0


def test_action_log_can_be_disabled(tmp_path):
    store = ArtifactStore(tmp_path, {"log_actions": False})
    store.append_log({"action": "train"})
    assert not (tmp_path / "logs").exists()
