from datetime import datetime

import numpy as np
import pandas as pd
import pytest

from sensor_model import (
    TEXT_TIME_RESOLUTION_S,
    DataError,
    HomeSchema,
    SensorEvent,
    SensorKind,
    Trace,
    TraceParseError,
    UnknownSensorError,
    build_schema,
    parse_trace,
    serialize_trace,
)


SAMPLE = """# kitchen excerpt
2009-02-02 12:18:43.08 M01 ON
2009-02-02 12:18:44.30 M01 OFF

2009-02-02 12:19:02.00 T01 21.5 Kitchen
"""


def test_build_schema_assigns_contiguous_bit_ranges():
    schema = build_schema(["M1", "M2"], ["T1"])

    assert schema.D == 8
    assert schema.sensor_ids == ["M1", "M2", "T1"]
    assert list(schema.bit_offsets) == [0, 2, 4]
    assert list(schema.bit_widths) == [2, 2, 4]
    assert schema.sensor("T1").kind is SensorKind.NUMERIC
    assert list(schema.bit_mask(["M2"])) == [False, False, True, True, False, False, False, False]


def test_schema_rejects_duplicates_and_overlaps():
    with pytest.raises(DataError):
        build_schema(["M1", "M1"], [])
    with pytest.raises(DataError):
        build_schema(["M1"], ["M1"])
    with pytest.raises(ValueError):
        build_schema([], [])


def test_schema_dict_roundtrip():
    schema = build_schema(["M1", "D1"], ["T1", "L1"])
    assert HomeSchema.from_dict(schema.to_dict()) == schema
    with pytest.raises(DataError):
        HomeSchema.from_dict({"binary": ["M1"], "analog": ["T1"]})


def test_unknown_sensor_lookup():
    schema = build_schema(["M1"], [])
    with pytest.raises(UnknownSensorError):
        schema.index_of("M9")


def test_parse_trace_infers_schema_and_rebases_time():
    trace, schema = parse_trace(SAMPLE)

    assert schema.binary_ids == ["M01"]
    assert schema.numeric_ids == ["T01"]
    assert len(trace) == 3
    assert trace.frame["timestamp"].tolist() == pytest.approx([0.0, 1.22, 18.92])
    assert trace.frame["value"].tolist() == [1.0, 0.0, 21.5]
    assert trace.duration == 60.0


def test_parse_trace_with_origin_and_duration():
    origin = datetime(2009, 2, 2, 12, 0, 0)
    trace, _ = parse_trace(SAMPLE, origin=origin, duration=3600.0)

    assert trace.frame["timestamp"].iloc[0] == pytest.approx(18 * 60 + 43.08)
    assert trace.duration == 3600.0

    with pytest.raises(DataError):
        parse_trace(SAMPLE, origin=datetime(2009, 2, 2, 13, 0, 0), duration=3600.0)


def test_parse_trace_reports_line_numbers():
    bad = "2009-02-02 12:18:43.08 M01 ON\n2009-02-02 12:18:44.30 M01\n"
    with pytest.raises(TraceParseError) as excinfo:
        parse_trace(bad)
    assert excinfo.value.line_number == 2

    with pytest.raises(TraceParseError) as excinfo:
        parse_trace("2009-02-02 12:18:43.08 M01 MAYBE\n")
    assert excinfo.value.line_number == 1


def test_parse_trace_rejects_sensors_outside_schema():
    schema = build_schema(["M01"], [])
    with pytest.raises(UnknownSensorError):
        parse_trace(SAMPLE, schema)


def test_parse_trace_rejects_numeric_value_on_binary_sensor():
    schema = build_schema(["M01", "T01"], [])
    with pytest.raises(TraceParseError):
        parse_trace(SAMPLE, schema)


def test_parse_empty_log():
    trace, schema = parse_trace("# nothing here\n")
    assert len(trace) == 0
    assert len(schema) == 0


def test_serialize_then_parse_preserves_events():
    schema = build_schema(["M1"], ["T1"])
    events = [
        SensorEvent(0.5, "M1", 1.0),
        SensorEvent(12.25, "T1", 21.53),
        SensorEvent(61.0, "M1", 0.0),
        SensorEvent(119.999, "T1", -3.0),
    ]
    trace = Trace.from_events(events, duration=180.0)
    epoch = datetime(2000, 1, 1)

    text = serialize_trace(trace, schema, epoch)
    loaded, loaded_schema = parse_trace(text, schema, origin=epoch, duration=trace.duration)

    assert loaded_schema == schema
    assert loaded.frame["sensor_id"].tolist() == trace.frame["sensor_id"].tolist()
    assert loaded.frame["value"].tolist() == trace.frame["value"].tolist()
    np.testing.assert_allclose(loaded.frame["timestamp"], trace.frame["timestamp"], rtol=0, atol=TEXT_TIME_RESOLUTION_S)
    assert "M1 ON" in text and "M1 OFF" in text


def test_text_timestamps_round_to_microseconds():
    schema = build_schema(["M1"], [])
    trace = Trace.from_events([SensorEvent(10.0000004, "M1", 1.0), SensorEvent(20.0000006, "M1", 0.0)], duration=60.0)
    epoch = datetime(2000, 1, 1)

    loaded, _ = parse_trace(serialize_trace(trace, schema, epoch), schema, origin=epoch, duration=60.0)

    assert loaded.frame["timestamp"].tolist() == pytest.approx([10.0, 20.000001], abs=1e-9)


def test_trace_sort_is_stable_for_ties():
    frame = pd.DataFrame(
        {"timestamp": [5.0, 1.0, 5.0, 5.0], "sensor_id": ["A", "B", "C", "D"], "value": [1.0, 1.0, 0.0, 1.0]}
    )
    trace = Trace.from_frame(frame, duration=60.0)
    assert trace.frame["sensor_id"].tolist() == ["B", "A", "C", "D"]


def test_trace_validates_order_and_duration():
    unsorted = pd.DataFrame({"timestamp": [2.0, 1.0], "sensor_id": ["A", "A"], "value": [1.0, 0.0]})
    with pytest.raises(DataError):
        Trace(frame=unsorted, duration=60.0)
    with pytest.raises(DataError):
        Trace.from_events([SensorEvent(60.0, "A", 1.0)], duration=60.0)


def test_slice_rebases_to_zero():
    events = [SensorEvent(float(t), "A", 1.0) for t in (10, 70, 130, 190)]
    trace = Trace.from_events(events, duration=240.0)

    part = trace.slice(60.0, 180.0)

    assert part.duration == 120.0
    assert part.frame["timestamp"].tolist() == [10.0, 70.0]


def test_arrays_use_schema_order():
    schema = build_schema(["A", "B"], ["T"])
    trace = Trace.from_events([SensorEvent(1.0, "T", 20.0), SensorEvent(2.0, "A", 1.0)], duration=60.0)

    times, codes, values = trace.arrays(schema)

    assert times.tolist() == [1.0, 2.0]
    assert codes.tolist() == [2, 0]
    assert values.tolist() == [20.0, 1.0]
    with pytest.raises(UnknownSensorError):
        trace.arrays(build_schema(["A"], []))
