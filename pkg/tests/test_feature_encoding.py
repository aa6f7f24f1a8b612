import numpy as np
import pytest

from feature_encoding import (
    ChannelStats,
    MIN_CALIBRATION_INTERVALS,
    activity_bits,
    bin_intervals,
    calibrate_stats,
    coactivation_gap,
    coactivation_sweep,
    encode_interval,
    encode_intervals,
    encode_stream,
    nearest_rank,
    stats_from_dict,
    stats_to_dict,
)
from sensor_model import DataError, SensorEvent, Trace, build_schema
from synthetic_home import SynthConfig, generate_synthetic_trace, room_pairs


def calibration_trace(n_intervals=120):
    """B fires (i % 4) + 1 times in interval i; T reports 10.0 three times per interval; S is silent."""
    events = []
    for i in range(n_intervals):
        base = 60.0 * i
        for k in range(i % 4 + 1):
            events.append(SensorEvent(base + 1.0 + k, "B", float(k % 2 == 0)))
        for k in range(3):
            events.append(SensorEvent(base + 10.0 + 15.0 * k, "T", 10.0))
    return Trace.from_events(events, duration=60.0 * n_intervals)


SCHEMA = build_schema(["B", "S"], ["T"])


def test_nearest_rank():
    assert nearest_rank([1, 2, 3, 4], 25) == 1
    assert nearest_rank([1, 2, 3, 4], 75) == 3
    assert nearest_rank([4, 3, 2, 1], 50) == 2
    assert nearest_rank([7], 25) == 7
    assert nearest_rank([], 25) == 0.0


def test_calibrate_stats_percentiles_and_dynamics(capsys):
    stats = calibrate_stats(calibration_trace(), SCHEMA)

    assert (stats["B"].p25, stats["B"].p75) == (1, 3)
    assert stats["B"].sigma_delta is None
    assert (stats["T"].p25, stats["T"].p75) == (3, 3)
    assert stats["T"].sigma_delta == 0.0 and stats["T"].med_delta == 0.0
    assert (stats["S"].p25, stats["S"].p75) == (0, 0)
    assert "⚠ Sensor S is silent" in capsys.readouterr().out


def test_calibrate_stats_needs_enough_intervals():
    with pytest.raises(DataError):
        calibrate_stats(calibration_trace(MIN_CALIBRATION_INTERVALS - 1), SCHEMA)


def test_stats_dict_roundtrip():
    stats = calibrate_stats(calibration_trace(), SCHEMA)
    assert stats_from_dict(stats_to_dict(stats)) == stats


def test_activity_bit_levels():
    assert activity_bits(0, 2, 8) == (0, 0)
    assert activity_bits(1, 2, 8) == (0, 1)
    assert activity_bits(5, 2, 8) == (1, 0)
    assert activity_bits(9, 2, 8) == (1, 1)


def test_activity_level_is_monotone_in_event_count():
    levels = [2 * hi + lo for hi, lo in (activity_bits(m, 2, 8) for m in range(21))]
    assert levels == sorted(levels)


def test_silent_in_training_encodes_high_when_active():
    assert activity_bits(1, 0, 0) == (1, 1)


def test_encode_interval_bit_layout():
    stats = {
        "B": ChannelStats("B", 2, 8),
        "S": ChannelStats("S", 1, 2),
        "T": ChannelStats("T", 1, 2, sigma_delta=1.0, med_delta=1.0),
    }
    vector = encode_interval({"B": [1.0] * 5, "T": [0.0, 5.0, 0.0]}, stats, SCHEMA, tau=7)

    assert vector.tau == 7
    assert vector.bits.dtype == np.uint8
    assert vector.bits.tolist() == [1, 0, 0, 0, 1, 1, 1, 1]


def test_constant_numeric_readings_are_calm():
    stats = {"B": ChannelStats("B", 1, 2), "S": ChannelStats("S", 1, 2), "T": ChannelStats("T", 1, 4, 0.0, 0.0)}
    bits = encode_interval({"T": [10.0, 10.0, 10.0]}, stats, SCHEMA).bits
    assert bits[4:].tolist() == [1, 0, 0, 0]

    single = encode_interval({"T": [10.0]}, stats, SCHEMA).bits
    assert single[6:].tolist() == [0, 0]


def test_encode_interval_needs_stats_for_every_sensor():
    with pytest.raises(ValueError):
        encode_interval({}, {"B": ChannelStats("B", 1, 2)}, SCHEMA)


def test_bin_intervals_groups_by_minute():
    trace = Trace.from_events(
        [SensorEvent(1.0, "B", 1.0), SensorEvent(59.9, "B", 0.0), SensorEvent(60.0, "T", 3.0), SensorEvent(61.0, "T", 4.0)],
        duration=180.0,
    )
    grouped = bin_intervals(trace, SCHEMA)

    assert len(grouped) == 3
    assert grouped[0]["B"].tolist() == [1.0, 0.0]
    assert grouped[1]["T"].tolist() == [3.0, 4.0]
    assert grouped[2] == {}


def test_encode_stream_window_count_and_overlap():
    trace = calibration_trace(10)
    stats = {"B": ChannelStats("B", 1, 3), "S": ChannelStats("S", 0, 0), "T": ChannelStats("T", 3, 3, 0.0, 0.0)}
    windows = list(encode_stream(trace, stats, SCHEMA))

    assert len(windows) == 6
    assert [w.start_tau for w in windows] == list(range(6))
    assert all(w.L == 5 for w in windows)
    for first, second in zip(windows, windows[1:]):
        np.testing.assert_array_equal(first.rows[1:], second.rows[:4])
    np.testing.assert_array_equal(windows[2].rows, encode_intervals(trace, stats, SCHEMA)[2:7])


def test_encode_stream_short_or_empty_trace():
    stats = {"B": ChannelStats("B", 1, 3), "S": ChannelStats("S", 0, 0), "T": ChannelStats("T", 3, 3, 0.0, 0.0)}
    assert list(encode_stream(calibration_trace(4), stats, SCHEMA)) == []

    silent = list(encode_stream(Trace.empty(600.0), stats, SCHEMA))
    assert len(silent) == 6
    assert all(not w.rows.any() for w in silent)


def coactivation_trace():
    events = []
    for i in range(20):
        base = 60.0 * i
        events += [SensorEvent(base + 1.0, "A", 1.0), SensorEvent(base + 2.0, "B", 1.0)]
        events.append(SensorEvent(base + 3.0, "C" if i % 2 == 0 else "D", 1.0))
    return Trace.from_events(events, duration=1200.0)


def test_coactivation_gap_handcrafted():
    trace = coactivation_trace()
    assert coactivation_gap(trace, [("A", "B")], [("C", "D")], 1) == pytest.approx(1.0)
    assert coactivation_gap(trace, [("A", "B")], [("C", "D")], 2) == pytest.approx(0.0)
    assert coactivation_gap(trace, [("A", "B")], [("A", "B")], 3) == 0.0


def test_coactivation_gap_rejects_bad_arguments():
    trace = coactivation_trace()
    with pytest.raises(ValueError):
        coactivation_gap(trace, [("A", "B")], [("C", "D")], 0)
    with pytest.raises(ValueError):
        coactivation_gap(trace, [], [("C", "D")], 2)
    with pytest.raises(DataError):
        coactivation_gap(trace, [("A", "B")], [("C", "D")], 21)


def test_coactivation_sweep_on_synthetic_home():
    trace, schema, log = generate_synthetic_trace(SynthConfig(duration_hours=48, seed=3))
    same, cross = room_pairs(log, schema)
    sweep = coactivation_sweep(trace, same, cross)

    assert sweep["L"].tolist() == list(range(1, 16))
    gaps = dict(zip(sweep["L"], sweep["gap"]))
    assert all(g > 0 for g in gaps.values())
    assert gaps[5] > 0.1
    assert gaps[5] > gaps[1]
    top3 = sweep.sort_values("gap", ascending=False, kind="stable")["L"].head(3).tolist()
    assert 5 in top3
