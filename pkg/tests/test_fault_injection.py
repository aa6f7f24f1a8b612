import numpy as np
import pandas as pd
import pytest

from fault_injection import (
    ALL_KINDS,
    SILENCING_KINDS,
    ChannelProfile,
    FaultConfig,
    FaultKind,
    FaultSpec,
    InjectionError,
    active_minutes,
    apply_plan,
    inject,
    load_plan,
    profile_channels,
    resolve_params,
    sample_fault_count,
    sample_multi_faults,
    sample_single_fault,
    save_plan,
)
from sensor_model import SensorEvent, SensorKind, Trace, UnknownSensorError, build_schema


SCHEMA = build_schema(["M1"], ["T1"])


def make_trace(values=(1.0, 2.0, 3.0, 4.0)):
    events = [SensorEvent(30.0, "M1", 1.0), SensorEvent(90.0, "M1", 0.0)]
    events += [SensorEvent(60.0 * i, "T1", v) for i, v in enumerate(values)]
    return Trace.from_events(events, duration=240.0)


def numeric_profile(mean=2.5, std=1.0):
    return ChannelProfile("T1", mean, std, 1.0)


def binary_profile():
    return ChannelProfile("M1", 0.5, 0.5, 0.0, SensorKind.BINARY)


def t1_values(trace):
    return trace.sensor_frame("T1")["value"].tolist()


def m1_events(trace):
    return trace.sensor_frame("M1").reset_index(drop=True)


def test_stuck_at_holds_value_inside_window():
    spec = FaultSpec(FaultKind.STUCK_AT, "T1", start_tau=60.0, duration_delta=120.0, params={"s": 9.0})
    out, count = inject(make_trace(), spec, numeric_profile())

    assert t1_values(out) == [1.0, 9.0, 9.0, 4.0]
    assert count == 2


def test_drift_grows_linearly_from_start():
    trace = make_trace(values=(0.0, 0.0, 0.0, 0.0))
    spec = FaultSpec(FaultKind.DRIFT, "T1", start_tau=60.0, duration_delta=180.0, params={"slope": 0.01})
    out, count = inject(trace, spec, numeric_profile())

    assert t1_values(out) == pytest.approx([0.0, 0.0, 0.6, 1.2])
    assert count == 3


def test_spike_alternates_sign():
    spec = FaultSpec(FaultKind.SPIKE, "T1", start_tau=0.0, duration_delta=240.0, params={"delta": 5.0})
    out, _ = inject(make_trace(), spec, numeric_profile())
    assert t1_values(out) == [6.0, -3.0, 8.0, -1.0]


def test_fail_stop_removes_later_readings():
    spec = FaultSpec(FaultKind.FAIL_STOP, "T1", start_tau=100.0)
    out, count = inject(make_trace(), spec, numeric_profile())

    assert t1_values(out) == [1.0, 2.0]
    assert count == 2


def test_outlier_adds_one_reading_six_sigma_away():
    profile = ChannelProfile("T1", 5.0, 0.0, 1.0)
    spec = FaultSpec(FaultKind.OUTLIER, "T1", start_tau=100.0, seed=3)
    trace = make_trace()
    out, count = inject(trace, spec, profile)

    assert count == 1
    assert len(out) == len(trace) + 1
    extra = out.frame[out.frame["timestamp"] == 100.0]
    assert extra["value"].iloc[0] in (11.0, -1.0)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_other_sensors_untouched(kind):
    trace = make_trace()
    spec = FaultSpec(kind, "T1", start_tau=60.0, duration_delta=120.0 if kind.windowed else 0.0, seed=7)
    out, _ = inject(trace, spec, numeric_profile())
    pd.testing.assert_frame_equal(m1_events(out), m1_events(trace))


def test_high_noise_is_reproducible():
    spec = FaultSpec(FaultKind.HIGH_NOISE, "T1", start_tau=0.0, duration_delta=240.0, seed=42)
    first, _ = inject(make_trace(), spec, numeric_profile())
    second, _ = inject(make_trace(), spec, numeric_profile())

    pd.testing.assert_frame_equal(first.frame, second.frame)
    assert t1_values(first) != t1_values(make_trace())


def test_input_trace_is_not_modified():
    trace = make_trace()
    before = trace.frame.copy()
    inject(trace, FaultSpec(FaultKind.STUCK_AT, "T1", 0.0, 240.0, params={"s": 0.0}), numeric_profile())
    pd.testing.assert_frame_equal(trace.frame, before)


def test_window_past_trace_end_is_clipped(capsys):
    spec = FaultSpec(FaultKind.STUCK_AT, "T1", start_tau=150.0, duration_delta=600.0, params={"s": 0.0})
    out, count = inject(make_trace(), spec, numeric_profile())

    assert "⚠" in capsys.readouterr().out
    assert t1_values(out) == [1.0, 2.0, 3.0, 0.0]
    assert count == 1


def test_fail_stop_on_silent_sensor_warns(capsys):
    spec = FaultSpec(FaultKind.FAIL_STOP, "M1", start_tau=200.0)
    out, count = inject(make_trace(), spec, binary_profile())

    assert count == 0
    assert "already silent" in capsys.readouterr().out
    assert len(out) == len(make_trace())


def test_binary_stuck_at_suppresses_state_changes():
    spec = FaultSpec(FaultKind.STUCK_AT, "M1", start_tau=0.0, duration_delta=60.0)
    out, count = inject(make_trace(), spec, binary_profile())

    assert count == 1
    assert m1_events(out)["timestamp"].tolist() == [90.0]


def test_binary_spike_is_a_burst_inside_the_window():
    trace = Trace.from_events([SensorEvent(5.0, "M1", 1.0)], duration=600.0)
    spec = FaultSpec(FaultKind.SPIKE, "M1", start_tau=120.0, duration_delta=300.0, seed=1)
    out, count = inject(trace, spec, binary_profile())

    added = out.sensor_frame("M1")
    added = added[added["timestamp"] >= 120.0]
    assert count == len(added) > 0
    assert added["timestamp"].max() < 240.0
    assert set(added["value"]) <= {0.0, 1.0}


def test_binary_outlier_is_one_on_off_pair():
    trace = Trace.from_events([SensorEvent(5.0, "M1", 1.0)], duration=600.0)
    out, count = inject(trace, FaultSpec(FaultKind.OUTLIER, "M1", start_tau=300.0), binary_profile())

    added = out.sensor_frame("M1").iloc[1:]
    assert count == 2
    assert added["timestamp"].tolist() == [300.0, 301.0]
    assert added["value"].tolist() == [1.0, 0.0]


def test_inject_rejects_bad_targets():
    with pytest.raises(InjectionError):
        inject(make_trace(), FaultSpec(FaultKind.FAIL_STOP, "T1", 240.0), numeric_profile())
    with pytest.raises(InjectionError):
        inject(make_trace(), FaultSpec(FaultKind.FAIL_STOP, "M1", 0.0), numeric_profile())
    with pytest.raises(InjectionError):
        FaultSpec(FaultKind.DRIFT, "T1", 0.0, duration_delta=0.0)
    with pytest.raises(InjectionError):
        FaultSpec(FaultKind.OUTLIER, "T1", -1.0)


def test_profile_channels():
    profiles = profile_channels(make_trace(), SCHEMA)

    assert profiles["T1"].mean == pytest.approx(2.5)
    assert profiles["T1"].std == pytest.approx(np.sqrt(1.25))
    assert profiles["T1"].event_rate == pytest.approx(1.0)
    assert profiles["M1"].kind is SensorKind.BINARY
    assert profiles["M1"].event_rate == pytest.approx(0.5)


def test_resolve_params_keeps_explicit_values():
    spec = FaultSpec(FaultKind.STUCK_AT, "T1", start_tau=90.0, duration_delta=60.0)
    assert resolve_params(spec, numeric_profile(), trace=make_trace()).params == {"s": 2.0}

    explicit = FaultSpec(FaultKind.STUCK_AT, "T1", start_tau=90.0, duration_delta=60.0, params={"s": -4.0})
    assert resolve_params(explicit, numeric_profile(), trace=make_trace()).params == {"s": -4.0}

    drift = resolve_params(FaultSpec(FaultKind.DRIFT, "T1", 0.0, 100.0), numeric_profile(std=0.5))
    assert drift.params["slope"] == pytest.approx(5.0 / 100.0)


def test_plan_records_replay_exactly(small_home):
    trace, schema, _ = small_home
    profiles = profile_channels(trace, schema)
    specs = sample_multi_faults(schema, (0.0, trace.duration), rng_seed=9)

    injected, records = apply_plan(trace, specs, profiles, segment_id="seg")
    replayed_specs = load_plan(save_plan([r.spec for r in records]))
    replayed, _ = apply_plan(trace, replayed_specs, profiles)

    pd.testing.assert_frame_equal(injected.frame, replayed.frame)
    assert all(r.segment_id == "seg" for r in records)


def test_apply_plan_rejects_unknown_sensor():
    with pytest.raises(UnknownSensorError):
        apply_plan(make_trace(), [FaultSpec(FaultKind.FAIL_STOP, "X9", 0.0)], {"T1": numeric_profile()})


def test_plan_loading_errors():
    with pytest.raises(InjectionError):
        load_plan({"kind": "drift"})
    with pytest.raises(InjectionError):
        load_plan([{"kind": "melt", "sensor": "T1", "start": 0}])
    with pytest.raises(InjectionError):
        load_plan([{"kind": "drift", "start": 0, "delta": 10}])


def test_sample_single_fault_is_deterministic_and_inside_window():
    schema = build_schema(["M1", "M2", "M3"], ["T1"])
    window = (3600.0, 7200.0)
    for seed in range(50):
        spec = sample_single_fault(schema, window, seed)
        assert spec == sample_single_fault(schema, window, seed)
        assert window[0] <= spec.start_tau
        assert spec.start_tau + spec.duration_delta <= window[1]


def test_sample_single_fault_kind_frequencies():
    schema = build_schema(["M1", "M2", "M3"], ["T1"])
    kinds = [sample_single_fault(schema, (0.0, 7200.0), seed).kind for seed in range(6000)]
    for kind in ALL_KINDS:
        assert abs(kinds.count(kind) / len(kinds) - 1 / 6) < 0.02


def test_single_sensor_schema_always_targets_it():
    schema = build_schema([], ["T1"])
    assert {sample_single_fault(schema, (0.0, 600.0), seed).sensor_id for seed in range(20)} == {"T1"}


def test_fault_count_distribution():
    rng = np.random.default_rng(0)
    counts = np.array([sample_fault_count(rng) for _ in range(10000)])

    assert counts.min() >= 1 and counts.max() <= 5
    assert 2.7 <= counts.mean() <= 3.1


def test_multi_faults_target_distinct_sensors(small_home):
    _, schema, _ = small_home
    for seed in range(200):
        specs = sample_multi_faults(schema, (0.0, 7200.0), seed)
        sensors = [s.sensor_id for s in specs]
        assert 1 <= len(specs) <= 5
        assert len(set(sensors)) == len(sensors)


def test_multi_faults_need_enough_sensors():
    with pytest.raises(ValueError):
        sample_multi_faults(build_schema(["M1", "M2"], ["T1"]), (0.0, 600.0), 0)


def test_fault_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        FaultConfig.from_dict({"delta_minutes": 10})


def test_active_minutes_counts_binary_events_and_numeric_changes():
    events = [SensorEvent(10.0, "M1", 1.0), SensorEvent(15.0, "M1", 0.0), SensorEvent(200.0, "M1", 1.0)]
    events += [SensorEvent(30.0 * i, "T1", v) for i, v in enumerate([1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 3.0])]
    trace = Trace.from_events(events, duration=240.0)

    assert active_minutes(trace, "M1", 0.0, 240.0) == 2
    assert active_minutes(trace, "M1", 60.0, 240.0) == 1
    # readings at 90 s and 150 s change the value
    assert active_minutes(trace, "T1", 0.0, 240.0, numeric=True) == 2
    assert active_minutes(trace, "T1", 0.0, 240.0) == 4


def test_silencing_faults_target_active_sensors(small_home):
    trace, schema, _ = small_home
    config = FaultConfig()
    window = (0.0, 6 * 3600.0)
    silencing = 0
    for seed in range(120):
        spec = sample_single_fault(schema, window, seed, config, trace)
        if spec.kind not in SILENCING_KINDS:
            continue
        silencing += 1
        numeric = spec.sensor_id in schema.numeric_ids
        end = spec.start_tau + config.delta_default_s
        assert active_minutes(trace, spec.sensor_id, spec.start_tau, end, numeric) >= config.min_active_minutes
    assert silencing > 20


def test_multi_faults_with_trace_stay_distinct_and_active(small_home):
    trace, schema, _ = small_home
    config = FaultConfig()
    for seed in range(40):
        specs = sample_multi_faults(schema, (0.0, 6 * 3600.0), seed, config, trace)
        sensors = [s.sensor_id for s in specs]
        assert len(set(sensors)) == len(sensors)
        for spec in specs:
            if spec.kind in SILENCING_KINDS:
                numeric = spec.sensor_id in schema.numeric_ids
                end = spec.start_tau + config.delta_default_s
                assert active_minutes(trace, spec.sensor_id, spec.start_tau, end, numeric) >= config.min_active_minutes


def test_no_active_target_falls_back_with_warning(capsys):
    schema = build_schema(["M1"], ["T1"])
    silent = Trace.from_events([SensorEvent(5.0, "T1", 1.0)], duration=3600.0)
    config = FaultConfig(sample_attempts=5)
    kinds = set()
    for seed in range(30):
        kinds.add(sample_single_fault(schema, (0.0, 3600.0), seed, config, silent).kind)
    assert kinds & set(SILENCING_KINDS)
    assert "no target active" in capsys.readouterr().out


def test_segment_keyed_plan_selects_its_entry():
    plan = {
        "s1-00": [{"kind": "fail_stop", "sensor": "M1", "start": 30.0, "delta": None, "params": {}, "seed": 1}],
        "s1-01": [],
    }
    specs = load_plan(plan, "s1-00")
    assert [(s.kind, s.sensor_id) for s in specs] == [(FaultKind.FAIL_STOP, "M1")]
    assert load_plan(plan, "s1-01") == []
    with pytest.raises(InjectionError):
        load_plan(plan, "s1-02")
