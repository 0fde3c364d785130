import numpy as np
import pandas as pd
import pytest

from rapidmotor import deploy
from rapidmotor.deploy import EpisodeTrace, ExtrinsicsSlot
from rapidmotor.hopper_env import factor_ranges
from rapidmotor.rma_train import load_bundle


def _trace(mode, ticks, period=10, latents=None):
    rows = []
    for t, tick in enumerate(ticks):
        row = {"t": t, "tick": tick, "torque_hip": 0.0, "torque_leg": 0.0, "contact": 0, "friction": 1.0,
               "payload": 0.0}
        if latents is not None:
            row["z0"] = float(latents[t])
        rows.append(row)
    return EpisodeTrace(mode=mode, period=period, rows=rows, latent_dim=0 if latents is None else 1)


# ------------------------------------------------------------------------------
# Slot
# ------------------------------------------------------------------------------

def test_slot_publishes_frozen_copies():
    source = np.array([1.0, 2.0])
    slot = ExtrinsicsSlot(source, tick=1)
    source[0] = 99.0
    value, tick = slot.read()
    assert value.tolist() == [1.0, 2.0]
    assert tick == 1
    with pytest.raises(ValueError):
        value[0] = 3.0

    slot.publish([4.0, 5.0], 2)
    assert slot.tick == 2
    assert slot.read()[0].tolist() == [4.0, 5.0]


# ------------------------------------------------------------------------------
# Staleness
# ------------------------------------------------------------------------------

def test_lockstep_audit_accepts_exact_period():
    report = deploy.staleness_audit(_trace("lockstep", [1] * 10 + [2] * 10 + [3] * 4))
    assert report.ok
    assert report.max_interval == 10
    assert report.refreshes == 2
    assert report.max_age == 10


def test_lockstep_audit_rejects_late_refresh():
    report = deploy.staleness_audit(_trace("lockstep", [1] * 10 + [2] * 11 + [3]))
    assert not report.ok
    with pytest.raises(deploy.StalenessViolation):
        deploy.require_fresh(report)


def test_realtime_audit_uses_tolerance():
    assert deploy.staleness_audit(_trace("realtime", [1] * 12 + [2] * 8 + [3] * 10)).ok
    late = deploy.staleness_audit(_trace("realtime", [1] * 25 + [2] * 5), tolerance_periods=2)
    assert late.bound == 20
    assert not late.ok


def test_empty_trace_audit():
    report = deploy.staleness_audit(_trace("lockstep", []))
    assert report.ok
    assert deploy.latency_summary(EpisodeTrace("lockstep", 10))["p99_ms"] == 0.0


# ------------------------------------------------------------------------------
# Extrinsics exports
# ------------------------------------------------------------------------------

def test_median_filter_removes_single_spike(tmp_path):
    trace = _trace("lockstep", [1] * 5, latents=[0.0, 0.0, 9.0, 0.0, 0.0])
    path = str(tmp_path / "extrinsics.csv")
    out = deploy.extrinsics_trace_export(trace, [0], path, window=5)
    assert out["z0"].tolist() == [0.0, 0.0, 9.0, 0.0, 0.0]
    assert out["z0_filtered"].tolist() == [0.0] * 5
    assert list(pd.read_csv(path).columns) == ["t", "z0", "z0_filtered", "torque_hip", "torque_leg", "contact",
                                              "friction", "payload"]


def test_export_rejects_missing_component():
    trace = _trace("lockstep", [1] * 3, latents=[0.0, 1.0, 2.0])
    with pytest.raises(IndexError):
        deploy.extrinsics_trace_export(trace, [3])


def test_extrinsics_shift():
    trace = _trace("lockstep", [1] * 8, latents=[0.0, 2.0, 0.0, 2.0, 4.0, 4.0, 4.0, 4.0])
    assert deploy.extrinsics_shift(trace, 4)[0] == pytest.approx(3.0)
    assert deploy.extrinsics_shift(trace, 1).tolist() == [0.0]


# ------------------------------------------------------------------------------
# Scenarios
# ------------------------------------------------------------------------------

def test_parse_scenario():
    scenario = deploy.parse_scenario(
        "seed = 4\n"
        "terrain.z_scale = 0.0  # flat floor\n"
        "initial.friction = 0.8\n"
        "event.300.friction = 0.05\n"
        "event.300.payload = 0.1\n"
        "event.20.motor_hip = 0.9\n")
    assert scenario.seed == 4
    assert scenario.z_scale == 0.0
    assert scenario.initial == {"friction": 0.8}
    assert scenario.events[300] == {"friction": 0.05, "payload": 0.1}
    assert scenario.event_steps() == [20, 300]


@pytest.mark.parametrize("text", [
    "initial.gravity = 1.0",
    "event.soon.friction = 0.1",
    "initial.friction = slippery",
    "wind = 3",
])
def test_parse_scenario_rejects(text):
    with pytest.raises(ValueError):
        deploy.parse_scenario(text)


def test_load_scenario_file(tmp_path):
    path = tmp_path / "oil.txt"
    path.write_text("event.500.friction = 0.05\n")
    assert deploy.load_scenario(str(path)).events == {500: {"friction": 0.05}}


def test_canned_scenarios():
    assert deploy.friction_drop_scenario(step=200).events == {200: {"friction": 0.05}}
    payload = deploy.payload_drop_scenario(step=100, payload=0.4)
    assert payload.initial == {"payload": 0.4}
    assert payload.events == {100: {"payload": 0.0}}


# ------------------------------------------------------------------------------
# Runtime
# ------------------------------------------------------------------------------

def test_lockstep_refreshes_every_period(trained_run):
    bundle = load_bundle(trained_run["phase2"])
    trace = deploy.run_episode(bundle, trained_run["config"], "lockstep", seed=1)

    ticks = trace.ticks()
    assert trace.steps >= 1
    assert np.array_equal(ticks, 1 + np.arange(trace.steps) // 10)
    assert deploy.staleness_audit(trace).ok
    assert trace.latents().shape == (trace.steps, 8)
    assert len(trace.latencies) == trace.steps


def test_lockstep_is_deterministic(trained_run):
    bundle = load_bundle(trained_run["phase2"])
    a = deploy.run_episode(bundle, trained_run["config"], "lockstep", seed=2)
    b = deploy.run_episode(bundle, trained_run["config"], "lockstep", seed=2)
    pd.testing.assert_frame_equal(a.frame(), b.frame())


def test_scripted_friction_change(trained_run):
    bundle = load_bundle(trained_run["phase2"])
    scenario = deploy.friction_drop_scenario(step=5, before=1.0, after=0.05, seed=3)
    frame = deploy.run_episode(bundle, trained_run["config"], scenario=scenario, max_steps=30).frame()
    assert (frame.loc[frame["t"] < 5, "friction"] == 1.0).all()
    assert (frame.loc[frame["t"] >= 5, "friction"] == 0.05).all()


def test_scenario_seed_zero_is_kept(trained_run):
    bundle = load_bundle(trained_run["phase2"])
    config = trained_run["config"]
    assert deploy.parse_scenario("seed = 0\n").seed == 0
    assert deploy.parse_scenario("initial.friction = 1.0\n").seed is None

    pinned = deploy.run_episode(bundle, config, seed=5, scenario=deploy.Scenario(seed=0), max_steps=20).frame()
    zero = deploy.run_episode(bundle, config, seed=0, max_steps=20).frame()
    five = deploy.run_episode(bundle, config, seed=5, max_steps=20).frame()
    pd.testing.assert_frame_equal(pinned, zero)
    assert pinned["friction"].iloc[0] != five["friction"].iloc[0]


def test_scripted_scenario_starts_from_training_midpoints(trained_run):
    bundle = load_bundle(trained_run["phase2"])
    scenario = deploy.payload_drop_scenario(step=500, payload=0.4, seed=1)
    frame = deploy.run_episode(bundle, trained_run["config"], scenario=scenario, max_steps=10).frame()
    low, high = factor_ranges("train").friction
    assert frame["friction"].iloc[0] == pytest.approx(0.5 * (low + high))
    assert frame["payload"].iloc[0] == pytest.approx(0.4)


def test_deploy_needs_adaptation_module(trained_run):
    with pytest.raises(ValueError, match="no adaptation module"):
        deploy.run_episode(load_bundle(trained_run["phase1"]), trained_run["config"])
    with pytest.raises(ValueError, match="unknown deploy mode"):
        deploy.run_episode(load_bundle(trained_run["phase2"]), trained_run["config"], mode="async")


@pytest.mark.slow
def test_realtime_estimator_keeps_up(trained_run):
    bundle = load_bundle(trained_run["phase2"])
    trace = deploy.run_episode(bundle, trained_run["config"], "realtime", seed=1, max_steps=60)
    report = deploy.staleness_audit(trace, tolerance_periods=2)
    assert report.mode == "realtime"
    assert report.ok
