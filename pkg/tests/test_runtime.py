"""Runtime orchestration tests: command lifecycle, power faults, live hub."""

import pytest

from plumenet.config import load_scenario
from plumenet.nodes import Phase
from plumenet.runtime import LiveHub, TwinRuntime

SCENARIO = """
name = "rt-test"
diffusivity_m2s = 3.0
[extent]
width = 1000.0
height = 500.0
[wind]
schedule = [[0.0, 1.5, 0.0]]
[sim]
duration_s = 2400.0
seed = 6
[distortion]
a = 1.0
sigma_n = 0.1
[analysis]
threshold_ppm = 5.0
calibration_n = 400
[[nodes]]
node_id = "n01"
position_m = [300.0, 250.0]
[[nodes]]
node_id = "weak"
position_m = [600.0, 250.0]
battery_capacity_wh = 0.0008
"""


class TestCommandLifecycle:
    def test_command_to_sleeping_node_times_out(self):
        rt = TwinRuntime(load_scenario(SCENARIO))
        rt.prepare()
        rt.advance(10.0)  # ~2 Wh/h drain kills the 0.8 mWh battery fast
        assert rt.world.nodes["weak"].state.phase == Phase.SLEEP_FAULT
        rec = rt.dispatch_command("weak", "isolate")
        assert rec.state == "sent"
        rt.advance(1100.0)  # beyond three duty cycles
        assert rec.state == "timeout"
        assert rec.resolved_at is not None

    def test_command_states_are_terminal(self):
        rt = TwinRuntime(load_scenario(SCENARIO))
        rt.prepare()
        rt.advance(2.0)
        rec = rt.dispatch_command("n01", "isolate")
        rt.advance(10.0)
        assert rec.state == "acked"
        first_resolved = rec.resolved_at
        rt.advance(1200.0)  # timeout sweep must not touch resolved commands
        assert rec.state == "acked"
        assert rec.resolved_at == first_resolved

    def test_isolation_roundtrip_stops_and_restores_data(self):
        rt = TwinRuntime(load_scenario(SCENARIO))
        rt.prepare()
        rt.advance(400.0)  # one full cycle delivered
        n_before = len(rt.store.readings.get("n01", []))
        assert n_before > 0
        rt.dispatch_command("n01", "isolate")
        rt.advance(800.0)
        assert len(rt.store.readings["n01"]) == n_before  # no new data
        assert rt.list_nodes()[0]["isolated"] is True
        rt.dispatch_command("n01", "resume")
        rt.advance(800.0)
        assert len(rt.store.readings["n01"]) > n_before


class TestPowerFaultCycle:
    def test_dead_battery_node_goes_silent_then_stale(self):
        rt = TwinRuntime(load_scenario(SCENARIO))
        rt.prepare()
        rt.advance(1500.0)
        metrics = rt.metrics_now()
        assert metrics["weak"].reading_count == 0 or metrics["weak"].stale
        healthy = metrics["n01"]
        assert healthy.reading_count > 0 and not healthy.stale


class TestLiveHub:
    def test_ring_buffer_drops_oldest(self):
        hub = LiveHub(capacity=10)
        for k in range(25):
            hub.publish("reading", "n01", {"k": k}, float(k))
        assert len(hub.frames) == 10
        assert hub.oldest_available == 16
        frames = hub.since(0)
        assert [f.payload["k"] for f in frames] == list(range(15, 25))

    def test_kind_and_node_filters(self):
        hub = LiveHub()
        hub.publish("reading", "n01", {}, 0.0)
        hub.publish("event", "n02", {}, 0.0)
        hub.publish("metrics", None, {}, 0.0)
        assert [f.kind for f in hub.since(0, kinds={"event"})] == ["event"]
        # frames without a node (metrics) pass node filters
        got = hub.since(0, nodes={"n01"})
        assert {f.kind for f in got} == {"reading", "metrics"}


class TestHeatmapLayers:
    def test_unknown_layer_rejected(self):
        rt = TwinRuntime(load_scenario(SCENARIO))
        with pytest.raises(ValueError, match="unknown layer"):
            rt.heatmap((0, 0, 100, 100), 8, "psychedelic")

    def test_fine_layer_without_nest_rejected(self):
        rt = TwinRuntime(load_scenario(SCENARIO))
        with pytest.raises(ValueError, match="no fine grid"):
            rt.heatmap((0, 0, 100, 100), 8, "model_fine")
