"""Scenario parsing/validation and world clock tests."""

import math

import numpy as np
import pytest

from plumenet.config import (ScenarioError, Trajectory, load_scenario,
                             parse_document, scenario_from_document)
from plumenet.nodes import decode_batch
from plumenet.world import World

MINIMAL = """
name = "mini"
[extent]
width = 1000.0
height = 500.0
[[nodes]]
node_id = "n01"
position_m = [100.0, 100.0]
"""


class TestParser:
    def test_sections_and_tables(self):
        doc = parse_document("""
        # comment
        name = "x"           # trailing comment
        flag = true
        [sect]
        a = 1
        b = 2.5
        [[rows]]
        id = "r1"
        [[rows]]
        id = "r2"
        """)
        assert doc["name"] == "x"
        assert doc["flag"] is True
        assert doc["sect"] == {"a": 1, "b": 2.5}
        assert [r["id"] for r in doc["rows"]] == ["r1", "r2"]

    def test_nested_and_multiline_arrays(self):
        doc = parse_document("""
        pair = [1.0, 2.0]
        rows = [[0, 1, 2],
                [10, 3, 4],
                [20, 5, 6]]
        """)
        assert doc["pair"] == [1.0, 2.0]
        assert doc["rows"] == [[0, 1, 2], [10, 3, 4], [20, 5, 6]]

    def test_bad_line_raises(self):
        with pytest.raises(ValueError):
            parse_document("this is not a key value line")


class TestScenarioValidation:
    def test_minimal_document_gets_defaults(self):
        sc = load_scenario(MINIMAL)
        assert sc.ambient_ch4_ppm == 1.9
        assert sc.mixing_height_m == 50.0
        assert sc.diffusivity_m2s > 0
        assert len(sc.nodes) == 1

    def test_node_outside_extent(self):
        with pytest.raises(ScenarioError, match="outside extent"):
            load_scenario(MINIMAL.replace("[100.0, 100.0]", "[-5.0, 0.0]"))

    def test_all_violations_reported_not_just_first(self):
        bad = """
        name = "bad"
        diffusivity_m2s = -1.0
        [extent]
        width = 0.0
        height = 100.0
        [[nodes]]
        node_id = "n01"
        position_m = [5000.0, 5.0]
        [[sources]]
        id = "s1"
        position_m = [10.0, 10.0]
        strength_g_s = -2.0
        """
        with pytest.raises(ScenarioError) as err:
            load_scenario(bad)
        assert len(err.value.problems) >= 3

    def test_source_inside_obstacle_rejected(self):
        bad = MINIMAL + """
        [[sources]]
        id = "s1"
        position_m = [50.0, 50.0]
        strength_g_s = 1.0
        [[obstacles]]
        id = "o1"
        footprint = [eval0, 0.0, 100.0, 100.0]
        """.replace("eval0", "0.0")
        with pytest.raises(ScenarioError, match="overlaps obstacle"):
            load_scenario(bad)

    def test_trajectory_times_must_increase(self):
        bad = MINIMAL + """
        [[trajectories]]
        id = "t1"
        node_id = "m01"
        waypoints = [[0.0, 1.0, 1.0], [0.0, 2.0, 2.0]]
        """
        with pytest.raises(ScenarioError, match="strictly increasing"):
            load_scenario(bad)


class TestWindInterpolation:
    def test_single_entry_constant(self):
        sc = load_scenario(MINIMAL + '\n[wind]\nschedule = [[0.0, 2.0, 0.0]]\n')
        assert sc.wind_at(500.0, 10.0, 10.0) == (2.0, 0.0)

    def test_linear_interpolation_midpoint(self):
        sc = load_scenario(MINIMAL + """
        [wind]
        schedule = [[0.0, 2.0, 0.0], [100.0, 0.0, 2.0]]
        """)
        assert sc.wind_at(50.0, 0.0, 0.0) == pytest.approx((1.0, 1.0))

    def test_clamped_beyond_last_entry(self):
        sc = load_scenario(MINIMAL + """
        [wind]
        schedule = [[0.0, 2.0, 0.0], [100.0, 0.0, 2.0]]
        """)
        assert sc.wind_at(1e9, 0.0, 0.0) == pytest.approx((0.0, 2.0))

    def test_gridded_wind_bilinear(self):
        sc = load_scenario(MINIMAL + """
        [wind]
        grid_u = [[1.0, 3.0], [1.0, 3.0]]
        grid_v = [[0.0, 0.0], [2.0, 2.0]]
        """)
        ux, uy = sc.wind_at(0.0, 500.0, 250.0)  # domain center
        assert ux == pytest.approx(2.0)
        assert uy == pytest.approx(1.0)


class TestTrajectory:
    def _traj(self):
        return Trajectory("t1", [(0.0, 0.0, 0.0), (10.0, 100.0, 0.0)], "m01")

    def test_exact_waypoint(self):
        assert self._traj().position_at(10.0) == (100.0, 0.0, 0.0)

    def test_segment_midpoint_and_speed(self):
        x, y, speed = self._traj().position_at(5.0)
        assert (x, y) == (50.0, 0.0)
        assert speed == pytest.approx(10.0)

    def test_clamp_before_start(self):
        x, y, speed = self._traj().position_at(-5.0)
        assert (x, y, speed) == (0.0, 0.0, 0.0)


SIM_SCENARIO = """
name = "simtest"
diffusivity_m2s = 3.0
[extent]
width = 1600.0
height = 800.0
[wind]
schedule = [[0.0, 2.0, 0.0]]
[sim]
duration_s = 720.0
seed = 11
tick_s = 1.0
[[sources]]
id = "s1"
position_m = [200.0, 400.0]
strength_g_s = 1.0
[[nodes]]
node_id = "n01"
position_m = [500.0, 400.0]
[[nodes]]
node_id = "n02"
position_m = [900.0, 400.0]
"""


class TestWorldClock:
    def test_zero_advance_is_identity(self):
        w = World(load_scenario(SIM_SCENARIO))
        w.connect_all()
        before = w.coarse.values.copy()
        w.advance(0.0)
        assert w.now == 0.0
        np.testing.assert_array_equal(w.coarse.values, before)

    def test_one_cycle_gives_each_node_one_uplink(self):
        w = World(load_scenario(SIM_SCENARIO))
        w.connect_all()
        batches = []
        twin = w.net.add_client("twin", on_message=lambda t, p, pk: batches.append(
            decode_batch(p)))
        w.net.connect_client("twin")
        w.net.run_until(0.0)
        twin.subscribe("aimnet/v1/+/data", qos=1)
        w.advance(360.0)
        by_node = {}
        for b in batches:
            by_node.setdefault(b["node_id"], []).append(b)
        assert set(by_node) == {"n01", "n02"}
        for node_batches in by_node.values():
            assert sum(len(b["samples"]) for b in node_batches) == 75

    def test_environment_ambient_far_upwind(self):
        w = World(load_scenario(SIM_SCENARIO))
        ch4, co2, temp, rh, press = w.sample_environment(0.0, 50.0, 100.0)
        assert ch4 == pytest.approx(1.9)
        assert co2 == pytest.approx(420.0)

    def test_plume_raises_downwind_concentration(self):
        w = World(load_scenario(SIM_SCENARIO))
        w.advance(600.0)
        downwind = w.true_ch4(600.0, 500.0, 400.0)
        upwind = w.true_ch4(600.0, 50.0, 400.0)
        # depth-integrated analytic excess at 300 m is ~0.2 ppm
        assert downwind > upwind + 0.15

    def test_determinism_identical_streams(self):
        def run():
            w = World(load_scenario(SIM_SCENARIO))
            w.connect_all()
            frames = []
            twin = w.net.add_client(
                "twin", on_message=lambda t, p, pk: frames.append((t, bytes(p))))
            w.net.connect_client("twin")
            w.net.run_until(0.0)
            twin.subscribe("aimnet/v1/+/data", qos=1)
            w.advance(400.0)
            return frames
        assert run() == run()

    def test_clock_monotone(self):
        w = World(load_scenario(SIM_SCENARIO))
        w.connect_all()
        seen = [w.now]
        for _ in range(5):
            w.advance(17.3)
            assert w.now > seen[-1]
            seen.append(w.now)
        assert w.now == pytest.approx(5 * 17.3)

    def test_fine_grid_preferred_inside_nest(self):
        sc_text = SIM_SCENARIO + """
        [grid]
        coarse_cell_m = 32.0
        fine_cell_m = 5.0
        fine_region = [320.0, 240.0, 640.0, 560.0]
        """
        w = World(load_scenario(sc_text))
        w.advance(400.0)
        # inside the nest the fine field is sampled; outside, the coarse one
        inside = w.true_ch4(400.0, 500.0, 400.0)
        assert inside > 1.9
        assert w.fine is not None
        fine_val = 1.9 + w.fine.sample(500.0, 400.0)
        assert inside == pytest.approx(fine_val)


class TestCalibrationCampaign:
    def test_pairs_span_wide_ranges(self):
        w = World(load_scenario(SIM_SCENARIO))
        rng = np.random.default_rng(3)
        pairs = w.calibration_pairs(200, rng)
        refs = np.array([ref for _, ref in pairs])
        assert refs.min() < 15.0 and refs.max() > 80.0
        assert len(pairs) == 200
