"""Ground-truth physical world and its master simulation clock.

The world owns the dispersion fields, the virtual devices, their network
links and the broker; one `advance()` drives everything in lockstep on a
fixed tick.  Identical scenario + seed produces a bit-identical event
stream: every RNG hangs off one seed tree, the network heap breaks ties
by insertion order, and no wall-clock value enters the simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bus.faults import FaultProfile
from .bus.simnet import SimNetwork
from .config import Scenario
from .dispersion import (Field, Grid, NestSpec, PointSource, WindField,
                         adjust_wind, nest_boundary, step_coarse, step_fine,
                         uniform_wind_field)
from .nodes import NodeSim, cmd_topic

RECONNECT_BACKOFF_S = 30.0


@dataclass
class TruthRecord:
    t: float
    x: float
    y: float
    speed_mps: float
    true_ch4_ppm: float


@dataclass
class WorldDiagnostics:
    injected_g: float = 0.0
    coarse_outflow_g: float = 0.0


class World:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.now = 0.0
        self.diagnostics = WorldDiagnostics()

        w, h = scenario.extent_m
        cc = scenario.grid.coarse_cell_m
        self.coarse_grid = Grid(nx=max(2, math.ceil(w / cc)),
                                ny=max(2, math.ceil(h / cc)), cell_m=cc,
                                diffusivity_m2s=scenario.diffusivity_m2s)
        self.coarse = Field(self.coarse_grid)

        self.fine: Field | None = None
        self.nest: NestSpec | None = None
        self._fine_wind: WindField | None = None
        self._fine_wind_key: tuple[float, float] | None = None
        if scenario.grid.fine_region is not None:
            x0, y0, x1, y1 = scenario.grid.fine_region
            fc = scenario.grid.fine_cell_m
            nx = max(2, round((x1 - x0) / fc))
            ny = max(2, round((y1 - y0) / fc))
            mask = self._obstacle_mask(x0, y0, nx, ny, fc)
            fine_grid = Grid(nx=nx, ny=ny, cell_m=fc, origin_m=(x0, y0),
                             diffusivity_m2s=scenario.diffusivity_m2s,
                             obstacle_mask=mask)
            self.fine = Field(fine_grid)
            self.nest = NestSpec(coarse=self.coarse_grid, fine=fine_grid)

        # seed tree: 0 -> per-node sensor noise, 1 -> per-client link faults,
        # 2 -> analytics extras (dropout plant, inverse noise)
        root = np.random.SeedSequence(scenario.seed)
        node_seeds, link_seeds, self.analytics_seed = root.spawn(3)
        node_children = node_seeds.spawn(max(len(scenario.nodes), 1))
        link_children = link_seeds.spawn(max(len(scenario.nodes), 1))

        self.net = SimNetwork()
        self.nodes: dict[str, NodeSim] = {}
        self._traj_by_node: dict[str, object] = {
            t.node_id: t for t in scenario.trajectories}
        self._next_reconnect: dict[str, float] = {}
        for k, cfg in enumerate(scenario.nodes):
            link_profile = FaultProfile(
                drop_prob=scenario.link.drop_prob,
                delay_ms=scenario.link.delay_ms,
                duplicate_prob=scenario.link.duplicate_prob,
                rng_seed=int(link_children[k].generate_state(1)[0]))
            client = self.net.add_client(cfg.node_id, profile=link_profile,
                                         clean_session=False)
            node = NodeSim(cfg, client,
                           distortion=scenario.distortion,
                           rng=np.random.Generator(np.random.PCG64(node_children[k])),
                           origin_latlon=scenario.origin_latlon,
                           faults=scenario.sensor_faults)
            self.nodes[cfg.node_id] = node
            self._next_reconnect[cfg.node_id] = 0.0
        self.truth: dict[str, list[TruthRecord]] = {n: [] for n in self.nodes}

    # ---- geometry helpers -----------------------------------------------------

    def _obstacle_mask(self, x0: float, y0: float, nx: int, ny: int,
                       cell: float) -> np.ndarray | None:
        if not self.scenario.obstacles:
            return None
        mask = np.zeros((ny, nx), dtype=bool)
        xs = x0 + (np.arange(nx) + 0.5) * cell
        ys = y0 + (np.arange(ny) + 0.5) * cell
        X, Y = np.meshgrid(xs, ys)
        for ob in self.scenario.obstacles:
            ox0, oy0, ox1, oy1 = ob.footprint
            mask |= (X >= ox0) & (X <= ox1) & (Y >= oy0) & (Y <= oy1)
        return mask if mask.any() else None

    def node_position(self, node_id: str, t: float) -> tuple[float, float, float]:
        """(x, y, speed) of a node at time t; trajectory nodes move."""
        node = self.nodes[node_id]
        traj_ref = node.cfg.trajectory_ref
        if traj_ref is not None:
            traj = next(tr for tr in self.scenario.trajectories if tr.id == traj_ref)
            return traj.position_at(t)
        x, y = node.cfg.position_m
        return x, y, 0.0

    # ---- environment queries ------------------------------------------------------

    def true_ch4(self, t: float, x: float, y: float) -> float:
        """Ambient + the finest dispersion field covering the point."""
        sc = self.scenario
        if not sc.contains(x, y):
            raise ValueError(f"position ({x}, {y}) outside extent")
        excess = 0.0
        if self.fine is not None and self.fine.grid.contains(x, y):
            excess = self.fine.sample(x, y)
        else:
            excess = self.coarse.sample(x, y)
        return sc.ambient_ch4_ppm + max(float(excess), 0.0)

    def sample_environment(self, t: float, x: float, y: float
                           ) -> tuple[float, float, float, float, float]:
        temp_c, rh_pct, press_hpa = self.scenario.meteorology.at(t)
        return (self.true_ch4(t, x, y), self.scenario.co2_ambient_ppm,
                temp_c, rh_pct, press_hpa)

    def active_sources(self, t: float) -> list[PointSource]:
        out = []
        for s in self.scenario.sources:
            q = s.strength_at(t)
            if q > 0:
                out.append(PointSource(s.position_m[0], s.position_m[1], q))
        return out

    def _fine_wind_for(self, ux: float, uy: float) -> WindField:
        key = (round(ux, 6), round(uy, 6))
        if self._fine_wind_key != key:
            if self.fine.grid.obstacle_mask is not None:
                self._fine_wind = adjust_wind(self.fine.grid, (ux, uy))
            else:
                self._fine_wind = uniform_wind_field(self.fine.grid, ux, uy)
            self._fine_wind_key = key
        return self._fine_wind

    def _coarse_wind_for(self, t: float):
        sc = self.scenario
        if not sc.wind.gridded:
            return sc.wind_at(t, 0.0, 0.0)
        # static gridded wind: staggered faces sampled once
        if getattr(self, "_coarse_wind_field", None) is None:
            g = self.coarse_grid
            x0, y0 = g.origin_m
            xs_f = x0 + np.arange(g.nx + 1) * g.cell_m
            ys_c = y0 + (np.arange(g.ny) + 0.5) * g.cell_m
            u = np.array([[sc.wind_at(0.0, xf, yc)[0] for xf in xs_f] for yc in ys_c])
            xs_c = x0 + (np.arange(g.nx) + 0.5) * g.cell_m
            ys_f = y0 + np.arange(g.ny + 1) * g.cell_m
            v = np.array([[sc.wind_at(0.0, xc, yf)[1] for xc in xs_c] for yf in ys_f])
            self._coarse_wind_field = WindField(g, u, v)
        return self._coarse_wind_field

    # ---- clock driver ------------------------------------------------------------------

    def connect_all(self) -> None:
        """Bring every node online and subscribe it to its command topic."""
        for node_id, node in self.nodes.items():
            self.net.connect_client(node_id)
            node.client.subscribe(cmd_topic(node_id), qos=1)
        self.net.run_until(self.now)

    def advance(self, dt: float) -> None:
        """Advance the whole world by ``dt`` seconds of simulation time."""
        if dt < 0:
            raise ValueError("dt must be >= 0")
        sc = self.scenario
        end = self.now + dt
        tick = sc.tick_s
        while self.now < end - 1e-9:
            t_next = min(self.now + tick, end)
            span = t_next - self.now
            sources = self.active_sources(self.now)
            wind = self._coarse_wind_for(self.now)

            coarse_before = self.coarse.copy() if self.nest is not None else None
            diag = step_coarse(self.coarse, wind, sources, span,
                               mixing_height_m=sc.mixing_height_m)
            self.diagnostics.injected_g += diag.injected_g
            self.diagnostics.coarse_outflow_g += diag.outflow_g

            if self.fine is not None:
                if sc.wind.gridded:
                    ux, uy = sc.wind_at(self.now, *self.fine.grid.origin_m)
                else:
                    ux, uy = wind
                fwind = self._fine_wind_for(ux, uy)
                ghosts = nest_boundary(coarse_before, self.coarse, self.nest,
                                       self.now + span / 2)
                fine_sources = [s for s in sources if self.fine.grid.contains(s.x, s.y)]
                step_fine(self.fine, fwind, fine_sources, ghosts, span,
                          mixing_height_m=sc.mixing_height_m)

            for node_id, node in self.nodes.items():
                x, y, speed = self.node_position(node_id, t_next)
                env = self.sample_environment(t_next, x, y)
                self.truth[node_id].append(TruthRecord(t_next, x, y, speed, env[0]))
                node.on_tick(t_next, (x, y), speed, env)

            self.net.run_until(t_next)
            self.net.service(t_next)
            # reconnect sweep after deliveries so in-flight CONNACKs count
            for node in self.nodes.values():
                self._ensure_connected(node, t_next)
            self.now = t_next

    def _ensure_connected(self, node: NodeSim, t: float) -> None:
        client = node.client
        if client.connected or node.state.phase.value == "SLEEP_FAULT":
            return
        if t >= self._next_reconnect[node.cfg.node_id]:
            self.net.connect_client(node.cfg.node_id)
            self._next_reconnect[node.cfg.node_id] = t + RECONNECT_BACKOFF_S

    # ---- calibration campaign -------------------------------------------------------

    def calibration_pairs(self, n: int, rng: np.random.Generator):
        """Reference-instrument campaign: swept truth through the sensor model.

        Returns (sample-like dict, reference ppm) pairs spanning wide
        concentration and environmental ranges, mirroring a lab + field
        training program.  The twin sees only these pairs, never the
        distortion coefficients.
        """
        from .nodes import Sample, battery_voltage
        pairs = []
        for k in range(n):
            true_ch4 = float(rng.uniform(self.scenario.ambient_ch4_ppm, 100.0))
            temp_c = float(rng.uniform(0.0, 45.0))
            rh_pct = float(rng.uniform(20.0, 90.0))
            press_hpa = float(rng.uniform(985.0, 1040.0))
            raw = self.scenario.distortion.apply(true_ch4, temp_c, rh_pct,
                                                 press_hpa, rng)
            sample = Sample(node_id="calib-bench", seq=k + 1, ts=float(k),
                            ch4_ppm_raw=raw, co2_ppm_raw=self.scenario.co2_ambient_ppm,
                            temp_c=temp_c, rh_pct=rh_pct, press_hpa=press_hpa,
                            batt_v=4.2, lat=0.0, lon=0.0, speed_mps=0.0)
            pairs.append((sample, true_ch4))
        return pairs
