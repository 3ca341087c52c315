"""Virtual sensor device: duty-cycled sampling, sensor physics, power, uplink.

Each node is a state machine advanced only by the simulation clock.  A
cycle is 5 minutes of sampling followed by 1 minute of uplink; mobile
nodes in live mode publish each sample immediately instead.  The sensor
forward model applies a pumped-inlet first-order lag and an affine
environmental distortion with Gaussian noise whose coefficients belong to
the scenario (the analytics layer never sees them, it has to calibrate
them away).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .bus.client import MqttClient

CYCLE_SAMPLING_S = 300.0
CYCLE_UPLINK_S = 60.0
MIN_SAMPLE_PERIOD_S = 4.0
BATCH_MAX_SAMPLES = 15
BATCH_SPACING_S = 4.0
PAYLOAD_SIZE_CAP = 4096
RESUME_BATTERY_FRACTION = 0.05

DATA_TOPIC = "aimnet/v1/{node_id}/data"
CMD_TOPIC = "aimnet/v1/{node_id}/cmd"
STATUS_TOPIC = "aimnet/v1/{node_id}/status"


def data_topic(node_id: str) -> str:
    return DATA_TOPIC.format(node_id=node_id)


def cmd_topic(node_id: str) -> str:
    return CMD_TOPIC.format(node_id=node_id)


def status_topic(node_id: str) -> str:
    return STATUS_TOPIC.format(node_id=node_id)


# equirectangular anchor: scenario meters <-> degrees
def meters_to_latlon(x: float, y: float, origin: tuple[float, float]) -> tuple[float, float]:
    lat0, lon0 = origin
    lat = lat0 + y / 111_320.0
    lon = lon0 + x / (111_320.0 * math.cos(math.radians(lat0)))
    return lat, lon


@dataclass(frozen=True)
class SolarConfig:
    peak_mw: float = 0.0
    sunrise_h: float = 6.0
    sunset_h: float = 18.0

    def irradiance_fraction(self, t_s: float) -> float:
        """Half-sine day profile from the simulation clock (t=0 is midnight)."""
        if self.peak_mw <= 0:
            return 0.0
        hour = (t_s / 3600.0) % 24.0
        if not self.sunrise_h <= hour <= self.sunset_h:
            return 0.0
        return math.sin(math.pi * (hour - self.sunrise_h)
                        / (self.sunset_h - self.sunrise_h))

    def irradiance_integral_h(self, t_s: float) -> float:
        """Cumulative full-sun-equivalent hours since t=0.

        Closed form, so battery bookkeeping is exact under any step
        partitioning of the clock.
        """
        if self.peak_mw <= 0:
            return 0.0
        span = self.sunset_h - self.sunrise_h
        if span <= 0:
            return 0.0
        k = math.pi / span
        per_day = 2.0 * span / math.pi
        days, hour = divmod(t_s / 3600.0, 24.0)
        h = min(max(hour, self.sunrise_h), self.sunset_h)
        partial = (1.0 - math.cos(k * (h - self.sunrise_h))) / k
        return days * per_day + partial


@dataclass
class NodeConfig:
    node_id: str
    position_m: tuple[float, float] | None = None
    trajectory_ref: str | None = None
    sample_period_s: float = 4.0
    sampling_s: float = CYCLE_SAMPLING_S
    uplink_s: float = CYCLE_UPLINK_S
    inlet_tau_s: float = 20.0
    power_draw_mw: float = 1404.0
    battery_capacity_wh: float = 240.0
    solar: SolarConfig = field(default_factory=SolarConfig)
    live_mode: bool = False

    def __post_init__(self) -> None:
        if self.sample_period_s < MIN_SAMPLE_PERIOD_S:
            raise ValueError(
                f"{self.node_id}: sample_period_s {self.sample_period_s} below "
                f"the {MIN_SAMPLE_PERIOD_S:.0f} s floor")
        if self.sampling_s <= 0 or self.uplink_s <= 0:
            raise ValueError(f"{self.node_id}: cycle durations must be positive")
        if self.position_m is None and self.trajectory_ref is None:
            raise ValueError(f"{self.node_id}: needs a position or a trajectory_ref")

    @property
    def cycle_s(self) -> float:
        return self.sampling_s + self.uplink_s


@dataclass(frozen=True)
class Distortion:
    """Affine sensor response: raw = a*ch4 + b*(T-25) + c*(RH-50) + d*(P-1013) + e + noise."""

    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    e: float = 0.0
    sigma_n: float = 0.0

    def apply(self, ch4: float, temp_c: float, rh_pct: float, press_hpa: float,
              rng: np.random.Generator) -> float:
        raw = (self.a * ch4 + self.b * (temp_c - 25.0) + self.c * (rh_pct - 50.0)
               + self.d * (press_hpa - 1013.0) + self.e)
        if self.sigma_n > 0:
            raw += rng.normal(0.0, self.sigma_n)
        return max(raw, 0.0)


@dataclass(frozen=True)
class SensorFault:
    """Planted sensor misbehaviour window (artifact of the device, not the world)."""

    node_id: str
    kind: str  # spike | stuck | dropout
    t_start: float
    t_end: float
    value: float = 0.0

    def active(self, t: float) -> bool:
        return self.t_start <= t < self.t_end


@dataclass
class Sample:
    node_id: str
    seq: int
    ts: float
    ch4_ppm_raw: float
    co2_ppm_raw: float
    temp_c: float
    rh_pct: float
    press_hpa: float
    batt_v: float
    lat: float
    lon: float
    speed_mps: float


class Phase(str, Enum):
    SAMPLING = "SAMPLING"
    UPLINK = "UPLINK"
    SLEEP_FAULT = "SLEEP_FAULT"


@dataclass
class NodeState:
    phase: Phase = Phase.SAMPLING
    battery_wh: float = 240.0
    seq: int = 0
    buffer: list[Sample] = field(default_factory=list)
    lag_ch4: float | None = None
    lag_co2: float | None = None
    isolated: bool = False
    batch_seq: int = 0
    pending_sample_period: float | None = None
    calibration_push: list[float] | None = None


def inlet_lag_update(lag: float, true_value: float, dt: float, tau: float) -> float:
    """Exact first-order response: unconditionally stable for any dt."""
    if dt <= 0 or tau <= 0:
        return true_value
    return lag + (true_value - lag) * (1.0 - math.exp(-dt / tau))


def battery_voltage(battery_wh: float, capacity_wh: float) -> float:
    frac = min(max(battery_wh / capacity_wh, 0.0), 1.0) if capacity_wh > 0 else 0.0
    return 3.3 + 0.9 * frac


# ---- telemetry wire schema ---------------------------------------------------

def encode_batch(node_id: str, batch_seq: int, samples: list[Sample]) -> bytes:
    doc = {
        "node_id": node_id,
        "batch_seq": batch_seq,
        "samples": [{
            "seq": s.seq,
            "ts": int(s.ts),
            "ch4": round(s.ch4_ppm_raw, 2),
            "co2": round(s.co2_ppm_raw, 2),
            "t": round(s.temp_c, 1),
            "rh": round(s.rh_pct, 1),
            "p": round(s.press_hpa, 1),
            "bv": round(s.batt_v, 1),
            "lat": round(s.lat, 5),
            "lon": round(s.lon, 5),
            "spd": round(s.speed_mps, 1),
        } for s in samples],
    }
    return json.dumps(doc, separators=(",", ":")).encode()


def decode_batch(payload: bytes) -> dict:
    doc = json.loads(payload.decode())
    for key in ("node_id", "batch_seq", "samples"):
        if key not in doc:
            raise ValueError(f"batch payload missing {key!r}")
    return doc


def encode_command(cmd_id: str, op: str, args: dict | None = None) -> bytes:
    return json.dumps({"cmd_id": cmd_id, "op": op, "args": args or {}},
                      separators=(",", ":")).encode()


def encode_status(cmd_id: str | None, result: str, detail) -> bytes:
    return json.dumps({"cmd_id": cmd_id, "result": result, "detail": detail},
                      separators=(",", ":")).encode()


# ---- the device ----------------------------------------------------------------

class NodeSim:
    """One virtual device wired to the telemetry fabric.

    The world calls :meth:`on_tick` once per clock tick with the node's
    current position and environment.  Everything else (phases, sampling
    instants, batching, command handling, power) is internal.
    """

    def __init__(self, cfg: NodeConfig, client: MqttClient, distortion: Distortion,
                 rng: np.random.Generator, origin_latlon: tuple[float, float],
                 faults: list[SensorFault] | None = None):
        self.cfg = cfg
        self.client = client
        self.distortion = distortion
        self.rng = rng
        self.origin_latlon = origin_latlon
        self.faults = [f for f in (faults or []) if f.node_id == cfg.node_id]
        self.state = NodeState(battery_wh=cfg.battery_capacity_wh)
        self._last_tick: float | None = None
        self._next_sample_t = 0.0
        self._outgoing: list[tuple[float, str, bytes]] = []  # (due_t, topic, payload)
        self._last_phase = Phase.SAMPLING
        client.on_message = self._on_cmd_message

    # ---- physics pieces -----------------------------------------------------

    def power_step(self, t: float, dt: float) -> None:
        solar_h = (self.cfg.solar.irradiance_integral_h(t)
                   - self.cfg.solar.irradiance_integral_h(t - dt))
        solar_wh = self.cfg.solar.peak_mw * solar_h / 1000.0
        delta_wh = solar_wh - self.cfg.power_draw_mw * dt / 3.6e6
        s = self.state
        s.battery_wh = min(max(s.battery_wh + delta_wh, 0.0),
                           self.cfg.battery_capacity_wh)
        if s.battery_wh <= 0.0 and s.phase != Phase.SLEEP_FAULT:
            s.phase = Phase.SLEEP_FAULT
            s.buffer.clear()
            self._outgoing.clear()
        elif (s.phase == Phase.SLEEP_FAULT
              and s.battery_wh >= RESUME_BATTERY_FRACTION * self.cfg.battery_capacity_wh):
            s.phase = Phase.SAMPLING

    def acquire_sample(self, t: float, position: tuple[float, float], speed_mps: float,
                       env: tuple[float, float, float, float, float]) -> Sample | None:
        """Measure once through the inlet chamber and the distortion model."""
        true_ch4, true_co2, temp_c, rh_pct, press_hpa = env
        s = self.state
        if s.lag_ch4 is None:
            s.lag_ch4, s.lag_co2 = true_ch4, true_co2
        else:
            dt = self.cfg.sample_period_s
            s.lag_ch4 = inlet_lag_update(s.lag_ch4, true_ch4, dt, self.cfg.inlet_tau_s)
            s.lag_co2 = inlet_lag_update(s.lag_co2, true_co2, dt, self.cfg.inlet_tau_s)

        s.seq += 1  # a dropout still consumes a seq: visible as a series gap
        fault = next((f for f in self.faults if f.active(t)), None)
        if fault is not None and fault.kind == "dropout":
            return None
        raw_ch4 = self.distortion.apply(s.lag_ch4, temp_c, rh_pct, press_hpa, self.rng)
        if fault is not None and fault.kind in ("spike", "stuck"):
            raw_ch4 = fault.value
        lat, lon = meters_to_latlon(position[0], position[1], self.origin_latlon)
        return Sample(
            node_id=self.cfg.node_id, seq=s.seq, ts=t,
            ch4_ppm_raw=raw_ch4, co2_ppm_raw=s.lag_co2,
            temp_c=temp_c, rh_pct=rh_pct, press_hpa=press_hpa,
            batt_v=battery_voltage(s.battery_wh, self.cfg.battery_capacity_wh),
            lat=lat, lon=lon, speed_mps=speed_mps,
        )

    # ---- uplink ---------------------------------------------------------------

    def build_uplink_batches(self, start_t: float) -> None:
        """Split the buffer into capped batches spaced on the uplink window."""
        s = self.state
        due = start_t
        while s.buffer:
            chunk = s.buffer[:BATCH_MAX_SAMPLES]
            payload = encode_batch(self.cfg.node_id, s.batch_seq, chunk)
            while len(payload) > PAYLOAD_SIZE_CAP and len(chunk) > 1:
                chunk = chunk[:len(chunk) // 2]
                payload = encode_batch(self.cfg.node_id, s.batch_seq, chunk)
            s.buffer = s.buffer[len(chunk):]
            self._outgoing.append((due, data_topic(self.cfg.node_id), payload))
            s.batch_seq += 1
            due += BATCH_SPACING_S

    def _heartbeat(self, t: float) -> None:
        detail = {
            "phase": self.state.phase.value,
            "battery_v": round(battery_voltage(self.state.battery_wh,
                                               self.cfg.battery_capacity_wh), 2),
            "isolated": self.state.isolated,
            "sample_period_s": self.cfg.sample_period_s,
        }
        self._outgoing.append((t, status_topic(self.cfg.node_id),
                               encode_status(None, "heartbeat", detail)))

    # ---- commands ---------------------------------------------------------------

    def _on_cmd_message(self, topic: str, payload: bytes, packet) -> None:
        try:
            doc = json.loads(payload.decode())
            cmd_id = doc["cmd_id"]
            op = doc["op"]
            args = doc.get("args", {})
        except (ValueError, KeyError):
            self._reply(None, "rejected", "unparseable command")
            return
        self.handle_command(cmd_id, op, args)

    def handle_command(self, cmd_id: str | None, op: str, args: dict) -> None:
        s = self.state
        if op == "set_sample_period":
            period = float(args.get("sample_period_s", 0))
            if period < MIN_SAMPLE_PERIOD_S:
                self._reply(cmd_id, "rejected",
                            f"sample_period_s floor is {MIN_SAMPLE_PERIOD_S:.0f} s")
                return
            s.pending_sample_period = period
            self._reply(cmd_id, "ok", f"sample period {period:.0f} s from next cycle")
        elif op == "isolate":
            s.isolated = True
            s.buffer.clear()
            self._reply(cmd_id, "ok", "isolated")
        elif op == "resume":
            s.isolated = False
            self._reply(cmd_id, "ok", "resumed")
        elif op == "push_calibration":
            coeffs = args.get("coefficients")
            if not isinstance(coeffs, list) or not all(
                    isinstance(c, (int, float)) for c in coeffs):
                self._reply(cmd_id, "rejected", "coefficients must be a number list")
                return
            s.calibration_push = [float(c) for c in coeffs]
            self._reply(cmd_id, "ok", f"stored {len(coeffs)} coefficients")
        elif op == "reboot":
            # config and monotone seq survive; volatile state does not
            s.buffer.clear()
            s.lag_ch4 = s.lag_co2 = None
            s.isolated = False
            s.pending_sample_period = None
            if s.phase != Phase.SLEEP_FAULT:
                s.phase = Phase.SAMPLING
            self._outgoing.clear()
            self._reply(cmd_id, "ok", "rebooted")
        else:
            self._reply(cmd_id, "unsupported", f"unknown op {op!r}")

    def _reply(self, cmd_id: str | None, result: str, detail: str) -> None:
        self.client.publish(status_topic(self.cfg.node_id),
                            encode_status(cmd_id, result, detail), qos=1)

    # ---- clock driver --------------------------------------------------------------

    def on_tick(self, t: float, position: tuple[float, float], speed_mps: float,
                env: tuple[float, float, float, float, float]) -> None:
        """Advance to simulation time ``t`` (called on a fixed world tick)."""
        dt = 0.0 if self._last_tick is None else t - self._last_tick
        self._last_tick = t
        if dt > 0:
            self.power_step(t, dt)
        s = self.state
        if s.phase == Phase.SLEEP_FAULT:
            return  # radio off until the battery recovers

        cycle_pos = t % self.cfg.cycle_s
        schedule_phase = (Phase.SAMPLING if cycle_pos < self.cfg.sampling_s
                          else Phase.UPLINK)

        if schedule_phase == Phase.SAMPLING and self._last_phase != Phase.SAMPLING:
            # new cycle: apply deferred reconfiguration
            if s.pending_sample_period is not None:
                self.cfg = replace(self.cfg, sample_period_s=s.pending_sample_period)
                s.pending_sample_period = None
            if not self.cfg.live_mode:
                self._next_sample_t = t

        if schedule_phase == Phase.UPLINK and self._last_phase == Phase.SAMPLING:
            if not s.isolated and not self.cfg.live_mode:
                self.build_uplink_batches(start_t=t)
            self._heartbeat(t)

        self._last_phase = schedule_phase
        # live nodes have no buffered uplink to drain: they sample continuously
        phase = Phase.SAMPLING if self.cfg.live_mode else schedule_phase
        s.phase = phase

        if phase == Phase.SAMPLING and not s.isolated and t >= self._next_sample_t:
            sample = self.acquire_sample(t, position, speed_mps, env)
            self._next_sample_t = t + self.cfg.sample_period_s
            if sample is not None:
                if self.cfg.live_mode:
                    payload = encode_batch(self.cfg.node_id, s.batch_seq, [sample])
                    s.batch_seq += 1
                    self.client.publish(data_topic(self.cfg.node_id), payload, qos=1)
                else:
                    s.buffer.append(sample)

        while self._outgoing and self._outgoing[0][0] <= t:
            _, topic, payload = self._outgoing.pop(0)
            self.client.publish(topic, payload, qos=1)
        self.client.service(t)
