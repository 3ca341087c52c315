"""Scenario documents: structured-text parsing, defaulting and validation.

A scenario file declares the whole simulated world in sections:
``[extent]``, ``[wind]``, ``[meteorology]``, ``[sim]``, ``[link]``,
``[distortion]``, ``[grid]``, ``[analysis]`` plus repeated ``[[sources]]``,
``[[obstacles]]``, ``[[nodes]]``, ``[[trajectories]]`` and
``[[sensor_faults]]`` tables.  Units are always meters, seconds, ppm and
g/s.  Validation collects every violation before raising, so a broken
file reports all its problems at once.

The parser covers the subset of TOML syntax those files use (scalar
keys, strings, numbers, booleans, nested arrays spanning multiple
lines); the sandbox's Python 3.10 has no stdlib TOML parser.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field as dc_field

import numpy as np

from .bus.faults import FaultProfile
from .nodes import Distortion, NodeConfig, SensorFault, SolarConfig

DEFAULT_ORIGIN_LATLON = (35.18, -97.44)
DEFAULT_AMBIENT_CH4 = 1.9
DEFAULT_CO2_AMBIENT = 420.0
DEFAULT_MIXING_HEIGHT = 50.0
DEFAULT_DIFFUSIVITY = 5.0


class ScenarioError(ValueError):
    """Carries every validation problem found in a scenario document."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid scenario:\n  - " + "\n  - ".join(problems))


# ---- structured-text parsing --------------------------------------------------

_SECTION_RE = re.compile(r"^\[(\[)?\s*([A-Za-z0-9_.-]+)\s*(\])?\]\s*$")
_KEY_RE = re.compile(r"^([A-Za-z0-9_-]+)\s*=\s*(.+)$")


def _strip_comment(line: str) -> str:
    out = []
    in_str = False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
    return "".join(out).rstrip()


def _parse_scalar(tok: str):
    tok = tok.strip()
    if tok.startswith('"') and tok.endswith('"') and len(tok) >= 2:
        return tok[1:-1]
    if tok == "true":
        return True
    if tok == "false":
        return False
    try:
        if re.fullmatch(r"[+-]?\d+", tok):
            return int(tok)
        return float(tok)
    except ValueError:
        raise ValueError(f"cannot parse value {tok!r}") from None


def _parse_value(text: str):
    text = text.strip()
    if not text.startswith("["):
        return _parse_scalar(text)
    # array: recursive descent over brackets
    pos = 0

    def parse_array(s: str, k: int):
        assert s[k] == "["
        k += 1
        items = []
        while True:
            while k < len(s) and s[k] in " \t,":
                k += 1
            if k >= len(s):
                raise ValueError("unterminated array")
            if s[k] == "]":
                return items, k + 1
            if s[k] == "[":
                sub, k = parse_array(s, k)
                items.append(sub)
            else:
                m = re.match(r'("[^"]*"|[^,\]\s]+)', s[k:])
                if not m:
                    raise ValueError(f"bad array element near {s[k:k+20]!r}")
                items.append(_parse_scalar(m.group(1)))
                k += m.end()

    items, end = parse_array(text, pos)
    if text[end:].strip():
        raise ValueError(f"trailing characters after array: {text[end:]!r}")
    return items


def parse_document(text: str) -> dict:
    """Parse the scenario text format into nested dicts/lists."""
    root: dict = {}
    current: dict = root
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = _strip_comment(lines[i]).strip()
        i += 1
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            is_array = bool(m.group(1))
            if is_array != bool(m.group(3)):
                raise ValueError(f"malformed section header: {line!r}")
            name = m.group(2)
            if is_array:
                current = {}
                root.setdefault(name, [])
                if not isinstance(root[name], list):
                    raise ValueError(f"section {name!r} used both as table and list")
                root[name].append(current)
            else:
                if name in root and isinstance(root[name], list):
                    raise ValueError(f"section {name!r} used both as table and list")
                current = root.setdefault(name, {})
            continue
        m = _KEY_RE.match(line)
        if not m:
            raise ValueError(f"cannot parse line: {line!r}")
        key, raw = m.group(1), m.group(2).strip()
        # multi-line arrays: accumulate until brackets balance
        if raw.startswith("["):
            while raw.count("[") > raw.count("]"):
                if i >= len(lines):
                    raise ValueError(f"unterminated array for key {key!r}")
                raw += " " + _strip_comment(lines[i]).strip()
                i += 1
        current[key] = _parse_value(raw)
    return root


# ---- scenario model ---------------------------------------------------------------

@dataclass
class Source:
    id: str
    position_m: tuple[float, float]
    strength_g_s: float
    active: tuple[float, float] = (0.0, float("inf"))

    def strength_at(self, t: float) -> float:
        t_on, t_off = self.active
        return self.strength_g_s if t_on <= t < t_off else 0.0


@dataclass
class Obstacle:
    id: str
    footprint: tuple[float, float, float, float]  # x0, y0, x1, y1

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.footprint
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass
class Trajectory:
    id: str
    waypoints: list[tuple[float, float, float]]  # (t, x, y)
    node_id: str

    def position_at(self, t: float) -> tuple[float, float, float]:
        """Piecewise-linear (x, y, speed); clamps outside the waypoint span."""
        wp = self.waypoints
        if t <= wp[0][0]:
            return wp[0][1], wp[0][2], 0.0
        if t >= wp[-1][0]:
            return wp[-1][1], wp[-1][2], 0.0
        for (t0, x0, y0), (t1, x1, y1) in zip(wp, wp[1:]):
            if t0 <= t <= t1:
                w = (t - t0) / (t1 - t0)
                dist = float(np.hypot(x1 - x0, y1 - y0))
                return x0 + w * (x1 - x0), y0 + w * (y1 - y0), dist / (t1 - t0)
        raise RuntimeError("unreachable: waypoint times are ordered")


@dataclass
class WindSpec:
    """Piecewise-linear schedule, optionally replaced by a static grid."""

    schedule: list[tuple[float, float, float]] = dc_field(
        default_factory=lambda: [(0.0, 2.0, 0.0)])
    grid_nx: int = 0
    grid_ny: int = 0
    grid_u: np.ndarray | None = None  # (ny, nx) node values over the extent
    grid_v: np.ndarray | None = None

    @property
    def gridded(self) -> bool:
        return self.grid_u is not None

    def max_speed(self) -> float:
        if self.gridded:
            return float(max(np.abs(self.grid_u).max(), np.abs(self.grid_v).max()))
        return max(max(abs(ux), abs(uy)) for _, ux, uy in self.schedule)


@dataclass
class MeteoSchedule:
    entries: list[tuple[float, float, float, float]] = dc_field(
        default_factory=lambda: [(0.0, 25.0, 50.0, 1013.0)])  # (t, T, RH, P)

    def at(self, t: float) -> tuple[float, float, float]:
        return _interp_schedule(self.entries, t)


def _interp_schedule(entries, t: float):
    """Piecewise-linear over (t, *values) rows, clamped at both ends."""
    if t <= entries[0][0]:
        return tuple(entries[0][1:])
    if t >= entries[-1][0]:
        return tuple(entries[-1][1:])
    for row0, row1 in zip(entries, entries[1:]):
        if row0[0] <= t <= row1[0]:
            w = (t - row0[0]) / (row1[0] - row0[0])
            return tuple(a + w * (b - a) for a, b in zip(row0[1:], row1[1:]))
    raise RuntimeError("unreachable: schedule times are ordered")


@dataclass
class AnalysisConfig:
    threshold_ppm: float = 5.0
    threshold_is_absolute: bool = True
    min_duration_s: float = 8.0
    speed_gate_mps: float = 15.0
    baseline_window_s: float = 1800.0
    calibration_lambda: float = 1e-6
    calibration_n: int = 400
    impute_radius_m: float = 2000.0
    impute_dropout_node: str | None = None
    impute_dropout_fraction: float = 0.0
    inverse_enabled: bool = False
    candidate_pitch_m: float = 32.0
    inverse_window: tuple[float, float] | None = None
    inverse_resolution: str = "coarse"
    inverse_candidates: list[tuple[float, float]] | None = None


@dataclass
class GridSpec:
    coarse_cell_m: float = 32.0
    fine_cell_m: float = 5.0
    fine_region: tuple[float, float, float, float] | None = None  # x0 y0 x1 y1


@dataclass
class Scenario:
    name: str
    extent_m: tuple[float, float]
    mixing_height_m: float = DEFAULT_MIXING_HEIGHT
    ambient_ch4_ppm: float = DEFAULT_AMBIENT_CH4
    co2_ambient_ppm: float = DEFAULT_CO2_AMBIENT
    diffusivity_m2s: float = DEFAULT_DIFFUSIVITY
    origin_latlon: tuple[float, float] = DEFAULT_ORIGIN_LATLON
    wind: WindSpec = dc_field(default_factory=WindSpec)
    meteorology: MeteoSchedule = dc_field(default_factory=MeteoSchedule)
    sources: list[Source] = dc_field(default_factory=list)
    obstacles: list[Obstacle] = dc_field(default_factory=list)
    nodes: list[NodeConfig] = dc_field(default_factory=list)
    trajectories: list[Trajectory] = dc_field(default_factory=list)
    sensor_faults: list[SensorFault] = dc_field(default_factory=list)
    distortion: Distortion = dc_field(default_factory=Distortion)
    link: FaultProfile = dc_field(default_factory=FaultProfile)
    grid: GridSpec = dc_field(default_factory=GridSpec)
    analysis: AnalysisConfig = dc_field(default_factory=AnalysisConfig)
    duration_s: float = 720.0
    seed: int = 1
    clock_scale: float = 60.0
    tick_s: float = 1.0

    def wind_at(self, t: float, x: float, y: float) -> tuple[float, float]:
        """Wind vector: linear in time for schedules, bilinear for grids."""
        w = self.wind
        if not w.gridded:
            ux, uy = _interp_schedule(w.schedule, t)
            return float(ux), float(uy)
        nx, ny = w.grid_nx, w.grid_ny
        fx = np.clip(x / self.extent_m[0] * (nx - 1), 0, nx - 1)
        fy = np.clip(y / self.extent_m[1] * (ny - 1), 0, ny - 1)
        i0, j0 = int(fx), int(fy)
        i1, j1 = min(i0 + 1, nx - 1), min(j0 + 1, ny - 1)
        ax, ay = fx - i0, fy - j0
        def blend(g):
            return float((1 - ax) * (1 - ay) * g[j0, i0] + ax * (1 - ay) * g[j0, i1]
                         + (1 - ax) * ay * g[j1, i0] + ax * ay * g[j1, i1])
        return blend(w.grid_u), blend(w.grid_v)

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.extent_m[0] and 0.0 <= y <= self.extent_m[1]


# ---- document -> scenario -----------------------------------------------------------

def _get(table: dict, key: str, default=None):
    return table.get(key, default)


def _pair(value, name: str, problems: list[str]):
    if (not isinstance(value, list) or len(value) != 2
            or not all(isinstance(v, (int, float)) for v in value)):
        problems.append(f"{name} must be a [x, y] number pair, got {value!r}")
        return None
    return float(value[0]), float(value[1])


def scenario_from_document(doc: dict) -> Scenario:
    problems: list[str] = []

    extent_tbl = doc.get("extent", {})
    width = _get(extent_tbl, "width", 0.0)
    height = _get(extent_tbl, "height", 0.0)
    if not (isinstance(width, (int, float)) and width > 0
            and isinstance(height, (int, float)) and height > 0):
        problems.append(f"extent must have positive width/height, got {width!r}x{height!r}")
        width = max(float(width or 0), 1.0)
        height = max(float(height or 0), 1.0)
    extent = (float(width), float(height))

    def inside(x, y):
        return 0.0 <= x <= extent[0] and 0.0 <= y <= extent[1]

    sc = Scenario(name=str(doc.get("name", "unnamed")), extent_m=extent)

    if "mixing_height_m" in doc:
        sc.mixing_height_m = float(doc["mixing_height_m"])
        if sc.mixing_height_m <= 0:
            problems.append("mixing_height_m must be positive")
    if "ambient_ch4_ppm" in doc:
        sc.ambient_ch4_ppm = float(doc["ambient_ch4_ppm"])
    if "diffusivity_m2s" in doc:
        sc.diffusivity_m2s = float(doc["diffusivity_m2s"])
        if sc.diffusivity_m2s <= 0:
            problems.append("diffusivity_m2s must be > 0")
    if "origin" in doc:
        pair = _pair(doc["origin"], "origin", problems)
        if pair:
            sc.origin_latlon = pair

    # wind
    wind_tbl = doc.get("wind", {})
    if "schedule" in wind_tbl:
        entries = []
        for row in wind_tbl["schedule"]:
            if not isinstance(row, list) or len(row) != 3:
                problems.append(f"wind schedule rows are [t, ux, uy], got {row!r}")
                continue
            entries.append(tuple(float(v) for v in row))
        if entries:
            if any(b[0] <= a[0] for a, b in zip(entries, entries[1:])):
                problems.append("wind schedule times must be strictly increasing")
            sc.wind = WindSpec(schedule=entries)
    if "grid_u" in wind_tbl or "grid_v" in wind_tbl:
        try:
            gu = np.asarray(wind_tbl["grid_u"], dtype=float)
            gv = np.asarray(wind_tbl["grid_v"], dtype=float)
            if gu.shape != gv.shape or gu.ndim != 2:
                raise ValueError
            sc.wind = WindSpec(grid_nx=gu.shape[1], grid_ny=gu.shape[0],
                               grid_u=gu, grid_v=gv)
        except (KeyError, ValueError):
            problems.append("gridded wind needs matching 2D grid_u and grid_v")

    met_tbl = doc.get("meteorology", {})
    if "schedule" in met_tbl:
        entries = []
        for row in met_tbl["schedule"]:
            if not isinstance(row, list) or len(row) != 4:
                problems.append(f"meteorology rows are [t, T, RH, P], got {row!r}")
                continue
            entries.append(tuple(float(v) for v in row))
        if entries:
            sc.meteorology = MeteoSchedule(entries)

    # sim / link / distortion / grid
    sim_tbl = doc.get("sim", {})
    sc.duration_s = float(_get(sim_tbl, "duration_s", sc.duration_s))
    if sc.duration_s <= 0:
        problems.append("sim.duration_s must be positive")
    sc.seed = int(_get(sim_tbl, "seed", sc.seed))
    sc.clock_scale = float(_get(sim_tbl, "clock_scale", sc.clock_scale))
    sc.tick_s = float(_get(sim_tbl, "tick_s", sc.tick_s))

    link_tbl = doc.get("link", {})
    try:
        delay = link_tbl.get("delay_ms", [0.0, 0.0])
        sc.link = FaultProfile(
            drop_prob=float(link_tbl.get("drop_prob", 0.0)),
            delay_ms=(float(delay[0]), float(delay[1])),
            duplicate_prob=float(link_tbl.get("duplicate_prob", 0.0)),
            rng_seed=int(link_tbl.get("rng_seed", sc.seed)),
        )
    except (ValueError, TypeError, IndexError) as exc:
        problems.append(f"link section invalid: {exc}")

    dist_tbl = doc.get("distortion", {})
    sc.distortion = Distortion(
        a=float(dist_tbl.get("a", 1.0)), b=float(dist_tbl.get("b", 0.0)),
        c=float(dist_tbl.get("c", 0.0)), d=float(dist_tbl.get("d", 0.0)),
        e=float(dist_tbl.get("e", 0.0)), sigma_n=float(dist_tbl.get("sigma_n", 0.0)))

    grid_tbl = doc.get("grid", {})
    sc.grid = GridSpec(
        coarse_cell_m=float(grid_tbl.get("coarse_cell_m", 32.0)),
        fine_cell_m=float(grid_tbl.get("fine_cell_m", 5.0)))
    if "fine_region" in grid_tbl:
        region = grid_tbl["fine_region"]
        if not (isinstance(region, list) and len(region) == 4):
            problems.append("grid.fine_region must be [x0, y0, x1, y1]")
        else:
            x0, y0, x1, y1 = (float(v) for v in region)
            if not (x0 < x1 and y0 < y1):
                problems.append("grid.fine_region must have positive area")
            elif not (inside(x0, y0) and inside(x1, y1)):
                problems.append("grid.fine_region outside extent")
            else:
                sc.grid.fine_region = (x0, y0, x1, y1)

    # sources / obstacles
    for k, tbl in enumerate(doc.get("sources", [])):
        sid = str(tbl.get("id", f"source-{k}"))
        pos = _pair(tbl.get("position_m"), f"sources[{sid}].position_m", problems)
        q = tbl.get("strength_g_s", None)
        if not isinstance(q, (int, float)) or q < 0:
            problems.append(f"sources[{sid}].strength_g_s must be >= 0")
            q = 0.0
        active = (0.0, float("inf"))
        if "active" in tbl:
            pair = _pair(tbl["active"], f"sources[{sid}].active", problems)
            if pair:
                active = pair
                if not active[0] < active[1]:
                    problems.append(f"sources[{sid}].active needs t_on < t_off")
        if pos:
            if not inside(*pos):
                problems.append(f"sources[{sid}] outside extent")
            sc.sources.append(Source(sid, pos, float(q), active))

    for k, tbl in enumerate(doc.get("obstacles", [])):
        oid = str(tbl.get("id", f"obstacle-{k}"))
        fp = tbl.get("footprint")
        if not (isinstance(fp, list) and len(fp) == 4
                and all(isinstance(v, (int, float)) for v in fp)):
            problems.append(f"obstacles[{oid}].footprint must be [x0, y0, x1, y1]")
            continue
        x0, y0, x1, y1 = (float(v) for v in fp)
        if not (x0 < x1 and y0 < y1):
            problems.append(f"obstacles[{oid}] has no area")
            continue
        if not (inside(x0, y0) and inside(x1, y1)):
            problems.append(f"obstacles[{oid}] outside extent")
            continue
        sc.obstacles.append(Obstacle(oid, (x0, y0, x1, y1)))

    for src in sc.sources:
        for ob in sc.obstacles:
            if ob.contains(*src.position_m):
                problems.append(f"source {src.id!r} overlaps obstacle {ob.id!r}")

    # trajectories first so node trajectory_refs can be checked
    for k, tbl in enumerate(doc.get("trajectories", [])):
        tid = str(tbl.get("id", f"traj-{k}"))
        node_id = tbl.get("node_id")
        wps = tbl.get("waypoints")
        if not isinstance(node_id, str):
            problems.append(f"trajectories[{tid}] needs node_id")
            continue
        if not (isinstance(wps, list) and len(wps) >= 2
                and all(isinstance(w, list) and len(w) == 3 for w in wps)):
            problems.append(f"trajectories[{tid}].waypoints must be [[t, x, y], ...] with >= 2 rows")
            continue
        rows = [tuple(float(v) for v in w) for w in wps]
        if any(b[0] <= a[0] for a, b in zip(rows, rows[1:])):
            problems.append(f"trajectories[{tid}] waypoint times must be strictly increasing")
        for t, x, y in rows:
            if not inside(x, y):
                problems.append(f"trajectories[{tid}] waypoint ({x}, {y}) outside extent")
                break
        sc.trajectories.append(Trajectory(tid, rows, node_id))
    traj_ids = {t.id for t in sc.trajectories}

    for k, tbl in enumerate(doc.get("nodes", [])):
        node_id = str(tbl.get("node_id", f"n{k:02d}"))
        kwargs = {}
        for key in ("sample_period_s", "inlet_tau_s", "power_draw_mw",
                    "battery_capacity_wh"):
            if key in tbl:
                kwargs[key] = float(tbl[key])
        if "live_mode" in tbl:
            kwargs["live_mode"] = bool(tbl["live_mode"])
        if "solar_peak_mw" in tbl:
            kwargs["solar"] = SolarConfig(peak_mw=float(tbl["solar_peak_mw"]),
                                          sunrise_h=float(tbl.get("sunrise_h", 6.0)),
                                          sunset_h=float(tbl.get("sunset_h", 18.0)))
        position = None
        if "position_m" in tbl:
            position = _pair(tbl["position_m"], f"nodes[{node_id}].position_m", problems)
            if position and not inside(*position):
                problems.append(f"node {node_id!r} outside extent")
        traj_ref = tbl.get("trajectory_ref")
        if traj_ref is not None and traj_ref not in traj_ids:
            problems.append(f"node {node_id!r} references unknown trajectory {traj_ref!r}")
        try:
            sc.nodes.append(NodeConfig(node_id=node_id, position_m=position,
                                       trajectory_ref=traj_ref, **kwargs))
        except ValueError as exc:
            problems.append(str(exc))

    seen = set()
    for cfg in sc.nodes:
        if cfg.node_id in seen:
            problems.append(f"duplicate node_id {cfg.node_id!r}")
        seen.add(cfg.node_id)

    for k, tbl in enumerate(doc.get("sensor_faults", [])):
        try:
            sc.sensor_faults.append(SensorFault(
                node_id=str(tbl["node_id"]), kind=str(tbl["kind"]),
                t_start=float(tbl["t_start"]), t_end=float(tbl["t_end"]),
                value=float(tbl.get("value", 0.0))))
        except (KeyError, ValueError) as exc:
            problems.append(f"sensor_faults[{k}] invalid: {exc}")
        else:
            if sc.sensor_faults[-1].kind not in ("spike", "stuck", "dropout"):
                problems.append(f"sensor_faults[{k}] unknown kind {tbl.get('kind')!r}")

    ana_tbl = doc.get("analysis", {})
    a = sc.analysis
    a.threshold_ppm = float(ana_tbl.get("threshold_ppm", a.threshold_ppm))
    a.threshold_is_absolute = bool(ana_tbl.get("threshold_is_absolute", True))
    a.min_duration_s = float(ana_tbl.get("min_duration_s", a.min_duration_s))
    a.speed_gate_mps = float(ana_tbl.get("speed_gate_mps", a.speed_gate_mps))
    a.baseline_window_s = float(ana_tbl.get("baseline_window_s", a.baseline_window_s))
    a.calibration_lambda = float(ana_tbl.get("calibration_lambda", a.calibration_lambda))
    a.calibration_n = int(ana_tbl.get("calibration_n", a.calibration_n))
    a.impute_radius_m = float(ana_tbl.get("impute_radius_m", a.impute_radius_m))
    if "impute_dropout_node" in ana_tbl:
        a.impute_dropout_node = str(ana_tbl["impute_dropout_node"])
        a.impute_dropout_fraction = float(ana_tbl.get("impute_dropout_fraction", 0.1))
    a.inverse_enabled = bool(ana_tbl.get("inverse_enabled", False))
    a.candidate_pitch_m = float(ana_tbl.get("candidate_pitch_m", a.candidate_pitch_m))
    if "inverse_window" in ana_tbl:
        pair = _pair(ana_tbl["inverse_window"], "analysis.inverse_window", problems)
        if pair:
            a.inverse_window = pair
    a.inverse_resolution = str(ana_tbl.get("inverse_resolution", "coarse"))
    if "inverse_candidates" in ana_tbl:
        cands = []
        for row in ana_tbl["inverse_candidates"]:
            pair = _pair(row, "analysis.inverse_candidates row", problems)
            if pair:
                cands.append(pair)
        a.inverse_candidates = cands

    if a.threshold_ppm <= sc.ambient_ch4_ppm and a.threshold_is_absolute:
        problems.append("analysis.threshold_ppm must exceed ambient")

    if problems:
        raise ScenarioError(problems)
    return sc


def load_scenario(text: str) -> Scenario:
    return scenario_from_document(parse_document(text))


def load_scenario_file(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return load_scenario(fh.read())
