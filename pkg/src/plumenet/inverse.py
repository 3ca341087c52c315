"""Source localization: footprints by forward simulation + nonnegative fit.

The transport solver is linear in source strength, so the modeled reading
at observation i from candidate j at unit strength forms a matrix A with
``A @ q`` the prediction for any strengths q >= 0.  Localization solves
``min ||A q - y||^2, q >= 0`` by projected gradient (deterministic from a
zero start) and ranks candidates by how much the residual grows when each
one is removed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Scenario
from .dispersion import (Field, Grid, NestSpec, PointSource, adjust_wind,
                         nest_boundary, step_coarse, step_fine,
                         uniform_wind_field)

PG_MAX_ITER = 100_000
PG_REL_TOL = 1e-10


@dataclass
class Observation:
    node_id: str
    t: float
    x: float
    y: float


@dataclass
class FootprintMatrix:
    values: np.ndarray  # (n_obs, n_candidates) ppm per unit g/s
    candidates: list[tuple[float, float]]
    observations: list[Observation]
    resolution: str

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v < -1e-12):
            raise ValueError("footprint entries must be finite and nonnegative")
        self.values = np.maximum(v, 0.0)


@dataclass
class SourceEstimate:
    candidate_id: int
    position: tuple[float, float]
    strength_g_s: float
    delta_residual: float
    rank: int


@dataclass
class FitResult:
    q: np.ndarray
    iterations: int
    objective: float
    warning: str = ""
    objective_trace: list[float] | None = None


class ForwardModel:
    """Re-runs the scenario's transport for arbitrary source configurations.

    Stepping mirrors the world clock (same tick, same wind sampling), so a
    footprint column is the same numerical object the twin's fields use.
    """

    def __init__(self, scenario: Scenario, resolution: str = "coarse"):
        if resolution not in ("coarse", "fine"):
            raise ValueError(f"unknown resolution {resolution!r}")
        self.scenario = scenario
        self.resolution = resolution
        w, h = scenario.extent_m
        cc = scenario.grid.coarse_cell_m
        self.coarse_grid = Grid(nx=max(2, int(np.ceil(w / cc))),
                                ny=max(2, int(np.ceil(h / cc))), cell_m=cc,
                                diffusivity_m2s=scenario.diffusivity_m2s)
        self.fine_grid: Grid | None = None
        self.nest: NestSpec | None = None
        if resolution == "fine":
            if scenario.grid.fine_region is None:
                raise ValueError("fine resolution requested but no fine_region configured")
            x0, y0, x1, y1 = scenario.grid.fine_region
            fc = scenario.grid.fine_cell_m
            nx = max(2, round((x1 - x0) / fc))
            ny = max(2, round((y1 - y0) / fc))
            mask = None
            if scenario.obstacles:
                xs = x0 + (np.arange(nx) + 0.5) * fc
                ys = y0 + (np.arange(ny) + 0.5) * fc
                X, Y = np.meshgrid(xs, ys)
                mask = np.zeros((ny, nx), dtype=bool)
                for ob in scenario.obstacles:
                    ox0, oy0, ox1, oy1 = ob.footprint
                    mask |= (X >= ox0) & (X <= ox1) & (Y >= oy0) & (Y <= oy1)
                if not mask.any():
                    mask = None
            self.fine_grid = Grid(nx=nx, ny=ny, cell_m=fc, origin_m=(x0, y0),
                                  diffusivity_m2s=scenario.diffusivity_m2s,
                                  obstacle_mask=mask)
            self.nest = NestSpec(coarse=self.coarse_grid, fine=self.fine_grid)
        self._fine_wind_cache: dict[tuple[float, float], object] = {}

    def _fine_wind(self, ux: float, uy: float):
        key = (round(ux, 6), round(uy, 6))
        if key not in self._fine_wind_cache:
            if self.fine_grid.obstacle_mask is not None:
                self._fine_wind_cache[key] = adjust_wind(self.fine_grid, (ux, uy))
            else:
                self._fine_wind_cache[key] = uniform_wind_field(self.fine_grid, ux, uy)
        return self._fine_wind_cache[key]

    def run(self, sources: list[PointSource], sample_points: list[tuple[float, float, float]]
            ) -> np.ndarray:
        """Transport ``sources`` and sample excess ppm at (t, x, y) points."""
        sc = self.scenario
        order = np.argsort([p[0] for p in sample_points], kind="stable")
        out = np.zeros(len(sample_points))
        coarse = Field(self.coarse_grid)
        fine = Field(self.fine_grid) if self.fine_grid is not None else None
        tick = sc.tick_s
        now = 0.0
        k = 0

        def sample(x: float, y: float) -> float:
            if fine is not None and fine.grid.contains(x, y):
                return float(fine.sample(x, y))
            return float(coarse.sample(x, y))

        while k < len(order):
            t_obs = sample_points[order[k]][0]
            while now < t_obs - 1e-9:
                span = min(tick, t_obs - now)
                wind = sc.wind_at(now, 0.0, 0.0)
                before = coarse.copy() if fine is not None else None
                step_coarse(coarse, wind, sources, span,
                            mixing_height_m=sc.mixing_height_m)
                if fine is not None:
                    fwind = self._fine_wind(*wind)
                    ghosts = nest_boundary(before, coarse, self.nest, now + span / 2)
                    fine_sources = [s for s in sources
                                    if fine.grid.contains(s.x, s.y)]
                    step_fine(fine, fwind, fine_sources, ghosts, span,
                              mixing_height_m=sc.mixing_height_m)
                now += span
            while k < len(order) and sample_points[order[k]][0] <= now + 1e-9:
                _, x, y = sample_points[order[k]]
                out[order[k]] = sample(x, y)
                k += 1
        return out


def candidate_grid(bbox: tuple[float, float, float, float], pitch_m: float
                   ) -> list[tuple[float, float]]:
    """Candidate positions on cell centers of a pitch-sized grid over bbox."""
    x0, y0, x1, y1 = bbox
    nx = max(1, round((x1 - x0) / pitch_m))
    ny = max(1, round((y1 - y0) / pitch_m))
    return [(x0 + (i + 0.5) * pitch_m, y0 + (j + 0.5) * pitch_m)
            for j in range(ny) for i in range(nx)]


def build_footprints(scenario: Scenario, candidates: list[tuple[float, float]],
                     observations: list[Observation],
                     resolution: str = "coarse") -> FootprintMatrix:
    """One unit-strength forward run per candidate, sampled at observations."""
    for x, y in candidates:
        if not scenario.contains(x, y):
            raise ValueError(f"candidate ({x}, {y}) outside extent")
    span = max((o.t for o in observations), default=0.0)
    if span > scenario.duration_s + scenario.tick_s:
        raise ValueError("observation beyond simulated span")
    model = ForwardModel(scenario, resolution)
    points = [(o.t, o.x, o.y) for o in observations]
    A = np.zeros((len(observations), len(candidates)))
    for j, (cx, cy) in enumerate(candidates):
        A[:, j] = model.run([PointSource(cx, cy, 1.0)], points)
    return FootprintMatrix(values=A, candidates=list(candidates),
                           observations=list(observations), resolution=resolution)


def _spectral_norm(gram: np.ndarray) -> float:
    n = gram.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(200):
        w = gram @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v_new = w / norm
        if abs(norm - lam) <= 1e-12 * max(lam, 1.0):
            return norm
        lam, v = norm, v_new
    return lam


def fit_strengths(A: FootprintMatrix | np.ndarray, y: np.ndarray,
                  track_objective: bool = False) -> FitResult:
    """Projected-gradient nonnegative least squares, zero-started.

    The step is 1/||A^T A||_2 (power-iteration estimate), which makes the
    objective non-increasing; iteration stops when its relative change
    drops below 1e-10.
    """
    mat = A.values if isinstance(A, FootprintMatrix) else np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    m, n = mat.shape
    if y.shape != (m,):
        raise ValueError(f"y must have {m} entries")
    warning = "" if m >= n else "fewer observations than candidates"
    gram = mat.T @ mat
    L = _spectral_norm(gram)
    if L == 0.0:
        return FitResult(q=np.zeros(n), iterations=0, objective=float(y @ y),
                         warning="unobservable: all footprints zero")
    step = 1.0 / L
    aty = mat.T @ y
    q = np.zeros(n)
    obj = float(y @ y)
    trace = [obj] if track_objective else None
    iterations = 0
    for iterations in range(1, PG_MAX_ITER + 1):
        grad = gram @ q - aty
        q_new = np.maximum(q - step * grad, 0.0)
        r = mat @ q_new - y
        obj_new = float(r @ r)
        q = q_new
        if trace is not None:
            trace.append(obj_new)
        if obj - obj_new < PG_REL_TOL * max(obj, 1e-300):
            obj = obj_new
            break
        obj = obj_new
    return FitResult(q=q, iterations=iterations, objective=obj, warning=warning,
                     objective_trace=trace)


def kkt_violation(A, y, q: np.ndarray) -> float:
    """Max KKT violation, normalized by ||A^T y||_inf."""
    mat = A.values if isinstance(A, FootprintMatrix) else np.asarray(A, dtype=float)
    grad = mat.T @ (mat @ q - y)
    scale = float(np.abs(mat.T @ y).max()) + 1e-300
    active = q > 0
    viol = 0.0
    if active.any():
        viol = float(np.abs(grad[active]).max())
    if (~active).any():
        viol = max(viol, float(np.maximum(-grad[~active], 0.0).max()))
    return viol / scale


def rank_candidates(fit: FitResult, A: FootprintMatrix, y: np.ndarray
                    ) -> list[SourceEstimate]:
    """Order nonzero candidates by leave-one-out residual increase."""
    mat = A.values
    q = fit.q
    base = mat @ q - y
    base_obj = float(base @ base)
    entries = []
    scale = float(q.max()) if q.size else 0.0
    for j in range(len(q)):
        if q[j] <= 1e-12 * max(scale, 1e-300):
            continue
        r_without = base - mat[:, j] * q[j]
        delta = float(r_without @ r_without) - base_obj
        entries.append((delta, q[j], j))
    entries.sort(key=lambda e: (-e[0], -e[1], e[2]))
    return [SourceEstimate(candidate_id=j, position=A.candidates[j],
                           strength_g_s=float(qj), delta_residual=float(d),
                           rank=rank + 1)
            for rank, (d, qj, j) in enumerate(entries)]


def localize(scenario: Scenario, readings, candidates, resolution: str = "coarse",
             ambient_ppm: float | None = None) -> list[SourceEstimate]:
    """Full pipeline: footprints -> nonnegative fit -> ranked estimates.

    ``readings`` carry (node_id, ts, ch4_ppm_cal); observation positions
    come from the scenario geometry (static placement or trajectory).
    """
    ambient = scenario.ambient_ch4_ppm if ambient_ppm is None else ambient_ppm
    static_pos = {cfg.node_id: cfg.position_m for cfg in scenario.nodes
                  if cfg.position_m is not None}
    traj_by_node = {t.node_id: t for t in scenario.trajectories}
    node_traj_ref = {cfg.node_id: cfg.trajectory_ref for cfg in scenario.nodes}

    observations = []
    y = []
    for r in readings:
        ref = node_traj_ref.get(r.node_id)
        if ref is not None and ref in {t.id for t in scenario.trajectories}:
            traj = next(t for t in scenario.trajectories if t.id == ref)
            x, ypos, _ = traj.position_at(r.ts)
        elif r.node_id in static_pos:
            x, ypos = static_pos[r.node_id]
        elif r.node_id in traj_by_node:
            x, ypos, _ = traj_by_node[r.node_id].position_at(r.ts)
        else:
            continue
        observations.append(Observation(r.node_id, r.ts, x, ypos))
        y.append(max(r.ch4_ppm_cal - ambient, 0.0))
    y = np.asarray(y)
    if not observations or float(y.max(initial=0.0)) <= 0.0:
        return []
    A = build_footprints(scenario, candidates, observations, resolution)
    fit = fit_strengths(A, y)
    return rank_candidates(fit, A, y)
