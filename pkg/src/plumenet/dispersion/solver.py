"""Depth-integrated advection-diffusion transport on coarse and fine grids.

One flux-form kernel serves both resolutions: first-order upwind advection
plus explicit central diffusion, obstacle faces blocked, sub-stepped to the
grid's stability limit.  Flux form makes mass accounting exact: on a closed
domain the column sum changes only by source injection; on open domains the
boundary flux is accumulated so (mass + outflow) is conserved.

The coarse grid stands in for a regional transport model run at ~32 m; the
fine grid, fed boundary values from the coarse solution and an
obstacle-adjusted wind, stands in for a geometry-resolving simulation at
~5 m.  Neither resolves turbulence; lateral spread is carried entirely by
the diffusivity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import Field, Grid
from .units import PPM_PER_G_M3
from .wind import WindField, uniform_wind_field


@dataclass
class PointSource:
    x: float
    y: float
    q_g_s: float


@dataclass
class GhostRing:
    """Concentration just outside each fine-grid edge (ppm above ambient)."""

    west: np.ndarray   # (ny,)
    east: np.ndarray   # (ny,)
    south: np.ndarray  # (nx,)
    north: np.ndarray  # (nx,)

    @classmethod
    def zeros(cls, grid: Grid) -> "GhostRing":
        return cls(np.zeros(grid.ny), np.zeros(grid.ny),
                   np.zeros(grid.nx), np.zeros(grid.nx))


@dataclass
class StepDiagnostics:
    injected_g: float = 0.0
    outflow_g: float = 0.0

    def merge(self, other: "StepDiagnostics") -> None:
        self.injected_g += other.injected_g
        self.outflow_g += other.outflow_g


def total_mass(f: Field, mixing_height_m: float) -> float:
    """Total grams of CH4 represented by a field (inverse of injection)."""
    cell_volume = f.grid.cell_m ** 2 * mixing_height_m
    return float(f.values.sum() * cell_volume / PPM_PER_G_M3)


def inject_sources(f: Field, sources: list[PointSource], dt: float,
                   mixing_height_m: float) -> float:
    """Add source mass into containing cells; returns grams injected."""
    injected = 0.0
    cell_volume = f.grid.cell_m ** 2 * mixing_height_m
    for s in sources:
        if s.q_g_s <= 0 or not f.grid.contains(s.x, s.y):
            continue
        i, j = f.grid.cell_of(s.x, s.y)
        if not f.grid.is_open(i, j):
            continue
        grams = s.q_g_s * dt
        f.values[j, i] += grams * PPM_PER_G_M3 / cell_volume
        injected += grams
    return injected


def _face_fluxes(c: np.ndarray, wind: WindField, K: float, dx: float,
                 open_cells: np.ndarray, closed_domain: bool,
                 ghosts: GhostRing | None):
    """Combined advective+diffusive flux on x and y faces (units ppm*m/s)."""
    ny, nx = c.shape
    u, v = wind.u, wind.v  # (ny, nx+1), (ny+1, nx)

    # ghost concentrations outside the domain
    if ghosts is not None:
        gw, ge, gs, gn = ghosts.west, ghosts.east, ghosts.south, ghosts.north
    else:
        gw = ge = np.zeros(ny)
        gs = gn = np.zeros(nx)

    # --- x faces -----------------------------------------------------------
    fx = np.zeros((ny, nx + 1))
    ui = u[:, 1:nx]  # interior faces
    c_left, c_right = c[:, :-1], c[:, 1:]
    upwind = np.where(ui >= 0, c_left, c_right)
    fx[:, 1:nx] = ui * upwind - K * (c_right - c_left) / dx
    if not closed_domain:
        ub = u[:, 0]
        if ghosts is not None:
            # inflow carries ghost air; diffusion couples to the ghost value
            fx[:, 0] = ub * np.where(ub >= 0, gw, c[:, 0]) - K * (c[:, 0] - gw) / dx
        else:
            fx[:, 0] = ub * np.where(ub >= 0, 0.0, c[:, 0])
        ub = u[:, nx]
        if ghosts is not None:
            fx[:, nx] = ub * np.where(ub >= 0, c[:, -1], ge) - K * (ge - c[:, -1]) / dx
        else:
            fx[:, nx] = ub * np.where(ub >= 0, c[:, -1], 0.0)

    # --- y faces -----------------------------------------------------------
    fy = np.zeros((ny + 1, nx))
    vi = v[1:ny, :]
    c_bot, c_top = c[:-1, :], c[1:, :]
    upwind = np.where(vi >= 0, c_bot, c_top)
    fy[1:ny, :] = vi * upwind - K * (c_top - c_bot) / dx
    if not closed_domain:
        vb = v[0, :]
        if ghosts is not None:
            fy[0, :] = vb * np.where(vb >= 0, gs, c[0, :]) - K * (c[0, :] - gs) / dx
        else:
            fy[0, :] = vb * np.where(vb >= 0, 0.0, c[0, :])
        vb = v[ny, :]
        if ghosts is not None:
            fy[ny, :] = vb * np.where(vb >= 0, c[-1, :], gn) - K * (gn - c[-1, :]) / dx
        else:
            fy[ny, :] = vb * np.where(vb >= 0, c[-1, :], 0.0)

    # --- obstacle faces are no-flux ------------------------------------------
    if not np.all(open_cells):
        blocked = ~open_cells
        fx[:, 1:nx][blocked[:, :-1] | blocked[:, 1:]] = 0.0
        fx[:, 0][blocked[:, 0]] = 0.0
        fx[:, nx][blocked[:, -1]] = 0.0
        fy[1:ny, :][blocked[:-1, :] | blocked[1:, :]] = 0.0
        fy[0, :][blocked[0, :]] = 0.0
        fy[ny, :][blocked[-1, :]] = 0.0
    return fx, fy


def _advance_once(f: Field, wind: WindField, K: float, dt: float,
                  closed_domain: bool, ghosts: GhostRing | None,
                  mixing_height_m: float) -> float:
    """One stable step; returns grams that left through open boundaries."""
    grid = f.grid
    dx = grid.cell_m
    open_cells = (np.ones((grid.ny, grid.nx), dtype=bool)
                  if grid.obstacle_mask is None else ~grid.obstacle_mask)
    fx, fy = _face_fluxes(f.values, wind, K, dx, open_cells, closed_domain, ghosts)
    f.values += dt / dx * (fx[:, :-1] - fx[:, 1:] + fy[:-1, :] - fy[1:, :])
    f.values[~open_cells] = 0.0
    if closed_domain:
        return 0.0
    # net boundary outflux in ppm*m/s*m -> grams over dt
    boundary_out = (fx[:, -1].sum() - fx[:, 0].sum()
                    + fy[-1, :].sum() - fy[0, :].sum())
    return boundary_out * dt * dx * mixing_height_m / PPM_PER_G_M3


def _resolve_wind(grid: Grid, wind) -> tuple[WindField, float]:
    # speed bound is the |u|+|v| sum so the combined Courant number of the
    # two sweep directions stays within the positivity budget
    if isinstance(wind, WindField):
        umax = float(np.abs(wind.u).max()) + float(np.abs(wind.v).max())
        return wind, umax
    ux, uy = wind
    return uniform_wind_field(grid, ux, uy), abs(ux) + abs(uy)


def step_field(f: Field, wind, sources: list[PointSource], dt: float,
               mixing_height_m: float, closed_domain: bool = False,
               ghosts: GhostRing | None = None) -> StepDiagnostics:
    """Advance a field by ``dt``, sub-stepping to the stability limit.

    ``wind`` is either a uniform ``(ux, uy)`` tuple or a staggered
    :class:`WindField`.  Sources inject at their configured rate for the
    whole interval.  Ghosts (fine grids) are held fixed across sub-steps;
    refresh them between outer steps.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    wind_field, umax = _resolve_wind(f.grid, wind)
    K = f.grid.diffusivity_m2s
    dt_max = f.grid.max_stable_dt(umax)
    n_sub = max(1, int(np.ceil(dt / dt_max)))
    tau = dt / n_sub
    diag = StepDiagnostics()
    for _ in range(n_sub):
        diag.injected_g += inject_sources(f, sources, tau, mixing_height_m)
        diag.outflow_g += _advance_once(f, wind_field, K, tau, closed_domain,
                                        ghosts, mixing_height_m)
        f.time_s += tau
    return diag


def step_coarse(f: Field, wind, sources: list[PointSource], dt: float,
                mixing_height_m: float, closed_domain: bool = False) -> StepDiagnostics:
    """Regional-model stand-in: no obstacles, open zero-gradient boundaries."""
    return step_field(f, wind, sources, dt, mixing_height_m,
                      closed_domain=closed_domain)


def step_fine(f: Field, wind: WindField, sources: list[PointSource],
              ghosts: GhostRing, dt: float, mixing_height_m: float) -> StepDiagnostics:
    """Geometry-resolving stand-in: obstacle mask + coarse-fed boundaries."""
    return step_field(f, wind, sources, dt, mixing_height_m,
                      closed_domain=False, ghosts=ghosts)


def nest_boundary(coarse_t0: Field, coarse_t1: Field, nest, tau: float) -> GhostRing:
    """Fine ghost-ring values at time ``tau``.

    Bilinear in space on the coarse field, linear in time between the two
    bracketing coarse snapshots.  ``tau`` outside the bracket clamps.
    """
    t0, t1 = coarse_t0.time_s, coarse_t1.time_s
    if t1 > t0:
        w = min(1.0, max(0.0, (tau - t0) / (t1 - t0)))
    else:
        w = 0.0
    edges = {}
    for name, (xs, ys) in nest.ghost_centers().items():
        v0 = coarse_t0.sample(xs, ys)
        v1 = coarse_t1.sample(xs, ys)
        edges[name] = np.asarray((1.0 - w) * v0 + w * v1)
    return GhostRing(west=edges["west"], east=edges["east"],
                     south=edges["south"], north=edges["north"])
