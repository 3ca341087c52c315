"""Mass-consistent wind adjustment around resolved obstacles.

A uniform free-stream wind is projected onto the divergence-free space
honoring no-normal-flow on obstacle faces: solve a discrete Poisson
equation for a potential whose gradient removes the divergence created by
zeroing obstacle faces, then subtract that gradient.  Velocities live on a
staggered (MAC) layout: ``u`` on vertical faces, ``v`` on horizontal ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import Grid

POISSON_TOL = 1e-8
MAX_ITERATIONS = 50_000
SOR_OMEGA = 1.7


class PoissonConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"wind adjustment did not converge: residual {residual:.3e} "
            f"after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


@dataclass
class WindField:
    """Staggered face velocities on a grid: u (ny, nx+1), v (ny+1, nx)."""

    grid: Grid
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        ny, nx = self.grid.ny, self.grid.nx
        if self.u.shape != (ny, nx + 1) or self.v.shape != (ny + 1, nx):
            raise ValueError("staggered wind arrays must be (ny, nx+1) and (ny+1, nx)")

    def divergence(self) -> np.ndarray:
        """Per-cell discrete divergence (1/s)."""
        d = self.grid.cell_m
        return (self.u[:, 1:] - self.u[:, :-1] + self.v[1:, :] - self.v[:-1, :]) / d

    def cell_centered(self) -> tuple[np.ndarray, np.ndarray]:
        uc = 0.5 * (self.u[:, 1:] + self.u[:, :-1])
        vc = 0.5 * (self.v[1:, :] + self.v[:-1, :])
        return uc, vc


def uniform_wind_field(grid: Grid, ux: float, uy: float) -> WindField:
    return WindField(grid,
                     np.full((grid.ny, grid.nx + 1), float(ux)),
                     np.full((grid.ny + 1, grid.nx), float(uy)))


def _blocked_faces(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Face masks: True where a face touches an obstacle cell."""
    ny, nx = grid.ny, grid.nx
    blocked = (np.zeros((ny, nx), dtype=bool)
               if grid.obstacle_mask is None else grid.obstacle_mask)
    ub = np.zeros((ny, nx + 1), dtype=bool)
    ub[:, 1:nx] = blocked[:, :-1] | blocked[:, 1:]
    ub[:, 0] = blocked[:, 0]
    ub[:, nx] = blocked[:, -1]
    vb = np.zeros((ny + 1, nx), dtype=bool)
    vb[1:ny, :] = blocked[:-1, :] | blocked[1:, :]
    vb[0, :] = blocked[0, :]
    vb[ny, :] = blocked[-1, :]
    return ub, vb


def adjust_wind(grid: Grid, free_stream: tuple[float, float],
                tol: float = POISSON_TOL, max_iter: int = MAX_ITERATIONS,
                omega: float = SOR_OMEGA) -> WindField:
    """Divergence-free wind honoring obstacle no-flow, from a uniform inflow.

    Red-black SOR solves ``laplace(phi) = div(u0)`` with homogeneous
    Dirichlet ghosts on the open domain boundary and Neumann closure on
    obstacle faces; the corrected field is ``u0 - grad(phi)`` with obstacle
    faces pinned to exactly zero.  Raises
    :class:`PoissonConvergenceError` if the residual stalls above ``tol``.
    """
    wf = uniform_wind_field(grid, *free_stream)
    ub, vb = _blocked_faces(grid)
    if not ub.any() and not vb.any():
        return wf  # already divergence-free
    wf.u[ub] = 0.0
    wf.v[vb] = 0.0

    d = grid.cell_m
    open_cells = (np.ones((grid.ny, grid.nx), dtype=bool)
                  if grid.obstacle_mask is None else ~grid.obstacle_mask)
    div = wf.divergence()
    div[~open_cells] = 0.0
    rhs = div * d * d  # phi units: m^2/s

    ny, nx = grid.ny, grid.nx
    # neighbor links: obstacle neighbors drop out (Neumann), out-of-domain
    # ghosts count with phi = 0 (Dirichlet)
    open_pad = np.zeros((ny + 2, nx + 2), dtype=bool)
    open_pad[1:-1, 1:-1] = open_cells
    in_domain = np.zeros_like(open_pad)
    in_domain[1:-1, 1:-1] = True
    link_n = open_pad[2:, 1:-1] | ~in_domain[2:, 1:-1]
    link_s = open_pad[:-2, 1:-1] | ~in_domain[:-2, 1:-1]
    link_e = open_pad[1:-1, 2:] | ~in_domain[1:-1, 2:]
    link_w = open_pad[1:-1, :-2] | ~in_domain[1:-1, :-2]
    n_links = (link_n.astype(int) + link_s.astype(int)
               + link_e.astype(int) + link_w.astype(int))
    solvable = open_cells & (n_links > 0)

    jj, ii = np.indices((ny, nx))
    color = (ii + jj) % 2
    phi = np.zeros((ny + 2, nx + 2))

    def residual() -> float:
        lap = np.zeros((ny, nx))
        lap += np.where(link_n, phi[2:, 1:-1], phi[1:-1, 1:-1])
        lap += np.where(link_s, phi[:-2, 1:-1], phi[1:-1, 1:-1])
        lap += np.where(link_e, phi[1:-1, 2:], phi[1:-1, 1:-1])
        lap += np.where(link_w, phi[1:-1, :-2], phi[1:-1, 1:-1])
        lap -= 4.0 * phi[1:-1, 1:-1]
        r = np.where(solvable, lap - rhs, 0.0)
        return float(np.abs(r).max())

    iterations = 0
    res = residual()
    while res > tol:
        if iterations >= max_iter:
            raise PoissonConvergenceError(res, iterations)
        for c in (0, 1):
            mask = solvable & (color == c)
            nb_sum = np.zeros((ny, nx))
            nb_sum += np.where(link_n, phi[2:, 1:-1], phi[1:-1, 1:-1])
            nb_sum += np.where(link_s, phi[:-2, 1:-1], phi[1:-1, 1:-1])
            nb_sum += np.where(link_e, phi[1:-1, 2:], phi[1:-1, 1:-1])
            nb_sum += np.where(link_w, phi[1:-1, :-2], phi[1:-1, 1:-1])
            gs = (nb_sum - rhs) / 4.0
            inner = phi[1:-1, 1:-1]
            inner[mask] += omega * (gs[mask] - inner[mask])
        iterations += 1
        if iterations % 16 == 0 or iterations < 4:
            res = residual()

    # subtract the potential gradient; obstacle faces stay exactly zero
    gx = (phi[1:-1, 1:] - phi[1:-1, :-1]) / d  # (ny, nx+1) incl. boundary ghosts
    gy = (phi[1:, 1:-1] - phi[:-1, 1:-1]) / d
    wf.u -= np.where(ub, 0.0, gx)
    wf.v -= np.where(vb, 0.0, gy)
    wf.u[ub] = 0.0
    wf.v[vb] = 0.0
    return wf
