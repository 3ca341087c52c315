"""Uniform 2D grids, concentration fields and snapshot export formats.

Fields store depth-integrated CH4 concentration in ppm above ambient on
cell centers; index order is ``values[j, i]`` with ``i`` along +x and
``j`` along +y.  Obstacle cells (fine grids only) are flagged in the
grid's mask and always hold zero concentration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

COARSE_CELL_M = 32.0
FINE_CELL_M = 5.0


@dataclass
class Grid:
    nx: int
    ny: int
    cell_m: float
    origin_m: tuple[float, float] = (0.0, 0.0)
    diffusivity_m2s: float = 1.0
    obstacle_mask: np.ndarray | None = None  # (ny, nx) bool, True = blocked

    def __post_init__(self) -> None:
        if self.nx <= 0 or self.ny <= 0 or self.cell_m <= 0:
            raise ValueError("grid dimensions and cell size must be positive")
        if self.diffusivity_m2s < 0:
            raise ValueError("diffusivity must be >= 0")
        if self.obstacle_mask is not None:
            self.obstacle_mask = np.asarray(self.obstacle_mask, dtype=bool)
            if self.obstacle_mask.shape != (self.ny, self.nx):
                raise ValueError("obstacle mask shape must be (ny, nx)")

    @property
    def extent_m(self) -> tuple[float, float]:
        return self.nx * self.cell_m, self.ny * self.cell_m

    def contains(self, x: float, y: float) -> bool:
        x0, y0 = self.origin_m
        w, h = self.extent_m
        return x0 <= x <= x0 + w and y0 <= y <= y0 + h

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(i, j) of the cell containing the point, clipped to the grid."""
        x0, y0 = self.origin_m
        i = int(np.clip((x - x0) / self.cell_m, 0, self.nx - 1))
        j = int(np.clip((y - y0) / self.cell_m, 0, self.ny - 1))
        return i, j

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x0, y0 = self.origin_m
        xs = x0 + (np.arange(self.nx) + 0.5) * self.cell_m
        ys = y0 + (np.arange(self.ny) + 0.5) * self.cell_m
        return xs, ys

    def is_open(self, i: int, j: int) -> bool:
        if self.obstacle_mask is None:
            return True
        return not bool(self.obstacle_mask[j, i])

    def max_stable_dt(self, umax: float) -> float:
        """Positivity-preserving step for upwind advection + explicit diffusion.

        Stricter than the individual CFL limits so the combined update keeps
        the center-cell coefficient nonnegative (no over/undershoots).
        """
        adv = 0.5 * self.cell_m / umax if umax > 0 else np.inf
        diff = (0.125 * self.cell_m ** 2 / self.diffusivity_m2s
                if self.diffusivity_m2s > 0 else np.inf)
        dt = min(adv, diff)
        if not np.isfinite(dt):
            return 1.0
        return dt


@dataclass
class Field:
    grid: Grid
    values: np.ndarray = None  # (ny, nx) ppm above ambient
    time_s: float = 0.0

    def __post_init__(self) -> None:
        if self.values is None:
            self.values = np.zeros((self.grid.ny, self.grid.nx))
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.ny, self.grid.nx):
            raise ValueError("field shape must match grid (ny, nx)")

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy(), self.time_s)

    def sample(self, x, y):
        """Bilinear sample at world coordinates, edge-clamped outside."""
        return bilinear_sample(self.grid, self.values, x, y)


def bilinear_sample(grid: Grid, values: np.ndarray, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x0, y0 = grid.origin_m
    # continuous index space anchored on cell centers
    fx = np.clip((x - x0) / grid.cell_m - 0.5, 0.0, grid.nx - 1.0)
    fy = np.clip((y - y0) / grid.cell_m - 0.5, 0.0, grid.ny - 1.0)
    i0 = np.floor(fx).astype(int)
    j0 = np.floor(fy).astype(int)
    i1 = np.minimum(i0 + 1, grid.nx - 1)
    j1 = np.minimum(j0 + 1, grid.ny - 1)
    wx = fx - i0
    wy = fy - j0
    v = ((1 - wx) * (1 - wy) * values[j0, i0]
         + wx * (1 - wy) * values[j0, i1]
         + (1 - wx) * wy * values[j1, i0]
         + wx * wy * values[j1, i1])
    return float(v) if v.ndim == 0 else v


@dataclass
class NestSpec:
    """Placement of a fine grid strictly inside a coarse grid's interior."""

    coarse: Grid
    fine: Grid
    ghost_width: int = 1

    def __post_init__(self) -> None:
        if self.fine.cell_m > self.coarse.cell_m:
            raise ValueError("nested grid must not be coarser than its parent")
        cx0, cy0 = self.coarse.origin_m
        cw, ch = self.coarse.extent_m
        fx0, fy0 = self.fine.origin_m
        fw, fh = self.fine.extent_m
        pad = self.coarse.cell_m  # strictly inside the coarse interior
        if not (cx0 + pad <= fx0 and fx0 + fw <= cx0 + cw - pad
                and cy0 + pad <= fy0 and fy0 + fh <= cy0 + ch - pad):
            raise ValueError("fine region must sit strictly inside the coarse interior")

    def ghost_centers(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """World coordinates of the one-cell ghost ring, per edge."""
        g = self.fine
        x0, y0 = g.origin_m
        d = g.cell_m
        xs = x0 + (np.arange(g.nx) + 0.5) * d
        ys = y0 + (np.arange(g.ny) + 0.5) * d
        return {
            "west": (np.full(g.ny, x0 - 0.5 * d), ys),
            "east": (np.full(g.ny, x0 + (g.nx + 0.5) * d), ys),
            "south": (xs, np.full(g.nx, y0 - 0.5 * d)),
            "north": (xs, np.full(g.nx, y0 + (g.ny + 0.5) * d)),
        }


def to_ascii_grid(f: Field) -> str:
    """Plain-text raster: header + row-major values (north row first)."""
    lines = [
        f"ncols {f.grid.nx}",
        f"nrows {f.grid.ny}",
        f"xllcorner {f.grid.origin_m[0]:.3f}",
        f"yllcorner {f.grid.origin_m[1]:.3f}",
        f"cellsize {f.grid.cell_m:.3f}",
        f"time_s {f.time_s:.3f}",
    ]
    for j in range(f.grid.ny - 1, -1, -1):
        lines.append(" ".join(f"{v:.6g}" for v in f.values[j]))
    return "\n".join(lines) + "\n"


def parse_ascii_grid(text: str) -> Field:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    keys = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "time_s"}
    header = {}
    row_start = 0
    for k, ln in enumerate(lines):
        parts = ln.split()
        if len(parts) == 2 and parts[0] in keys:
            header[parts[0]] = float(parts[1])
            row_start = k + 1
        else:
            break
    nx, ny = int(header["ncols"]), int(header["nrows"])
    grid = Grid(nx=nx, ny=ny, cell_m=header["cellsize"],
                origin_m=(header["xllcorner"], header["yllcorner"]))
    rows = [list(map(float, ln.split())) for ln in lines[row_start:row_start + ny]]
    values = np.array(rows[::-1])
    return Field(grid, values, time_s=header.get("time_s", 0.0))


def to_geojson_cells(f: Field, min_value: float = 0.0) -> dict:
    """GeoJSON-style cell polygons (scenario meters as coordinates)."""
    x0, y0 = f.grid.origin_m
    d = f.grid.cell_m
    features = []
    for j in range(f.grid.ny):
        for i in range(f.grid.nx):
            v = float(f.values[j, i])
            if v <= min_value:
                continue
            xa, ya = x0 + i * d, y0 + j * d
            ring = [[xa, ya], [xa + d, ya], [xa + d, ya + d], [xa, ya + d], [xa, ya]]
            features.append({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": {"ppm": round(v, 4), "i": i, "j": j},
            })
    return {"type": "FeatureCollection", "features": features,
            "properties": {"time_s": f.time_s, "cell_m": d}}
