"""Multiscale plume transport: coarse/fine solvers, wind adjustment, oracle."""

from .grids import (COARSE_CELL_M, FINE_CELL_M, Field, Grid, NestSpec,
                    bilinear_sample, parse_ascii_grid, to_ascii_grid,
                    to_geojson_cells)
from .plume import PlumeOracleSpec, gaussian_plume, matched_oracle
from .solver import (GhostRing, PointSource, StepDiagnostics, inject_sources,
                     nest_boundary, step_coarse, step_field, step_fine,
                     total_mass)
from .units import PPM_PER_G_M3, g_per_m3_to_ppm, ppm_to_g_per_m3
from .wind import (PoissonConvergenceError, WindField, adjust_wind,
                   uniform_wind_field)

__all__ = [
    "COARSE_CELL_M", "FINE_CELL_M", "Field", "Grid", "NestSpec",
    "bilinear_sample", "parse_ascii_grid", "to_ascii_grid", "to_geojson_cells",
    "PlumeOracleSpec", "gaussian_plume", "matched_oracle",
    "GhostRing", "PointSource", "StepDiagnostics", "inject_sources",
    "nest_boundary", "step_coarse", "step_field", "step_fine", "total_mass",
    "PPM_PER_G_M3", "g_per_m3_to_ppm", "ppm_to_g_per_m3",
    "PoissonConvergenceError", "WindField", "adjust_wind", "uniform_wind_field",
]
