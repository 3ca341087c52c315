"""Concentration unit conversions between mass density and mole fraction."""

from __future__ import annotations

M_AIR_G_MOL = 28.97
M_CH4_G_MOL = 16.04
RHO_AIR_G_M3 = 1225.0

#: ppm of CH4 per g/m^3: (M_air / (M_CH4 * rho_air)) * 1e6  ~= 1474.4
PPM_PER_G_M3 = M_AIR_G_MOL / (M_CH4_G_MOL * RHO_AIR_G_M3) * 1e6


def g_per_m3_to_ppm(c):
    """Convert a CH4 mass concentration in g/m^3 to mole-fraction ppm."""
    return c * PPM_PER_G_M3


def ppm_to_g_per_m3(ppm):
    """Inverse of :func:`g_per_m3_to_ppm`."""
    return ppm / PPM_PER_G_M3
