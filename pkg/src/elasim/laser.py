"""Laser beam model: spectral colour, beam rasterization and mask-restricted compositing.

A beam is a straight band of width ``omega`` pixels through an anchor point,
at angle ``phi`` measured from the +x (column) axis toward +y (rows). Its
edges are anti-aliased over one pixel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

OMEGA_MIN, OMEGA_MAX = 1.0, 12.0
LAMBDA_MIN, LAMBDA_MAX = 400.0, 700.0
DEFAULT_BETA = 0.7


@dataclass(frozen=True)
class LaserParams:
    phi: float  # rad in [0, pi); pi/2 is a vertical beam
    omega: float  # px
    wavelength: float  # nm

    def __post_init__(self):
        if not 0.0 <= self.phi < math.pi:
            raise ValueError(f"beam angle {self.phi} outside [0, pi)")
        if not OMEGA_MIN <= self.omega <= OMEGA_MAX:
            raise ValueError(f"beam width {self.omega} outside [{OMEGA_MIN}, {OMEGA_MAX}]")
        if not LAMBDA_MIN <= self.wavelength <= LAMBDA_MAX:
            raise ValueError(f"wavelength {self.wavelength} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")

    @property
    def slope(self):
        """tan(phi); vertical beams report infinity."""
        if self.phi == math.pi / 2:
            return math.inf
        return math.tan(self.phi)

    def slope_text(self):
        k = self.slope
        return "inf" if math.isinf(k) else repr(k)

    def as_array(self):
        return np.array([self.phi, self.omega, self.wavelength])


def _piece(lam):
    """RGB on the piecewise-linear spectral ramp (scalar ``lam`` in nm)."""
    if lam < 440.0:
        return (-(lam - 440.0) / 60.0, 0.0, 1.0)
    if lam < 490.0:
        return (0.0, (lam - 440.0) / 50.0, 1.0)
    if lam < 510.0:
        return (0.0, 1.0, -(lam - 510.0) / 20.0)
    if lam < 580.0:
        return ((lam - 510.0) / 70.0, 1.0, 0.0)
    if lam < 645.0:
        return (1.0, -(lam - 645.0) / 65.0, 0.0)
    return (1.0, 0.0, 0.0)


def wavelength_to_rgb(lam):
    """Visible-band colour of a wavelength in nm, channels in [0, 1].

    Accepted input is 380..780 nm. Below 400 nm the violet ramp is clipped
    at full red-blue; above 700 nm stays pure red.
    """
    lam = float(lam)
    if not 380.0 <= lam <= 780.0:
        raise ValueError(f"wavelength {lam} nm outside [380, 780]")
    r, g, b = _piece(lam)
    return np.clip(np.array([r, g, b]), 0.0, 1.0)


def line_distance(phi, anchor, i, j):
    """Perpendicular distance from pixel centres (i, j) to the beam's centre line."""
    dx = i - anchor[0]
    dy = j - anchor[1]
    return np.abs(dx * math.sin(phi) - dy * math.cos(phi))


def coverage_from_distance(d, omega):
    """Anti-aliased band profile: 1 within omega/2 - 0.5, 0 beyond omega/2 + 0.5."""
    return np.clip(omega / 2.0 + 0.5 - d, 0.0, 1.0)


def rasterize_beam(params, anchor, width, height):
    """Coverage map (height, width) of a beam through ``anchor`` (column, row)."""
    i = np.arange(width, dtype=np.float64)[None, :]
    j = np.arange(height, dtype=np.float64)[:, None]
    return coverage_from_distance(line_distance(params.phi, anchor, i, j), params.omega)


def composite(image, mask, params, anchor, beta=DEFAULT_BETA, coverage=None):
    """Additive, clipped laser light restricted to ``mask``.

    Pixels outside the mask are copied unchanged.
    """
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.ndim != 3 or image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} disagree")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"blend factor {beta} outside [0, 1]")
    out = image.copy()
    if beta == 0.0:
        return out
    h, w = mask.shape
    if coverage is None:
        coverage = rasterize_beam(params, anchor, w, h)
    rgb = wavelength_to_rgb(params.wavelength)
    jj, ii = np.nonzero(mask)
    add = beta * coverage[jj, ii][:, None] * rgb
    out[jj, ii] = np.clip(image[jj, ii] + add, 0.0, 1.0).astype(image.dtype)
    return out


def random_params(rng):
    """One uniform draw over the parameter box."""
    phi = float(rng.uniform(0.0, math.pi))
    omega = float(rng.uniform(OMEGA_MIN, OMEGA_MAX))
    lam = float(rng.uniform(LAMBDA_MIN, LAMBDA_MAX))
    return LaserParams(phi % math.pi, omega, lam)


def param_grid(n_phi=36, n_omega=12, n_lambda=31):
    """Regular grid over the box; phi excludes pi (same beam as 0)."""
    phis = np.arange(n_phi) * (math.pi / n_phi)
    omegas = np.linspace(OMEGA_MIN, OMEGA_MAX, n_omega)
    lams = np.linspace(LAMBDA_MIN, LAMBDA_MAX, n_lambda)
    return phis, omegas, lams
