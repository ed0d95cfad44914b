"""Conversion between estimated frequencies and FMCW radar target states."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError, OutOfFieldOfViewError
from ..tensor_spectrum import signed_freq

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class RadarParams:
    """Waveform and array constants, all in SI units.

    ``mu`` is the chirp slope in Hz/s, ``T_s`` the fast-time sampling
    interval, ``T_r`` the chirp repetition interval and ``d`` the element
    spacing.
    """

    f_c: float
    mu: float
    T_s: float
    T_r: float
    d: float

    def __post_init__(self):
        for name in ("f_c", "mu", "T_s", "T_r", "d"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidArgumentError(f"radar parameter {name} must be positive, got {v}")

    @classmethod
    def iwr1642(cls) -> "RadarParams":
        """77 GHz chirp, 29.982 MHz/us slope, 10 MHz sampling, 160 us repetition, half-wavelength array."""
        f_c = 77e9
        return cls(f_c=f_c, mu=29.982e12, T_s=1e-7, T_r=160e-6, d=SPEED_OF_LIGHT / f_c / 2)


def freq_to_state(freqs, params: RadarParams) -> tuple[float, float, float]:
    """``(range m, radial velocity m/s, azimuth rad)`` from up to three frequencies.

    Fast-time frequency maps to range, slow-time to velocity and spatial to
    azimuth. Velocity and azimuth use the signed frequency in ``[-pi, pi)``;
    missing dimensions give zero.

    Raises:
        OutOfFieldOfViewError: the spatial frequency has no real azimuth.
    """
    w = np.atleast_1d(np.asarray(freqs, dtype=float))
    if w.size < 1 or w.size > 3:
        raise InvalidArgumentError(f"expected 1 to 3 frequencies, got {w.size}")
    c = SPEED_OF_LIGHT
    rng = c * float(w[0]) / (4 * math.pi * params.mu * params.T_s)
    vel = 0.0
    az = 0.0
    if w.size > 1:
        vel = c * float(signed_freq(w[1])) / (4 * math.pi * params.f_c * params.T_r)
    if w.size > 2:
        s = c * float(signed_freq(w[2])) / (2 * math.pi * params.f_c * params.d)
        if abs(s) > 1.0:
            raise OutOfFieldOfViewError(f"spatial frequency {w[2]:.4f} rad maps outside the field of view (sin = {s:.4f})")
        az = math.asin(s)
    return rng, vel, az


def state_to_freq(rng: float, vel: float, az: float, params: RadarParams) -> np.ndarray:
    """Inverse of :func:`freq_to_state` (range term without the Doppler coupling)."""
    c = SPEED_OF_LIGHT
    return np.array([
        4 * math.pi * params.mu * rng * params.T_s / c,
        4 * math.pi * params.f_c * vel * params.T_r / c,
        2 * math.pi * params.f_c * params.d * math.sin(az) / c,
    ])
