"""
Closed-form atomic and trap physics for narrow-line imaging in tweezers.

Conventions: the linewidth is stored as an angular frequency (rad/s). A
config quotes it in Hz and :meth:`TransitionSpec.from_hz` multiplies by 2*pi.
Scattering rates are photons per second computed from the rad/s linewidth,
R = (Gamma/2) * s / (1 + s + 4 (Delta/Gamma)^2). Detunings are dimensionless,
in units of Gamma, negative to the red.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import constants as const

h = const.h
hbar = const.hbar
k_B = const.k
c = const.c
amu = const.atomic_mass
g_earth = const.g

RECOIL_MASS_174 = 173.9388664 * amu


class PhysicsDomainError(ValueError):
    """Argument outside the physical domain of a closed-form expression."""


@dataclass(frozen=True)
class TransitionSpec:
    wavelength: float  # m
    linewidth_gamma: float  # rad/s
    atom_mass: float  # kg
    label: str = ""

    def __post_init__(self):
        if not self.wavelength > 0:
            raise PhysicsDomainError("wavelength must be positive")
        if not self.linewidth_gamma > 0:
            raise PhysicsDomainError("linewidth_gamma must be positive")
        if not self.atom_mass > 0:
            raise PhysicsDomainError("atom_mass must be positive")

    @classmethod
    def from_hz(cls, wavelength, linewidth_hz, mass_u, label=""):
        return cls(wavelength, 2 * np.pi * linewidth_hz, mass_u * amu, label)

    @property
    def linewidth_hz(self):
        return self.linewidth_gamma / (2 * np.pi)

    @property
    def wavenumber(self):
        return 2 * np.pi / self.wavelength


# 1S0 - 3P1 intercombination line of 174Yb
YB174_556 = TransitionSpec(556e-9, 2 * np.pi * 182e3, RECOIL_MASS_174, "174Yb 1S0-3P1")


@dataclass(frozen=True)
class TrapSpec:
    trap_wavelength: float = 532e-9  # m
    waist: float = 700e-9  # m
    power_per_tweezer: float = 6e-3  # W
    depth_per_power: float = 1e9  # Hz/W, 6 MHz at 6 mW
    shift_fraction_mj0: float = 0.016
    # no number available for m_J = +-1; placeholder with the opposite sign
    shift_fraction_mj1: float = -0.022

    def __post_init__(self):
        if not self.depth_per_power > 0:
            raise PhysicsDomainError("depth_per_power must be positive")
        if self.power_per_tweezer < 0:
            raise PhysicsDomainError("power_per_tweezer must be non-negative")

    @property
    def rayleigh_range(self):
        return np.pi * self.waist**2 / self.trap_wavelength


@dataclass(frozen=True)
class ImagingSpec:
    saturation: float = 3.0  # I / I_sat
    detuning: float = -1.5  # Delta / Gamma
    exposure: float = 30e-3  # s
    frame_period: float | None = None  # s, defaults to exposure
    # total photon -> count efficiency; None defers to the camera chain
    detection_efficiency: float | None = None

    def __post_init__(self):
        if self.saturation < 0:
            raise PhysicsDomainError("saturation must be >= 0")
        if not self.exposure > 0:
            raise PhysicsDomainError("exposure must be positive")
        if self.frame_period is None:
            object.__setattr__(self, "frame_period", self.exposure)
        if self.frame_period < self.exposure:
            raise PhysicsDomainError("frame_period must be >= exposure")
        if self.detection_efficiency is not None and not 0 < self.detection_efficiency <= 1:
            raise PhysicsDomainError("detection_efficiency must lie in (0, 1]")


def scattering_ratio(s, delta):
    """Steady-state scattering rate in units of Gamma/2."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise PhysicsDomainError("saturation parameter must be >= 0")
    out = s / (1 + s + 4 * np.asarray(delta, dtype=float) ** 2)
    return out if out.ndim else float(out)


def scattering_rate(t: TransitionSpec, s, delta):
    """Two-level scattering rate in photons/s."""
    return 0.5 * t.linewidth_gamma * scattering_ratio(s, delta)


def doppler_limit_temperature(t: TransitionSpec, s, delta):
    """One-dimensional Doppler cooling temperature in K.

    T = hbar Gamma / (8 k_B) * (1 + s + 4 delta^2) / |delta|, which at s -> 0
    is minimal at delta = -1/2 with value hbar Gamma / (2 k_B).
    """
    s = np.asarray(s, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(s < 0):
        raise PhysicsDomainError("saturation parameter must be >= 0")
    if np.any(delta >= 0):
        raise PhysicsDomainError("Doppler cooling needs red detuning (delta < 0)")
    out = hbar * t.linewidth_gamma / (8 * k_B) * (1 + s + 4 * delta**2) / np.abs(delta)
    return out if out.ndim else float(out)


def optimal_cooling_detuning(s):
    """Detuning (units of Gamma) minimising the Doppler temperature at saturation s."""
    return -0.5 * np.sqrt(1 + np.asarray(s, dtype=float))


def saturation_intensity(t: TransitionSpec):
    """I_sat = pi h c Gamma / (3 lambda^3) in W/m^2."""
    return np.pi * h * c * t.linewidth_gamma / (3 * t.wavelength**3)


@dataclass(frozen=True)
class TrapDepth:
    depth_freq: float  # Hz
    depth_temp: float  # K

    @property
    def energy(self):
        return h * self.depth_freq


def trap_depth(tr: TrapSpec, power=None) -> TrapDepth:
    if power is None:
        power = tr.power_per_tweezer
    if power < 0:
        raise PhysicsDomainError("power must be >= 0")
    f = tr.depth_per_power * power
    return TrapDepth(f, h * f / k_B)


def light_shift(tr: TrapSpec, depth_freq, m_j):
    """Differential light shift of the 1S0 -> 3P1(m_J) line in Hz, positive = blue."""
    if np.any(np.asarray(depth_freq) < 0):
        raise PhysicsDomainError("depth must be >= 0")
    if m_j == 0:
        return tr.shift_fraction_mj0 * depth_freq
    if m_j in (1, -1):
        return tr.shift_fraction_mj1 * depth_freq
    raise PhysicsDomainError(f"invalid m_J {m_j!r}; expected 0 or +-1")


@dataclass(frozen=True)
class TrapFrequencies:
    radial: float  # Hz
    axial: float  # Hz

    @property
    def omega_radial(self):
        return 2 * np.pi * self.radial

    @property
    def omega_axial(self):
        return 2 * np.pi * self.axial


def trap_frequencies(tr: TrapSpec, power=None, mass=RECOIL_MASS_174) -> TrapFrequencies:
    """Harmonic frequencies at the bottom of a Gaussian-beam tweezer."""
    if tr.waist <= 0:
        raise PhysicsDomainError("waist must be positive")
    if power is None:
        power = tr.power_per_tweezer
    if power <= 0:
        raise PhysicsDomainError("power must be positive")
    U = trap_depth(tr, power).energy
    w_r = np.sqrt(4 * U / (mass * tr.waist**2))
    w_z = np.sqrt(2 * U / (mass * tr.rayleigh_range**2))
    return TrapFrequencies(w_r / (2 * np.pi), w_z / (2 * np.pi))


@dataclass(frozen=True)
class Recoil:
    velocity: float  # m/s
    temperature: float  # K


def recoil(t: TransitionSpec) -> Recoil:
    p = hbar * t.wavenumber
    return Recoil(p / t.atom_mass, p**2 / (t.atom_mass * k_B))


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    slope_stderr: float = float("nan")
    intercept_stderr: float = float("nan")


def fit_light_shift_slope(points) -> LineFit:
    """Least-squares line through (power [W], shift [Hz]) points.

    ``points`` is an iterable of ``(power, shift)`` pairs or mappings with
    ``power`` and ``shift`` keys.
    """
    pw, sh = [], []
    for p in points:
        if isinstance(p, dict):
            pw.append(p["power"])
            sh.append(p["shift"])
        else:
            pw.append(p[0])
            sh.append(p[1])
    x = np.asarray(pw, dtype=float)
    y = np.asarray(sh, dtype=float)
    if x.size < 2 or np.unique(x).size < 2:
        raise PhysicsDomainError("need at least two distinct power values to fit a line")
    A = np.column_stack([x, np.ones_like(x)])
    coef, _, _, _ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = coef
    dof = x.size - 2
    if dof > 0:
        resid = y - A @ coef
        s2 = resid @ resid / dof
        cov = s2 * np.linalg.inv(A.T @ A)
        return LineFit(float(slope), float(intercept), float(np.sqrt(cov[0, 0])), float(np.sqrt(cov[1, 1])))
    return LineFit(float(slope), float(intercept))
