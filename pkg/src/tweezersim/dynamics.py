"""
Monte Carlo dynamics of single trapped atoms.

Covers thermal initial conditions, release-and-recapture, the
bright / metastable / lost continuous-time Markov chain sampled into camera
frames, the imaging-lifetime model, and stochastic array loading.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .physics import (
    RECOIL_MASS_174,
    ImagingSpec,
    PhysicsDomainError,
    TransitionSpec,
    TrapSpec,
    g_earth,
    k_B,
    scattering_rate,
    trap_depth,
    trap_frequencies,
)
from .seeding import as_rng, item_rng


class State(enum.IntEnum):
    BRIGHT = 0
    DARK_METASTABLE = 1
    LOST = 2


# ---------------------------------------------------------------------------
# thermal sampling and release-and-recapture
# ---------------------------------------------------------------------------

@dataclass
class MotionalState:
    position: np.ndarray  # m, shape (3,) or (n, 3); axis 2 is the tweezer axis
    velocity: np.ndarray  # m/s

    def __post_init__(self):
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("motional state must be finite")


def _thermal_widths(trap, power, T, mass):
    f = trap_frequencies(trap, power, mass)
    sx = math.sqrt(k_B * T / (mass * f.omega_radial**2))
    sz = math.sqrt(k_B * T / (mass * f.omega_axial**2))
    sv = math.sqrt(k_B * T / mass)
    return np.array([sx, sx, sz]), sv


def sample_thermal(trap: TrapSpec, power, T, seed=None, n=None, mass=RECOIL_MASS_174) -> MotionalState:
    """Maxwell-Boltzmann velocities and harmonic-trap Boltzmann positions."""
    if not T > 0:
        raise PhysicsDomainError("temperature must be positive")
    depth = trap_depth(trap, power)
    if depth.depth_temp <= T:
        warnings.warn(f"trap depth {depth.depth_temp:.3g} K does not exceed k_B T at T={T:.3g} K")
    rng = as_rng(seed)
    sx, sv = _thermal_widths(trap, power, T, mass)
    shape = (3,) if n is None else (n, 3)
    pos = rng.standard_normal(shape) * sx
    vel = rng.standard_normal(shape) * sv
    return MotionalState(pos, vel)


def gaussian_potential(trap: TrapSpec, power, position):
    """Full Gaussian-beam potential energy (J) at ``position`` (..., 3)."""
    U0 = trap_depth(trap, power).energy
    x, y, z = position[..., 0], position[..., 1], position[..., 2]
    zr = trap.rayleigh_range
    q = 1 + (z / zr) ** 2
    w2 = trap.waist**2 * q
    return -U0 / q * np.exp(-2 * (x**2 + y**2) / w2)


@dataclass(frozen=True)
class RecapturePoint:
    t: float
    p_recapture: float
    stderr: float


def _bound(trap, power, mass, pos, vel):
    ke = 0.5 * mass * np.sum(vel**2, axis=-1)
    return ke + gaussian_potential(trap, power, pos) < 0


def release_recapture_curve(trap: TrapSpec, power, T, release_times, n_traj, seed=None,
                            mass=RECOIL_MASS_174, gravity_axis=0, g=g_earth):
    """Recapture probability after ballistic release for each time in ``release_times``.

    Initial states are harmonic thermal samples conditioned on being bound
    in the full Gaussian potential, so p(0) = 1. Common random numbers are
    used across release times and, for a fixed seed, across temperatures.
    """
    times = np.atleast_1d(np.asarray(release_times, dtype=float))
    if times.size == 0:
        raise PhysicsDomainError("release_times must not be empty")
    if n_traj < 100:
        raise PhysicsDomainError("n_traj must be >= 100")
    if not T > 0:
        raise PhysicsDomainError("temperature must be positive")
    rng = as_rng(seed)
    sx, sv = _thermal_widths(trap, power, T, mass)
    zpos = rng.standard_normal((n_traj, 3))
    zvel = rng.standard_normal((n_traj, 3))
    pos, vel = zpos * sx, zvel * sv
    bad = ~_bound(trap, power, mass, pos, vel)
    while bad.any():
        k = int(bad.sum())
        pos[bad] = rng.standard_normal((k, 3)) * sx
        vel[bad] = rng.standard_normal((k, 3)) * sv
        bad = ~_bound(trap, power, mass, pos, vel)

    acc = np.zeros(3)
    acc[gravity_axis] = -g
    out = []
    for t in times:
        if t < 0:
            raise PhysicsDomainError("release times must be >= 0")
        p_t = pos + vel * t + 0.5 * acc * t**2
        v_t = vel + acc * t
        p = float(np.mean(_bound(trap, power, mass, p_t, v_t)))
        out.append(RecapturePoint(float(t), p, math.sqrt(p * (1 - p) / n_traj)))
    return out


# ---------------------------------------------------------------------------
# imaging lifetime
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LifetimeModel:
    tau_ref: float = 7.2  # s at s_ref
    s_ref: float = 3.0
    slope: float = 1.0  # 1/e per unit of saturation parameter
    tau_background: float = 60.0  # s, vacuum-limited cap


def imaging_lifetime(s, model: LifetimeModel = LifetimeModel()):
    """Trap lifetime under continuous imaging at saturation ``s``."""
    if s < 0:
        raise PhysicsDomainError("saturation parameter must be >= 0")
    return min(model.tau_background, model.tau_ref * math.exp(-model.slope * (s - model.s_ref)))


# ---------------------------------------------------------------------------
# internal-state chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateChainParams:
    tau_loss: float = 7.2  # s, bright-state lifetime under imaging; inf disables loss
    tau_m: float = 0.54  # s
    p_m: float = 4e-3
    rate_m_to_loss: float = 0.0  # 1/s
    rate_g_to_m: float | None = None  # 1/s, defaults to p_m / tau_m

    def __post_init__(self):
        if self.rate_g_to_m is None:
            object.__setattr__(self, "rate_g_to_m", self.p_m / self.tau_m if self.tau_m > 0 else 0.0)
        if not self.tau_loss > 0 or not self.tau_m > 0:
            raise PhysicsDomainError("lifetimes must be positive (use inf to disable)")
        if not 0 <= self.p_m < 1:
            raise PhysicsDomainError("p_m must lie in [0, 1)")
        if self.rate_g_to_m < 0 or self.rate_m_to_loss < 0:
            raise PhysicsDomainError("rates must be >= 0")

    @property
    def rate_loss(self):
        return 0.0 if math.isinf(self.tau_loss) else 1.0 / self.tau_loss

    @property
    def rate_m_to_g(self):
        return 0.0 if math.isinf(self.tau_m) else 1.0 / self.tau_m

    def steady_state_metastable(self):
        """Metastable fraction of the bright <-> metastable chain without loss."""
        a, b = self.rate_g_to_m, self.rate_m_to_g
        return a / (a + b) if a + b > 0 else 0.0


@dataclass
class AtomTimeline:
    site: int
    loaded: bool
    internal: np.ndarray  # uint8 State per frame (majority state during the exposure)
    photons: np.ndarray  # emitted photons per frame
    bright_time: np.ndarray  # s spent bright during each exposure window
    exposure: float
    frame_period: float
    event_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    event_states: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    @property
    def n_frames(self):
        return self.internal.size

    @property
    def frames(self):
        return [{"internal": State(int(s)).name.lower(), "photons_emitted": int(n)}
                for s, n in zip(self.internal, self.photons)]

    def loss_time(self):
        """Continuous time the atom was lost, inf if it survived the record."""
        lost = np.flatnonzero(self.event_states == State.LOST)
        if not self.loaded:
            return 0.0
        return float(self.event_times[lost[0]]) if lost.size else math.inf


def _sample_events(chain: StateChainParams, t_total, loaded, rng):
    if not loaded:
        return np.array([0.0]), np.array([State.LOST], dtype=np.uint8)
    times, states = [0.0], [State.BRIGHT]
    t, s = 0.0, State.BRIGHT
    while s != State.LOST:
        if s == State.BRIGHT:
            rates = (chain.rate_g_to_m, chain.rate_loss)
            nxt = (State.DARK_METASTABLE, State.LOST)
        else:
            rates = (chain.rate_m_to_g, chain.rate_m_to_loss)
            nxt = (State.BRIGHT, State.LOST)
        out = rates[0] + rates[1]
        if out <= 0:
            break
        t += rng.exponential(1.0 / out)
        if t >= t_total:
            break
        s = nxt[0] if rng.random() * out < rates[0] else nxt[1]
        times.append(t)
        states.append(s)
    return np.array(times), np.array(states, dtype=np.uint8)


def _occupancy(times, states, t_total, starts, exposure):
    """Time spent in each state during every exposure window, shape (3, n_frames)."""
    ends_iv = np.append(times[1:], t_total)
    a = starts[None, :]
    b = a + exposure
    ov = np.clip(np.minimum(b, ends_iv[:, None]) - np.maximum(a, times[:, None]), 0.0, None)
    occ = np.zeros((3, starts.size))
    for k in range(3):
        m = states == k
        if m.any():
            occ[k] = ov[m].sum(axis=0)
    return occ


def simulate_timeline(chain: StateChainParams, imaging: ImagingSpec, transition: TransitionSpec,
                      n_frames, initially_loaded=True, seed=None, site=0) -> AtomTimeline:
    """One site's internal-state history sampled into ``n_frames`` camera frames."""
    if n_frames < 1:
        raise PhysicsDomainError("n_frames must be >= 1")
    rng = as_rng(seed)
    period, exposure = imaging.frame_period, imaging.exposure
    t_total = n_frames * period
    times, states = _sample_events(chain, t_total, bool(initially_loaded), rng)
    starts = np.arange(n_frames) * period
    occ = _occupancy(times, states, t_total, starts, exposure)
    # never-loaded sites spend the whole window "lost"
    internal = np.argmax(occ, axis=0).astype(np.uint8)
    bright = occ[State.BRIGHT]
    rate = scattering_rate(transition, imaging.saturation, imaging.detuning)
    photons = rng.poisson(rate * bright)
    return AtomTimeline(site, bool(initially_loaded), internal, photons, bright, exposure, period,
                        times, states)


def simulate_record(chain, imaging, transition, n_frames, loaded, master_seed, record_index):
    """Timelines for every site of one record; site k uses item seed (record_index, k)."""
    return [simulate_timeline(chain, imaging, transition, n_frames, bool(ld),
                              item_rng(master_seed, record_index, k), site=k)
            for k, ld in enumerate(loaded)]


# ---------------------------------------------------------------------------
# array loading
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadingModel:
    p_site: tuple = (0.49,) * 144
    parity_projection: bool = True

    def __post_init__(self):
        p = np.asarray(self.p_site, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise PhysicsDomainError("p_site must be a non-empty list")
        if np.any((p < 0) | (p > 1)):
            raise PhysicsDomainError("loading probabilities must lie in [0, 1]")
        object.__setattr__(self, "p_site", tuple(float(x) for x in p))

    @classmethod
    def uniform(cls, n_sites, p=0.49):
        return cls((p,) * n_sites)

    @property
    def n_sites(self):
        return len(self.p_site)


def simulate_loading(model: LoadingModel, n_shots, seed=None):
    """Occupancy matrix (shots x sites) of independent Bernoulli(p_i) sites."""
    if n_shots < 1:
        raise PhysicsDomainError("n_shots must be >= 1")
    if not model.parity_projection:
        # occupancies above one are outside this model
        raise PhysicsDomainError("only parity-projected (0/1) loading is modelled")
    rng = as_rng(seed)
    p = np.asarray(model.p_site)
    return (rng.random((n_shots, p.size)) < p).astype(np.uint8)
