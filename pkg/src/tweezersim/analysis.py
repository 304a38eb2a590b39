"""
Imaging-fidelity statistics, quantum-jump detection and the fits built on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.stats import binomtest

from .classify import ClassifiedStack
from .dynamics import release_recapture_curve

DEFAULT_LEVEL = 0.68


class FitError(RuntimeError):
    def __init__(self, msg, **diagnostics):
        super().__init__(msg)
        self.diagnostics = diagnostics


class GridBoundaryError(FitError):
    pass


@dataclass(frozen=True)
class Proportion:
    """Binomial proportion k/n with a confidence interval; n = 0 means no data."""

    k: int
    n: int
    level: float = DEFAULT_LEVEL
    method: str = "wilson"

    @property
    def has_data(self):
        return self.n > 0

    @property
    def value(self):
        return self.k / self.n if self.n else math.nan

    @property
    def interval(self):
        if not self.n:
            return (math.nan, math.nan)
        m = "exact" if self.method in ("exact", "clopper-pearson") else "wilson"
        ci = binomtest(self.k, self.n).proportion_ci(self.level, method=m)
        return (float(ci.low), float(ci.high))

    @property
    def stderr(self):
        """Normal-approximation error, floored at sqrt(k)/n for small counts."""
        if not self.n:
            return math.nan
        p = self.value
        return max(math.sqrt(p * (1 - p) / self.n), math.sqrt(self.k) / self.n)

    def __repr__(self):
        lo, hi = self.interval
        return f"Proportion({self.k}/{self.n} = {self.value:.4g} [{lo:.3g}, {hi:.3g}])"


@dataclass
class TransitionStats:
    exposure: float
    n_bb: int
    n_bd: int
    n_db: int
    n_dd: int
    level: float = DEFAULT_LEVEL
    n_db_excl: int | None = None
    n_dd_excl: int | None = None
    n_bright_frames: int = 0
    n_frames_total: int = 0

    @property
    def counts(self):
        return {"n_bb": self.n_bb, "n_bd": self.n_bd, "n_db": self.n_db, "n_dd": self.n_dd}

    @property
    def p_bd(self):
        return Proportion(self.n_bd, self.n_bb + self.n_bd, self.level)

    @property
    def p_db(self):
        return Proportion(self.n_db, self.n_db + self.n_dd, self.level)

    @property
    def p_db_excl(self):
        if self.n_db_excl is None:
            return None
        return Proportion(self.n_db_excl, self.n_db_excl + self.n_dd_excl, self.level)

    @property
    def jump_rate(self):
        """d->b events per bright-origin frame pair, i.e. per atom-present interval."""
        return Proportion(self.n_db, self.n_bb + self.n_bd, self.level)

    @property
    def infidelity(self):
        """Residual d->b errors per bright image; None before jump exclusion."""
        if self.n_db_excl is None:
            return None
        return Proportion(self.n_db_excl, self.n_bright_frames, self.level)

    @property
    def fidelity(self):
        inf = self.infidelity
        return None if inf is None else 1.0 - inf.value


def _pairs(stack: ClassifiedStack):
    seq = stack.sequences()
    if seq.size == 0 or seq.shape[1] < 2:
        raise ValueError("transition statistics need a non-empty stack with >= 2 frames")
    return seq[:, :-1], seq[:, 1:]


def transition_stats(stack: ClassifiedStack, level=DEFAULT_LEVEL) -> TransitionStats:
    a, b = _pairs(stack)
    seq = stack.sequences()
    return TransitionStats(
        stack.exposure,
        int(np.sum(a & b)), int(np.sum(a & ~b)), int(np.sum(~a & b)), int(np.sum(~a & ~b)),
        level, n_bright_frames=int(seq.sum()), n_frames_total=int(seq.size))


@dataclass(frozen=True)
class JumpEvent:
    site: int  # flattened sequence index
    start_frame: int
    end_frame: int
    duration: float  # s
    right_censored: bool = False

    def __post_init__(self):
        if self.end_frame < self.start_frame:
            raise ValueError("end_frame must be >= start_frame")


def _runs(x):
    """(value, start, length) of maximal runs of a 1D boolean array."""
    if x.size == 0:
        return []
    edges = np.flatnonzero(np.diff(x.astype(np.int8))) + 1
    starts = np.concatenate([[0], edges])
    lengths = np.diff(np.concatenate([starts, [x.size]]))
    return list(zip(x[starts], starts, lengths))


def detect_jumps(stack: ClassifiedStack, min_dark=2, min_bright_before=1, min_bright_after=2):
    """Dark intervals bracketed by bright images: candidate metastable excursions.

    An event is a maximal run of at least ``min_dark`` dark frames with at
    least ``min_bright_before`` bright frames immediately before it and at
    least ``min_bright_after`` immediately after. Qualifying runs that reach
    the end of the record are returned with ``right_censored=True``.
    """
    period = stack.frame_period
    out = []
    for s, seq in enumerate(stack.sequences()):
        runs = _runs(seq)
        for i, (val, start, length) in enumerate(runs):
            if val or length < min_dark or i == 0:
                continue
            pv, _, plen = runs[i - 1]
            if not pv or plen < min_bright_before:
                continue
            end = start + length - 1
            if i == len(runs) - 1:
                out.append(JumpEvent(s, int(start), int(end), float(length * period), True))
                continue
            nv, _, nlen = runs[i + 1]
            if nv and nlen >= min_bright_after:
                out.append(JumpEvent(s, int(start), int(end), float(length * period), False))
    return out


@dataclass(frozen=True)
class ExpFit:
    tau: float
    stderr: float
    n_events: int
    n_censored: int = 0


def fit_exponential(durations, censored=None, truncation=0.0, min_events=5) -> ExpFit:
    """Maximum-likelihood exponential lifetime with right censoring.

    tau = sum(durations - truncation) / (number of uncensored durations).
    ``truncation`` is the shortest observable duration; zero reproduces the
    plain estimator.
    """
    d = np.asarray(durations, dtype=float)
    cens = np.zeros(d.size, dtype=bool) if censored is None else np.asarray(censored, dtype=bool)
    if cens.shape != d.shape:
        raise ValueError("censored flags must match durations")
    n_unc = int(np.sum(~cens))
    if n_unc < min_events:
        raise FitError(f"need >= {min_events} uncensored durations, got {n_unc}", n_uncensored=n_unc)
    tau = float(np.sum(d - truncation) / n_unc)
    return ExpFit(tau, tau / math.sqrt(n_unc), n_unc, int(cens.sum()))


def jump_durations(events, include_censored=False):
    ev = [e for e in events if include_censored or not e.right_censored]
    return np.array([e.duration for e in ev]), np.array([e.right_censored for e in ev], dtype=bool)


@dataclass
class FloorFit:
    p_m: float
    tau_m: float
    p_m_stderr: float
    tau_m_stderr: float
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    chi2: float = math.nan
    profile: dict = field(default_factory=dict)

    def interval(self, name, nsigma=2.0):
        """Profile-likelihood interval for 'p_m' or 'tau_m' at 1 or 2 sigma."""
        return self.profile[(name, float(nsigma))]

    def covers(self, name, value, nsigma=2.0):
        lo, hi = self.interval(name, nsigma)
        return lo <= value <= hi


def jump_floor_model(t, p_m, tau_m):
    return p_m * (1 - np.exp(-np.asarray(t) / tau_m))


def _points(points, a="exposure", b="p_db"):
    xs, ys, ss = [], [], []
    for p in points:
        if isinstance(p, dict):
            xs.append(p[a])
            ys.append(p[b])
            ss.append(p.get("sigma", math.nan))
        else:
            xs.append(p[0])
            ys.append(p[1])
            ss.append(p[2] if len(p) > 2 else math.nan)
    return np.asarray(xs, float), np.asarray(ys, float), np.asarray(ss, float)


def fit_jump_floor(points) -> FloorFit:
    """Weighted least-squares fit of p(t) = p_m (1 - exp(-t / tau_m)).

    ``points`` holds (exposure, p_db[, sigma]) tuples or dicts with those
    keys. Without sigmas the fit is unweighted and parameter errors are
    scaled by the residual variance.
    """
    t, y, s = _points(points)
    if t.size < 3 or np.unique(t).size < 3:
        raise FitError("need >= 3 distinct exposures", n=t.size)
    if t.max() < 3 * t.min():
        raise FitError("exposures must span a factor >= 3", span=t.max() / t.min())
    weighted = bool(np.all(np.isfinite(s)) and np.all(s > 0))
    w = 1 / s**2 if weighted else np.ones_like(t)

    # profile over tau for a starting point: p_m is linear at fixed tau
    taus = np.geomspace(t.min() * 1e-2, t.max() * 1e4, 600)
    f = 1 - np.exp(-t[None, :] / taus[:, None])
    p = np.clip((f * w * y).sum(1) / (f * w * f).sum(1), 1e-12, 1 - 1e-9)
    sse = ((y - p[:, None] * f) ** 2 * w).sum(1)
    i = int(np.argmin(sse))
    try:
        popt, pcov = curve_fit(jump_floor_model, t, y, p0=(p[i], taus[i]),
                               sigma=s if weighted else None, absolute_sigma=weighted,
                               bounds=([0, 0], [1, np.inf]), xtol=1e-15, ftol=1e-15, gtol=1e-15,
                               max_nfev=20000)
    except (RuntimeError, ValueError) as exc:
        raise FitError(f"jump-floor fit did not converge: {exc}", start=(p[i], taus[i])) from exc
    err = np.sqrt(np.diag(pcov))
    if not np.all(np.isfinite(popt)):
        raise FitError("jump-floor fit returned non-finite parameters", popt=popt)
    resid = y - jump_floor_model(t, *popt)
    chi2 = float(np.sum(resid**2 * w))
    ci = _floor_profile(t, y, w, popt, chi2, (1.0, 2.0)) if weighted else {}
    return FloorFit(float(popt[0]), float(popt[1]), float(err[0]), float(err[1]), resid, chi2, ci)


def _floor_profile(t, y, w, popt, chi2_min, levels):
    """Profile-chi^2 intervals {(name, nsigma): (lo, hi)}; inf marks an open side.

    With exposures short against tau_m the two parameters are nearly
    degenerate (only p_m / tau_m is fixed) and the curvature errors are far
    too small, so these intervals are the ones to quote.
    """
    taus = np.geomspace(t.min() * 1e-2, t.max() * 1e4, 1500)
    f = 1 - np.exp(-t[None, :] / taus[:, None])  # (T, n)
    # tau profile: p_m is linear at fixed tau, clipped to its bounds
    p_tau = np.clip((f * w * y).sum(1) / (f * w * f).sum(1), 0, 1)
    prof_tau = ((y - p_tau[:, None] * f) ** 2 * w).sum(1)
    # p_m profile over a grid, minimising over the tau grid
    ps = np.unique(np.concatenate([np.geomspace(popt[0] * 1e-3, 1.0, 1500), [popt[0]]]))
    prof_p = np.array([((y - pm * f) ** 2 * w).sum(1).min() for pm in ps])
    out = {}
    for name, grid, prof in (("p_m", ps, prof_p), ("tau_m", taus, prof_tau)):
        prof = np.minimum(prof, np.inf)
        best = min(chi2_min, prof.min())
        for z in levels:
            inside = np.flatnonzero(prof - best <= z * z)
            lo = 0.0 if inside[0] == 0 else float(grid[inside[0]])
            hi = math.inf if inside[-1] == grid.size - 1 else float(grid[inside[-1]])
            out[(name, z)] = (lo, hi)
    return out


def excluded_error_rate(stack: ClassifiedStack, jumps, level=DEFAULT_LEVEL) -> TransitionStats:
    """Transition statistics with the frames of detected jump events removed from the d->b tally."""
    st = transition_stats(stack, level)
    seq = stack.sequences()
    inside = np.zeros(seq.shape, dtype=bool)
    for e in jumps:
        if not e.right_censored:
            inside[e.site, e.start_frame:e.end_frame + 1] = True
    a, b = seq[:, :-1], seq[:, 1:]
    keep = ~inside[:, :-1]
    st.n_db_excl = int(np.sum(~a & b & keep))
    st.n_dd_excl = int(np.sum(~a & ~b & keep))
    return st


@dataclass(frozen=True)
class TemperatureFit:
    T: float
    stderr: float
    grid: tuple = ()
    objective: tuple = ()


def fit_temperature_rr(measured, trap, power, oracle_traj, T_grid, seed=0, n_shots=None,
                       **oracle_kw) -> TemperatureFit:
    """Temperature from release-and-recapture data by matching Monte Carlo curves on a grid.

    Every grid temperature is simulated with the same seed (common random
    numbers). The objective is chi^2 when ``n_shots`` (per data point) is
    given, otherwise the plain sum of squares; the minimum is refined by a
    parabola through the best grid point and its neighbours.
    """
    if oracle_traj < 10_000:
        raise ValueError("oracle_traj must be >= 1e4")
    if isinstance(measured, dict):
        t, y = np.asarray(measured["t"], float), np.asarray(measured["p"], float)
    else:
        t, y, _ = _points([(m.t, m.p_recapture) if hasattr(m, "t") else m for m in measured])
    grid = np.sort(np.asarray(T_grid, dtype=float))
    if grid.size < 3:
        raise ValueError("temperature grid needs >= 3 points")
    model = np.array([[q.p_recapture for q in
                       release_recapture_curve(trap, power, T, t, oracle_traj, seed, **oracle_kw)]
                      for T in grid])
    resid2 = (model - y[None, :]) ** 2
    if n_shots:
        var = np.clip(y * (1 - y), 0.25 / n_shots, None) / n_shots + model * (1 - model) / oracle_traj
        obj = (resid2 / var).sum(1)
    else:
        obj = resid2.sum(1)
    i = int(np.argmin(obj))
    if i == 0:
        raise GridBoundaryError("objective minimum at the lowest grid temperature; extend the grid downward",
                                grid=grid, objective=obj)
    if i == grid.size - 1:
        raise GridBoundaryError("objective minimum at the highest grid temperature; extend the grid upward",
                                grid=grid, objective=obj)
    x3, o3 = grid[i - 1:i + 2], obj[i - 1:i + 2]
    a, b, _ = np.polyfit(x3, o3, 2)
    if a <= 0:
        T_best, curv = grid[i], math.nan
    else:
        T_best, curv = -b / (2 * a), a
    if n_shots:
        stderr = 1 / math.sqrt(curv) if curv == curv else math.nan
    else:
        s2 = obj[i] / max(t.size - 1, 1)
        stderr = math.sqrt(s2 / curv) if curv == curv else math.nan
    return TemperatureFit(float(T_best), float(stderr), tuple(grid), tuple(obj))


UNBOUNDED = math.inf


def max_defect_free_size(p_bd):
    """Largest array expected to survive one image without a defect, floor(1 / p_bd)."""
    if p_bd == 0:
        return UNBOUNDED
    if not 0 < p_bd < 1:
        raise ValueError("p_bd must lie in (0, 1)")
    return int(math.floor(1 / p_bd * (1 + 1e-12)))
