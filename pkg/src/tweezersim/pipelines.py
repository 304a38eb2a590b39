"""
End-to-end scenario pipelines.

Randomness: every record (one loading + imaging sequence of the whole
array) is a work item with its own generators derived from the master seed
as ``item_seed(master, stream, exposure_index, record[, site])``. Records
can therefore be simulated in any order or process and reassemble to the
same arrays.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analysis as an
from .camera import CameraSpec, PSFModel, SiteLayout, expected_signal, render_rois
from .classify import CalibrationError, calibrate, classify_bayes, classify_threshold, scale_calibration
from .dynamics import (
    LoadingModel,
    State,
    StateChainParams,
    imaging_lifetime,
    release_recapture_curve,
    simulate_loading,
    simulate_timeline,
)
from .physics import (
    ImagingSpec,
    TransitionSpec,
    doppler_limit_temperature,
    fit_light_shift_slope,
    light_shift,
    scattering_ratio,
    trap_depth,
)
from .seeding import item_rng

STREAM_LOAD, STREAM_ATOM, STREAM_CAMERA, STREAM_MISC = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# record simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecordJob:
    chain: StateChainParams
    imaging: ImagingSpec
    transition: TransitionSpec
    camera: CameraSpec
    psf: PSFModel
    layout: SiteLayout
    p_site: tuple
    n_frames: int
    n_tweezers_total: int
    master: int
    exposure_index: int


def simulate_one_record(job: RecordJob, r):
    """Loading, timelines and rendered ROIs for record ``r``."""
    n_sites = job.layout.n_sites
    loaded = item_rng(job.master, STREAM_LOAD, job.exposure_index, r).random(n_sites) < np.asarray(job.p_site)
    photons = np.zeros((job.n_frames, n_sites), dtype=np.int64)
    bright = np.zeros((n_sites, job.n_frames))
    internal = np.zeros((n_sites, job.n_frames), dtype=np.uint8)
    for k in range(n_sites):
        tl = simulate_timeline(job.chain, job.imaging, job.transition, job.n_frames, bool(loaded[k]),
                               item_rng(job.master, STREAM_ATOM, job.exposure_index, r, k), site=k)
        photons[:, k] = tl.photons
        bright[k] = tl.bright_time / job.imaging.exposure
        internal[k] = tl.internal
    eff = job.imaging.detection_efficiency
    rois = render_rois(photons, job.psf, job.camera, job.layout, job.n_tweezers_total, job.imaging.exposure,
                       item_rng(job.master, STREAM_CAMERA, job.exposure_index, r), efficiency=eff)
    return loaded, rois, bright, internal


def _run_chunk(args):
    job, rs = args
    return [simulate_one_record(job, r) for r in rs]


@dataclass
class RecordBlock:
    exposure: float
    frame_period: float
    loaded: np.ndarray  # (n_rec, n_sites)
    rois: np.ndarray  # (n_rec, n_frames, n_sites, roi, roi) int32
    bright_fraction: np.ndarray  # (n_rec, n_sites, n_frames)
    internal: np.ndarray  # (n_rec, n_sites, n_frames)

    @property
    def n_records(self):
        return self.rois.shape[0]

    def truth(self):
        """(+1 fully bright, 0 fully dark, -1 partial) per (record, site, frame)."""
        t = np.full(self.bright_fraction.shape, -1, dtype=np.int8)
        t[self.bright_fraction >= 1 - 1e-12] = 1
        t[self.bright_fraction <= 1e-12] = 0
        return t


def simulate_block(job: RecordJob, n_records, jobs=1) -> RecordBlock:
    idx = list(range(n_records))
    if jobs and jobs > 1:
        chunks = [idx[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_run_chunk, [(job, c) for c in chunks]))
        by_index = {}
        for c, res in zip(chunks, parts):
            by_index.update(zip(c, res))
        results = [by_index[i] for i in idx]
    else:
        results = [simulate_one_record(job, r) for r in idx]
    loaded, rois, bright, internal = (np.stack(x) for x in zip(*results))
    return RecordBlock(job.imaging.exposure, job.imaging.frame_period, loaded, rois, bright, internal)


def make_job(sc, exposure_ms, exposure_index, chain=None, master=None):
    imaging = sc.imaging(exposure_ms)
    period = imaging.frame_period
    n_frames = max(2, int(round(sc.cfg["run"]["record_s"] / period)))
    return RecordJob(chain or sc.chain, imaging, sc.transition, sc.camera, sc.psf, sc.layout,
                     sc.loading.p_site, n_frames, sc.layout.n_sites,
                     sc.seed if master is None else master, exposure_index)


def records_for(job: RecordJob, site_frames):
    return max(1, int(math.ceil(site_frames / (job.n_frames * job.layout.n_sites))))


# ---------------------------------------------------------------------------
# per-exposure analysis
# ---------------------------------------------------------------------------

@dataclass
class ClassifierErrors:
    """Error counts against simulation ground truth on fully bright / fully dark frames."""

    k_bd: int
    n_bright: int
    k_db: int
    n_dark: int

    @property
    def p_bd(self):
        return an.Proportion(self.k_bd, self.n_bright)

    @property
    def p_db(self):
        return an.Proportion(self.k_db, self.n_dark)

    @property
    def total(self):
        return an.Proportion(self.k_bd + self.k_db, self.n_bright + self.n_dark)


def classifier_errors(labels, truth):
    b, d = truth == 1, truth == 0
    return ClassifierErrors(int(np.sum(~labels[b])), int(b.sum()), int(np.sum(labels[d])), int(d.sum()))


@dataclass
class ExposureResult:
    exposure: float
    frame_period: float
    stats: an.TransitionStats
    jumps: list
    errors: dict
    priors: list
    n_records: int
    n_frames: int
    stats_threshold: an.TransitionStats | None = None
    calibrations: list | None = None


def calibrate_block(block: RecordBlock, sc, reference=None):
    """Self-calibrate; if the classes are too close, start from ``reference`` = (calibs, exposure)."""
    cam = sc.camera
    kw = dict(read_noise=cam.read_noise * cam.gain, gain=cam.gain)
    try:
        return calibrate(block.rois, sc.layout, **kw)
    except CalibrationError:
        if reference is None:
            raise
        ref, ref_exposure = reference
        return calibrate(block.rois, sc.layout, initial=scale_calibration(ref, block.exposure / ref_exposure),
                         **kw)


def analyze_block(block: RecordBlock, sc, classifier="bayes", reference=None, calibrations=None) -> ExposureResult:
    """Classify, tally transitions and jumps; ``calibrations`` skips calibration entirely."""
    a = sc.cfg["analysis"]
    cal = calibrations if calibrations is not None else calibrate_block(block, sc, reference)
    bayes = classify_bayes(block.rois, cal, sc.layout, block.frame_period, block.exposure)
    thr = classify_threshold(block.rois, cal, sc.layout, block.frame_period, block.exposure)
    stacks = {"bayes": bayes, "threshold": thr}
    main = stacks[classifier]
    jumps = an.detect_jumps(main, a["min_dark_frames"], a["min_bright_before"], a["min_bright_after"])
    stats = an.excluded_error_rate(main, jumps, a["ci_level"])
    truth = block.truth()
    errors = {k: classifier_errors(s.labels, truth) for k, s in stacks.items()}
    other = "threshold" if classifier == "bayes" else "bayes"
    return ExposureResult(block.exposure, block.frame_period, stats, jumps, errors,
                          [c.prior_bright for c in cal], block.n_records, block.rois.shape[1],
                          an.transition_stats(stacks[other], a["ci_level"]), cal)


def run_exposure(sc, exposure_ms, exposure_index, chain=None, site_frames=None, jobs=1, keep_block=False,
                 reference=None, calibrations=None):
    job = make_job(sc, exposure_ms, exposure_index, chain)
    n_rec = records_for(job, site_frames or sc.cfg["run"]["site_frames_per_exposure"])
    block = simulate_block(job, n_rec, jobs)
    res = analyze_block(block, sc, sc.cfg["analysis"]["classifier"], reference, calibrations)
    return (res, block) if keep_block else res


# ---------------------------------------------------------------------------
# fidelity / quantum-jump pipeline
# ---------------------------------------------------------------------------

@dataclass
class FidelityResult:
    exposures_ms: list
    runs: list  # ExposureResult, nominal chain
    floor_runs: list  # ExposureResult, loss disabled
    nojump_run: ExposureResult | None
    nojump_exposure_ms: float | None
    tau_loss: float
    floor_fit: an.FloorFit | None = None
    floor_fit_error: str | None = None
    tau_fit: an.ExpFit | None = None
    tau_fit_truncated: an.ExpFit | None = None
    tau_fit_censored: an.ExpFit | None = None
    n_jump_events: int = 0
    extras: dict = field(default_factory=dict)

    def by_exposure(self, ms):
        return self.runs[self.exposures_ms.index(ms)]

    def predicted_p_bd(self, i):
        """Loss-free measured floor plus the loss probability over one frame period."""
        run, fl = self.runs[i], self.floor_runs[i]
        return fl.stats.p_bd.value + 1 - math.exp(-run.frame_period / self.tau_loss)

    def rows(self):
        out = []
        for i, (ms, r) in enumerate(zip(self.exposures_ms, self.runs)):
            st, fl = r.stats, self.floor_runs[i].stats
            out.append({
                "exposure_ms": ms, "n_records": r.n_records, "n_frames": r.n_frames,
                "n_bb": st.n_bb, "n_bd": st.n_bd, "n_db": st.n_db, "n_dd": st.n_dd,
                "p_bd": st.p_bd.value, "p_bd_lo": st.p_bd.interval[0], "p_bd_hi": st.p_bd.interval[1],
                "p_db": st.p_db.value, "p_db_lo": st.p_db.interval[0], "p_db_hi": st.p_db.interval[1],
                "p_db_excl": st.p_db_excl.value, "p_db_excl_hi": st.p_db_excl.interval[1],
                "jump_rate": st.jump_rate.value, "infidelity": st.infidelity.value,
                "p_bd_floor": fl.p_bd.value, "p_bd_predicted": self.predicted_p_bd(i),
                "p_bd_threshold": r.stats_threshold.p_bd.value, "p_db_threshold": r.stats_threshold.p_db.value,
                "err_bayes": r.errors["bayes"].total.value, "err_threshold": r.errors["threshold"].total.value,
                "n_jumps": sum(not e.right_censored for e in r.jumps),
            })
        return out


def jump_fit_points(exposures_ms, runs, min_exposure_ms):
    pts = []
    for ms, r in zip(exposures_ms, runs):
        if ms < min_exposure_ms:
            continue
        jr = r.stats.jump_rate
        pts.append((ms * 1e-3, jr.value, math.sqrt(max(jr.k, 1)) / jr.n))
    return pts


def run_fidelity(sc, jobs=1, exposures_ms=None, site_frames=None, nojump_exposure_ms=30.0):
    """Nominal, loss-free and (at one exposure) jump-free runs over the exposure list."""
    ex = list(exposures_ms or sc.cfg["run"]["exposures_ms"])
    no_loss = dataclasses.replace(sc.chain, tau_loss=math.inf)
    no_jump = dataclasses.replace(sc.chain, p_m=0.0, rate_g_to_m=0.0)
    runs, floors = [None] * len(ex), [None] * len(ex)
    # longest first, so a weakly separated short exposure can start from a longer one's calibration
    ref = None
    for i in sorted(range(len(ex)), key=lambda j: -ex[j]):
        runs[i] = run_exposure(sc, ex[i], i, site_frames=site_frames, jobs=jobs, reference=ref)
        ref = (runs[i].calibrations, runs[i].exposure)
        # same seeds and same calibration: the difference is the loss process alone
        floors[i] = run_exposure(sc, ex[i], i, chain=no_loss, site_frames=site_frames, jobs=jobs,
                                 calibrations=runs[i].calibrations)
    nojump = None
    if nojump_exposure_ms is not None:
        i = ex.index(nojump_exposure_ms) if nojump_exposure_ms in ex else len(ex)
        nojump = run_exposure(sc, nojump_exposure_ms, i, chain=no_jump, site_frames=site_frames, jobs=jobs)
    res = FidelityResult(ex, runs, floors, nojump, nojump_exposure_ms, sc.chain.tau_loss)

    a = sc.cfg["analysis"]
    pts = jump_fit_points(ex, runs, a["jump_fit_min_exposure_ms"])
    try:
        res.floor_fit = an.fit_jump_floor(pts)
    except an.FitError as exc:
        res.floor_fit_error = str(exc)
    # short exposures produce noise-driven pseudo-jumps; durations come from the long ones
    long_runs = [r for ms, r in zip(ex, runs) if ms >= a["jump_fit_min_exposure_ms"]]
    events = [e for r in long_runs for e in r.jumps if not e.right_censored]
    res.n_jump_events = len(events)
    d, _ = an.jump_durations(events)
    if d.size >= 5:
        res.tau_fit = an.fit_exponential(d)
        # shortest detectable run is min_dark frames, less half a frame of phase
        trunc = np.concatenate([np.full(sum(not e.right_censored for e in r.jumps),
                                        (a["min_dark_frames"] - 0.5) * r.frame_period) for r in long_runs])
        res.tau_fit_truncated = an.ExpFit(float(np.mean(d - trunc)), float(np.mean(d - trunc) / math.sqrt(d.size)),
                                          d.size)
        # censored-aware variant: dark runs reaching the record end count as survivors
        d_all, c_all = an.jump_durations([e for r in long_runs for e in r.jumps], include_censored=True)
        res.tau_fit_censored = an.fit_exponential(d_all, c_all)
    return res


# ---------------------------------------------------------------------------
# quantum-jump duration statistics from synthetic label records
# ---------------------------------------------------------------------------

def synthetic_jump_durations(n_events, tau_m=0.54, frame_period=30e-3, seed=0, min_dark=2,
                             pad_frames=10, truncated=False):
    """Detect ``n_events`` jump events in label records built from exponential dark intervals.

    Each interval runs from a uniformly random phase within a frame and a
    frame reads dark when the atom is dark for more than half of it. Returns
    the :class:`ExpFit` of the detected events: the plain estimator, or with
    ``truncated`` the one that removes the unobservable (min_dark - 1/2)
    frames below the detection cut.
    """
    rng = np.random.default_rng(seed)
    from .classify import ClassifiedStack

    events = []
    while len(events) < n_events:
        need = 2 * (n_events - len(events)) + 8
        d = rng.exponential(tau_m, need)
        phase = rng.random(need) * frame_period
        n_dark_max = int(np.ceil((d.max() + frame_period) / frame_period)) + 1
        n = 2 * pad_frames + n_dark_max
        edges = np.arange(n + 1) * frame_period
        t0 = pad_frames * frame_period + phase
        t1 = t0 + d
        ov = np.clip(np.minimum(edges[None, 1:], t1[:, None]) - np.maximum(edges[None, :-1], t0[:, None]), 0, None)
        labels = ov <= 0.5 * frame_period
        st = ClassifiedStack.from_labels(labels, frame_period)
        events += [e for e in an.detect_jumps(st, min_dark) if not e.right_censored]
    events = events[:n_events]
    cut = (min_dark - 0.5) * frame_period if truncated else 0.0
    return an.fit_exponential([e.duration for e in events], truncation=cut)


# ---------------------------------------------------------------------------
# remaining figure pipelines
# ---------------------------------------------------------------------------

def lightshift_table(sc):
    run = sc.cfg["run"]
    rng = item_rng(sc.seed, STREAM_MISC, 0)
    rows, pts = [], []
    for p_mw in run["powers_mw"]:
        depth = trap_depth(sc.trap, p_mw * 1e-3).depth_freq
        s0 = light_shift(sc.trap, depth, 0)
        s1 = light_shift(sc.trap, depth, 1)
        meas = s0 + rng.normal(0, run["shift_noise_khz"] * 1e3)
        pts.append((p_mw * 1e-3, meas))
        rows.append({"power_mw": p_mw, "depth_mhz": depth / 1e6, "shift_mj0_khz": s0 / 1e3,
                     "shift_mj1_khz": s1 / 1e3, "measured_mj0_khz": meas / 1e3})
    fit = fit_light_shift_slope(pts)
    return rows, fit


def lifetime_table(sc):
    rows = []
    for s in sc.cfg["run"]["saturations"]:
        im = sc.cfg["imaging"]
        rows.append({
            "saturation": s,
            "lifetime_s": imaging_lifetime(s, sc.lifetime),
            "scattering_ratio": scattering_ratio(s, im["detuning_gamma"]),
            "doppler_temperature_uk": doppler_limit_temperature(sc.transition, s, im["detuning_gamma"]) * 1e6,
        })
    return rows


def histogram_run(sc, exposure_ms=None, site_frames=None, jobs=1, n_tweezers_total=None):
    """Simulate one exposure and return (block, calibrations, bayes stack, threshold stack)."""
    ms = sc.cfg["imaging"]["exposure_ms"] if exposure_ms is None else exposure_ms
    job = make_job(sc, ms, 0)
    if n_tweezers_total is not None:
        job = dataclasses.replace(job, n_tweezers_total=n_tweezers_total)
    block = simulate_block(job, records_for(job, site_frames or sc.cfg["run"]["site_frames_per_exposure"]), jobs)
    cam = sc.camera
    cal = calibrate(block.rois, sc.layout, read_noise=cam.read_noise * cam.gain, gain=cam.gain)
    return (block, cal, classify_bayes(block.rois, cal, sc.layout, block.frame_period, block.exposure),
            classify_threshold(block.rois, cal, sc.layout, block.frame_period, block.exposure))


def loading_stats(sc, n_shots=None, n_sites=144, p=None):
    n_shots = n_shots or sc.cfg["run"]["n_shots"]
    p = sc.cfg["loading"]["p_load"] if p is None else p
    occ = simulate_loading(LoadingModel.uniform(n_sites, p), n_shots, item_rng(sc.seed, STREAM_MISC, 4))
    return occ


def rr_data(sc, T=None, seed_offset=0):
    """Noisy release-and-recapture data: binomial shots on an oracle curve."""
    run = sc.cfg["run"]
    T = run["rr_temperature_uk"] * 1e-6 if T is None else T
    ts = np.asarray(run["rr_release_us"]) * 1e-6
    truth = release_recapture_curve(sc.trap, sc.trap.power_per_tweezer, T, ts, run["rr_traj"],
                                    item_rng(sc.seed, STREAM_MISC, 5, seed_offset),
                                    mass=sc.transition.atom_mass, gravity_axis=run["gravity_axis"])
    rng = item_rng(sc.seed, STREAM_MISC, 6, seed_offset)
    n = run["rr_shots_per_point"]
    meas = [(q.t, rng.binomial(n, q.p_recapture) / n) for q in truth]
    return truth, meas


def rr_fit(sc, meas, n_shots=None):
    run = sc.cfg["run"]
    return an.fit_temperature_rr(meas, sc.trap, sc.trap.power_per_tweezer, run["rr_traj"],
                                 np.asarray(run["rr_grid_uk"]) * 1e-6, seed=item_rng(sc.seed, STREAM_MISC, 7).integers(2**32),
                                 n_shots=n_shots, mass=sc.transition.atom_mass, gravity_axis=run["gravity_axis"])


def expected_counts(sc, exposure_ms):
    return expected_signal(sc.imaging(exposure_ms), sc.transition, sc.camera)


def internal_fraction(block: RecordBlock, state: State):
    return float(np.mean(block.internal == state))
