import dataclasses
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import constants as C
from scipy import stats

from tweezersim import pipelines as pl
from tweezersim.config import Scenario, resolve
from tweezersim.dynamics import (
    LifetimeModel,
    LoadingModel,
    State,
    StateChainParams,
    imaging_lifetime,
    release_recapture_curve,
    sample_thermal,
    simulate_loading,
    simulate_timeline,
)
from tweezersim.physics import YB174_556, ImagingSpec, PhysicsDomainError, TrapSpec, trap_frequencies
from tweezersim.seeding import item_rng, item_seed

MASS = 173.9388664 * C.atomic_mass
IMG = ImagingSpec(3.0, -1.5, 30e-3)


# --- thermal sampling -----------------------------------------------------

def test_sample_thermal_cold_limit():
    a = sample_thermal(TrapSpec(), 6e-3, 1e-15, seed=1, n=1000)
    b = sample_thermal(TrapSpec(), 6e-3, 1e-9, seed=1, n=1000)
    # spreads scale as sqrt(T)
    assert a.position.std() / b.position.std() == pytest.approx(math.sqrt(1e-6), rel=1e-6)
    assert np.abs(a.velocity).max() < 1e-6


def test_sample_thermal_rejects_nonpositive_T():
    with pytest.raises(PhysicsDomainError):
        sample_thermal(TrapSpec(), 6e-3, 0.0, seed=1)


def test_sample_thermal_warns_when_depth_below_kT():
    with pytest.warns(UserWarning):
        sample_thermal(TrapSpec(), 6e-3, 1e-3, seed=1)


def test_sample_thermal_equipartition():
    T, n = 6.4e-6, 100_000
    s = sample_thermal(TrapSpec(), 6e-3, T, seed=3, n=n)
    ke = 0.5 * MASS * np.sum(s.velocity**2, axis=1)
    # kinetic energy per atom is (k T / 2) chi^2_3: mean 3kT/2, sd sqrt(6) kT/2
    assert abs(ke.mean() - 1.5 * C.k * T) < 3 * math.sqrt(6) * C.k * T / 2 / math.sqrt(n)
    wr = trap_frequencies(TrapSpec(), 6e-3, MASS).omega_radial
    var_expected = C.k * T / (MASS * wr**2)
    v = s.position[:, 0].var()
    assert abs(v - var_expected) < 3 * var_expected * math.sqrt(2 / n)


# --- release and recapture -----------------------------------------------

def test_recapture_at_zero_is_one():
    pts = release_recapture_curve(TrapSpec(), 6e-3, 6.4e-6, [0.0, 30e-6], 2000, seed=5)
    assert pts[0].p_recapture == 1.0
    assert 0.0 <= pts[1].p_recapture <= 1.0


@pytest.mark.parametrize("kw", [dict(release_times=[]), dict(n_traj=50), dict(T=0.0)])
def test_recapture_errors(kw):
    base = dict(trap=TrapSpec(), power=6e-3, T=6.4e-6, release_times=[1e-5], n_traj=1000, seed=1)
    base.update(kw)
    with pytest.raises(PhysicsDomainError):
        release_recapture_curve(**base)


@pytest.mark.property
def test_recapture_hotter_escapes_more():
    ts = [5e-6, 10e-6, 20e-6, 40e-6, 80e-6]
    cold = release_recapture_curve(TrapSpec(), 6e-3, 5e-6, ts, 10_000, seed=9)
    hot = release_recapture_curve(TrapSpec(), 6e-3, 20e-6, ts, 10_000, seed=9)
    for c, h in zip(cold, hot):
        assert h.p_recapture <= c.p_recapture + 3 * math.hypot(c.stderr, h.stderr)


@pytest.mark.property
def test_recapture_nonincreasing_in_T_paired():
    t = [30e-6]
    ps = [release_recapture_curve(TrapSpec(), 6e-3, T, t, 10_000, seed=4)[0] for T in (3e-6, 6e-6, 9e-6, 12e-6)]
    for a, b in zip(ps, ps[1:]):
        assert b.p_recapture <= a.p_recapture + 3 * math.hypot(a.stderr, b.stderr)


def test_recapture_deterministic():
    a = release_recapture_curve(TrapSpec(), 6e-3, 6.4e-6, [2e-5, 4e-5], 1000, seed=12)
    b = release_recapture_curve(TrapSpec(), 6e-3, 6.4e-6, [2e-5, 4e-5], 1000, seed=12)
    assert a == b


# --- lifetime model --------------------------------------------------------

def test_imaging_lifetime_examples():
    m = LifetimeModel()
    assert imaging_lifetime(3.0, m) == pytest.approx(7.2)
    assert imaging_lifetime(0.0, m) == m.tau_background
    assert imaging_lifetime(m.s_ref + 1 / m.slope, m) == pytest.approx(m.tau_ref / math.e)


# --- state chain -----------------------------------------------------------

def test_chain_defaults_and_invariants():
    c = StateChainParams()
    assert c.rate_g_to_m * c.tau_m == pytest.approx(c.p_m)
    with pytest.raises(PhysicsDomainError):
        StateChainParams(p_m=1.0)
    with pytest.raises(PhysicsDomainError):
        StateChainParams(rate_m_to_loss=-1)
    with pytest.raises(PhysicsDomainError):
        StateChainParams(tau_loss=0)


def test_static_atom_all_bright_poisson():
    chain = StateChainParams(tau_loss=math.inf, p_m=0.0)
    tl = simulate_timeline(chain, IMG, YB174_556, 20_000, True, seed=1)
    assert np.all(tl.internal == State.BRIGHT)
    mean = np.mean(tl.photons)
    R = YB174_556.linewidth_gamma / 2 * 3 / 13
    assert abs(mean - R * 30e-3) < 3 * math.sqrt(R * 30e-3 / tl.photons.size)


@pytest.mark.property
def test_photon_dispersion_poisson():
    chain = StateChainParams(tau_loss=math.inf, p_m=0.0)
    img = ImagingSpec(3.0, -1.5, 1e-4)  # small mean: a stringent dispersion check
    tl = simulate_timeline(chain, img, YB174_556, 100_000, True, seed=2)
    r = tl.photons.var() / tl.photons.mean()
    assert 0.9 <= r <= 1.1


def test_empty_site_emits_nothing():
    tl = simulate_timeline(StateChainParams(), IMG, YB174_556, 100, False, seed=3)
    assert np.all(tl.internal == State.LOST)
    assert tl.photons.sum() == 0
    assert tl.frames[0] == {"internal": "lost", "photons_emitted": 0}


@pytest.mark.property
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), tau_loss=st.floats(0.05, 5), p_m=st.floats(0, 0.5))
def test_absorbing_loss_and_dark_frames_emit_nothing(seed, tau_loss, p_m):
    chain = StateChainParams(tau_loss=tau_loss, tau_m=0.2, p_m=p_m, rate_m_to_loss=0.5)
    tl = simulate_timeline(chain, ImagingSpec(3.0, -1.5, 20e-3, 25e-3), YB174_556, 300, True, seed=seed)
    lost = np.flatnonzero(tl.internal == State.LOST)
    if lost.size:
        assert np.all(tl.internal[lost[0]:] == State.LOST)
    # photons only from frames with some bright time
    assert np.all(tl.photons[tl.bright_time <= 0] == 0)
    # the continuous-time record never leaves LOST
    st_ = tl.event_states
    k = np.flatnonzero(st_ == State.LOST)
    if k.size:
        assert k[0] == st_.size - 1


@pytest.mark.property
def test_metastable_steady_state():
    chain = StateChainParams(tau_loss=math.inf, tau_m=0.54, p_m=4e-3)
    img = ImagingSpec(3.0, -1.5, 0.1)
    occ = []
    for s in range(40):
        tl = simulate_timeline(chain, img, YB174_556, 20_000, True, seed=item_rng(77, s))
        occ.append(1 - tl.bright_time.sum() / (tl.n_frames * img.exposure))
    occ = np.array(occ)
    target = chain.steady_state_metastable()
    assert target == pytest.approx(4e-3, rel=5e-3)
    # replicate-to-replicate spread gives sigma for the ensemble fraction
    assert abs(occ.mean() - target) < 3 * occ.std(ddof=1) / math.sqrt(occ.size)


def test_mean_dark_interval_matches_tau_m():
    chain = StateChainParams(tau_loss=math.inf, tau_m=0.54, p_m=0.05)
    img = ImagingSpec(3.0, -1.5, 0.1)
    durations = []
    s = 0
    while len(durations) < 1500:
        tl = simulate_timeline(chain, img, YB174_556, 5000, True, seed=item_rng(5, s))
        t, z = tl.event_times, tl.event_states
        for i in np.flatnonzero(z == State.DARK_METASTABLE):
            if i + 1 < z.size:
                durations.append(t[i + 1] - t[i])
        s += 1
    d = np.array(durations)
    assert abs(d.mean() - 0.54) < 3 * 0.54 / math.sqrt(d.size)


@pytest.mark.property
def test_survival_curve_ks():
    chain = StateChainParams(tau_loss=2.0, p_m=0.0, rate_g_to_m=0.0)
    img = ImagingSpec(3.0, -1.5, 0.01)
    loss = np.array([simulate_timeline(chain, img, YB174_556, 1000, True, seed=item_rng(3, i)).loss_time()
                     for i in range(10_000)])
    horizon = 1000 * img.frame_period
    # censor at the record length: compare on the observed part
    obs = loss[np.isfinite(loss)]
    assert np.all(obs < horizon)
    frac = obs.size / loss.size
    assert abs(frac - (1 - math.exp(-horizon / 2.0))) < 3 * math.sqrt(frac * (1 - frac) / loss.size)
    cdf = lambda x: (1 - np.exp(-x / 2.0)) / (1 - math.exp(-horizon / 2.0))  # noqa: E731
    res = stats.kstest(obs, cdf)
    # 3 sigma on the KS statistic: p-value above 0.0027
    assert res.pvalue > 0.0027


# --- loading -------------------------------------------------------------

def test_loading_certain():
    occ = simulate_loading(LoadingModel.uniform(16, 1.0), 50, seed=1)
    assert occ.shape == (50, 16) and np.all(occ == 1)


def test_loading_statistics():
    n = 10_000
    occ = simulate_loading(LoadingModel.uniform(144, 0.49), n, seed=2019)
    fill = occ.sum(axis=1)
    assert set(np.unique(occ)) <= {0, 1}
    assert abs(fill.mean() - 70.56) < 3 * math.sqrt(144 * 0.49 * 0.51 / n)
    z = np.abs(occ.mean(axis=0) - 0.49) / math.sqrt(0.49 * 0.51 / n)
    # 3 sigma per site, Bonferroni-corrected over the 144 sites
    assert z.max() <= stats.norm.isf(0.0027 / 2 / 144)
    assert np.mean(z > 3) < 0.03


def test_loading_errors():
    with pytest.raises(PhysicsDomainError):
        LoadingModel((0.5, 1.2))
    with pytest.raises(PhysicsDomainError):
        simulate_loading(LoadingModel.uniform(4), 0)
    with pytest.raises(PhysicsDomainError):
        simulate_loading(LoadingModel((0.5,), parity_projection=False), 10)


# --- determinism ----------------------------------------------------------

def test_item_seed_is_order_independent():
    key = lambda ss: (ss.entropy, ss.spawn_key, tuple(ss.generate_state(4)))  # noqa: E731
    a = [key(item_seed(42, r, k)) for r in range(3) for k in range(3)]
    b = [key(item_seed(42, r, k)) for r in reversed(range(3)) for k in reversed(range(3))][::-1]
    assert a == b
    assert len(set(a)) == len(a)
    assert item_rng(42, 1, 2).integers(1 << 62) == item_rng(42, 1, 2).integers(1 << 62)


def test_timeline_seed_determinism():
    a = simulate_timeline(StateChainParams(), IMG, YB174_556, 200, True, seed=item_rng(1, 0))
    b = simulate_timeline(StateChainParams(), IMG, YB174_556, 200, True, seed=item_rng(1, 0))
    assert np.array_equal(a.internal, b.internal) and np.array_equal(a.photons, b.photons)


def _small_job(ms=20.0):
    cfg = resolve({"pipeline": "fig3bcd-fidelity-jumps", "imaging": {"exposure_ms": ms},
                   "run": {"record_s": 0.5, "seed": 7}})
    sc = Scenario(cfg)
    return pl.make_job(sc, ms, 0)


@pytest.mark.property
def test_block_identical_across_worker_counts():
    job = _small_job()
    a = pl.simulate_block(job, 6, jobs=1)
    b = pl.simulate_block(job, 6, jobs=3)
    assert np.array_equal(a.rois, b.rois)
    assert np.array_equal(a.internal, b.internal)
    assert np.array_equal(a.loaded, b.loaded)
    # a record does not depend on how many others are simulated
    c = pl.simulate_block(job, 3, jobs=2)
    assert np.array_equal(a.rois[:3], c.rois)
