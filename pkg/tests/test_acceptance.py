"""End-to-end acceptance checks; each test records one pass/fail line in the session summary."""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from tweezersim import analysis as an
from tweezersim import pipelines as pl
from tweezersim.config import Scenario, resolve
from tweezersim.physics import YB174_556, TrapSpec, doppler_limit_temperature, light_shift, trap_depth
from tweezersim.runner import builtin_config
from tweezersim.seeding import item_seed


def scenario(name, **over):
    return Scenario(resolve(builtin_config(name), over))


def record(n, ok, detail):
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


@pytest.fixture(scope="module")
def fidelity():
    sc = scenario("fig3bcd-fidelity-jumps")
    t0 = time.time()
    res = pl.run_fidelity(sc, jobs=1)
    return sc, res, time.time() - t0


def test_criterion_01_doppler():
    t = doppler_limit_temperature(YB174_556, 0.0, -0.5)
    record(1, abs(t - 4.37e-6) / 4.37e-6 <= 0.02, f"T_D = {t * 1e6:.3f} uK (target 4.37, 2%)")


def test_criterion_02_trap_calibration():
    d = trap_depth(TrapSpec())
    s = light_shift(TrapSpec(), 6e6, 0)
    half = YB174_556.linewidth_hz / 2
    ok = (abs(d.depth_freq - 6e6) / 6e6 <= 0.01 and abs(d.depth_temp - 0.288e-3) / 0.288e-3 <= 0.01
          and abs(s - 96e3) / 96e3 <= 0.01 and abs(s - half) / half <= 0.10)
    record(2, ok, f"depth {d.depth_freq / 1e6:.3f} MHz = {d.depth_temp * 1e3:.4f} mK; "
                  f"shift {s / 1e3:.1f} kHz vs Gamma/2 {half / 1e3:.1f} kHz")


def test_criterion_03_fidelity_pipeline(fidelity):
    sc, res, dt = fidelity
    assert res.exposures_ms == [10, 15, 20, 25, 30, 50, 100]
    frames = [r.n_records * r.n_frames * sc.layout.n_sites for r in res.runs]
    assert min(frames) >= 1.9e5
    # (a) quoted 4.5(3)e-3: combine its uncertainty with our binomial one
    st20 = res.by_exposure(20.0).stats
    sig = math.hypot(st20.p_bd.stderr, 0.3e-3)
    a_ok = abs(st20.p_bd.value - 4.5e-3) <= 2 * sig
    # (b) loss-dominated exposures: floor from the loss-free twin plus 1 - exp(-t / tau_loss)
    z = []
    for i, ms in enumerate(res.exposures_ms):
        if ms >= 20:
            st, fl = res.runs[i].stats, res.floor_runs[i].stats
            z.append(abs(st.p_bd.value - res.predicted_p_bd(i)) / math.hypot(st.p_bd.stderr, fl.p_bd.stderr))
    b_ok = max(z) <= 3.0
    # (c) both jump-floor parameters inside their 2 sigma profile intervals
    f = res.floor_fit
    c_ok = f is not None and f.covers("p_m", 4e-3) and f.covers("tau_m", 0.54)
    detail = (f"(a) p_bd(20ms) = {st20.p_bd.value:.2e} vs 4.5e-3 +- {2 * sig:.1e} {'ok' if a_ok else 'FAIL'}; "
              f"(b) max z = {max(z):.2f} {'ok' if b_ok else 'FAIL'}; "
              f"(c) p_m = {f.p_m:.2e} in {_fmt(f.interval('p_m'))}, tau_m = {f.tau_m:.2f} s in "
              f"{_fmt(f.interval('tau_m'))} {'ok' if c_ok else 'FAIL'}; {dt:.0f} s")
    record(3, a_ok and b_ok and c_ok and dt < 300, detail)


def _fmt(iv):
    return "[" + ", ".join(f"{v:.3g}" for v in iv) + "]"


def test_criterion_04_jump_statistics():
    t0 = time.time()
    taus = np.array([pl.synthetic_jump_durations(158, 0.54, 30e-3, seed=item_seed(20190117, 4, k),
                                                 truncated=True).tau for k in range(100)])
    frac = np.mean(np.abs(taus - 0.54) <= 0.14)
    dt = time.time() - t0
    record(4, frac >= 0.95 and dt < 60,
           f"{frac:.0%} of 100 seeds within 0.54 +- 0.14 s (mean {taus.mean():.3f} s); {dt:.1f} s")


def test_criterion_05_excluded_error(fidelity):
    sc, res, _ = fidelity
    main = res.by_exposure(30.0).stats.infidelity
    ref = res.nojump_run.stats.infidelity
    (l1, h1), (l2, h2) = main.interval, ref.interval
    ok = main.value < 1e-4 and l1 <= h2 and l2 <= h1
    record(5, ok, f"30 ms: {main.k}/{main.n} = {main.value:.1e} [{l1:.1e}, {h1:.1e}]; "
                  f"jumps off {ref.k}/{ref.n} = {ref.value:.1e} [{l2:.1e}, {h2:.1e}]")


def test_criterion_06_classifier_comparison(fidelity):
    _, res, _ = fidelity
    e = res.by_exposure(20.0).errors
    eb, et = e["bayes"].total, e["threshold"].total
    ratio = eb.value / et.value
    ok = ratio <= 0.7 and min(eb.n, et.n) >= 1e5
    record(6, ok, f"20 ms: bayes {eb.value:.2e} vs threshold {et.value:.2e} (ratio {ratio:.3f}, "
                  f"{eb.n} frames)")


def test_criterion_07_thermometry():
    sc = scenario("rr-thermometry")
    t0 = time.time()
    _, meas = pl.rr_data(sc)
    fit = pl.rr_fit(sc, meas, n_shots=sc.cfg["run"]["rr_shots_per_point"])
    dt = time.time() - t0
    err = abs(fit.T - 6.4e-6) / 6.4e-6
    record(7, err <= 0.10 and dt < 120, f"T = {fit.T * 1e6:.2f} +- {fit.stderr * 1e6:.2f} uK "
                                        f"({err:.1%} off 6.4 uK); {dt:.1f} s")


def test_criterion_08_loading():
    sc = scenario("fig4-loading")
    t0 = time.time()
    occ = pl.loading_stats(sc, n_shots=10_000, n_sites=144, p=0.49)
    n = occ.shape[0]
    fill = occ.sum(axis=1).mean()
    tol = 3 * math.sqrt(144 * 0.49 * 0.51 / n)
    z = np.abs(occ.mean(axis=0) - 0.49) / math.sqrt(0.49 * 0.51 / n)
    ok = abs(fill - 70.56) <= tol and z.max() <= 3.0
    record(8, ok and time.time() - t0 < 60,
           f"mean fill {fill:.2f} vs 70.56 +- {tol:.2f}; worst site {z.max():.2f} sigma")


def test_criterion_09_bound():
    n = an.max_defect_free_size(4.5e-3)
    record(9, n == 222, f"N_max(4.5e-3) = {n}")


REQUIRED_PROPERTIES = ("dispersion", "conservation", "steady_state", "absorbing", "worker")


def test_criterion_10_property_suites():
    t0 = time.time()
    outcomes = list(conftest.PROPERTY_OUTCOMES)
    if not outcomes:
        # running alone: collect the property suites in a child session
        here = Path(__file__).parent
        p = subprocess.run([sys.executable, "-m", "pytest", "-q", "-m", "property", "-p", "no:cacheprovider",
                            "--ignore", str(here / "test_acceptance.py"), str(here)],
                           capture_output=True, text=True)
        last = p.stdout.strip().splitlines()[-1] if p.stdout.strip() else p.stderr
        ok = p.returncode == 0
        record(10, ok, f"child session: {last}; {time.time() - t0:.0f} s")
        return
    failed = [n for n, o in outcomes if o != "passed"]
    missing = [k for k in REQUIRED_PROPERTIES if not any(k in n for n, _ in outcomes)]
    record(10, not failed and not missing,
           f"{len(outcomes) - len(failed)}/{len(outcomes)} property tests passed"
           + (f"; failed {failed}" if failed else "") + (f"; missing {missing}" if missing else ""))
