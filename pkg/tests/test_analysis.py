import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tweezersim.analysis import (
    UNBOUNDED,
    FitError,
    GridBoundaryError,
    Proportion,
    TransitionStats,
    detect_jumps,
    excluded_error_rate,
    fit_exponential,
    fit_jump_floor,
    fit_temperature_rr,
    jump_durations,
    jump_floor_model,
    max_defect_free_size,
    transition_stats,
)
from tweezersim.classify import ClassifiedStack
from tweezersim.dynamics import release_recapture_curve
from tweezersim.physics import TrapSpec


def S(s, period=1.0):
    return ClassifiedStack.from_labels(np.array(list(s)), period)


# --- transition statistics ------------------------------------------------

def test_bbbd_counts():
    st_ = transition_stats(S("BBBD"))
    assert (st_.n_bb, st_.n_bd, st_.n_db, st_.n_dd) == (2, 1, 0, 0)
    assert st_.p_bd.value == pytest.approx(1 / 3)
    lo, hi = st_.p_bd.interval
    assert lo < 1 / 3 < hi


def test_all_dark_is_no_data():
    st_ = transition_stats(S("DDDD"))
    assert not st_.p_bd.has_data and math.isnan(st_.p_bd.value)
    assert st_.p_db.has_data and st_.p_db.value == 0.0


def test_empty_or_single_frame_stack_errors():
    with pytest.raises(ValueError):
        transition_stats(ClassifiedStack.from_labels(np.zeros((0, 0), bool)))
    with pytest.raises(ValueError):
        transition_stats(S("B"))


@pytest.mark.property
@settings(max_examples=60, deadline=None)
@given(rows=st.lists(st.lists(st.booleans(), min_size=2, max_size=30), min_size=1, max_size=6))
def test_counts_exhaustive(rows):
    n = min(len(r) for r in rows)
    lab = np.array([r[:n] for r in rows])
    st_ = transition_stats(ClassifiedStack.from_labels(lab))
    assert sum(st_.counts.values()) == lab.shape[0] * (n - 1)
    assert st_.n_bright_frames == lab.sum()


# --- jump detection ------------------------------------------------------

def test_jump_rule_examples():
    ev = detect_jumps(S("BDDBB", 0.03))
    assert len(ev) == 1 and ev[0].duration == pytest.approx(0.06) and (ev[0].start_frame, ev[0].end_frame) == (1, 2)
    assert detect_jumps(S("BDBB")) == []
    ev = detect_jumps(S("BDDBDDBB"))
    assert [(e.start_frame, e.end_frame) for e in ev] == [(4, 5)]


def test_censored_runs_are_flagged():
    ev = detect_jumps(S("BBDDD"))
    assert len(ev) == 1 and ev[0].right_censored
    d, c = jump_durations(ev)
    assert d.size == 0
    d, c = jump_durations(ev, include_censored=True)
    assert c.tolist() == [True]
    # a leading dark run never counts
    assert detect_jumps(S("DDDBB")) == []


def _rand_seq(draw_bits):
    return np.array(draw_bits, dtype=bool)


@pytest.mark.property
@settings(max_examples=80, deadline=None)
@given(bits=st.lists(st.booleans(), min_size=3, max_size=60), k=st.integers(1, 5))
def test_jumps_invariant_to_bright_padding(bits, k):
    x = np.array(bits)
    # padding a record with bright frames on the left shifts events, never creates or drops them
    a = detect_jumps(ClassifiedStack.from_labels(np.concatenate([[True], x])))
    b = detect_jumps(ClassifiedStack.from_labels(np.concatenate([np.ones(k + 1, bool), x])))
    assert [(e.start_frame + k, e.end_frame + k, e.right_censored) for e in a] == \
           [(e.start_frame, e.end_frame, e.right_censored) for e in b]


@pytest.mark.property
@settings(max_examples=60, deadline=None)
@given(bits=st.lists(st.booleans(), min_size=3, max_size=60), period=st.floats(1e-3, 1.0))
def test_jump_durations_scale_with_period(bits, period):
    x = np.array(bits)
    a = detect_jumps(ClassifiedStack.from_labels(x, 1.0))
    b = detect_jumps(ClassifiedStack.from_labels(x, period))
    assert len(a) == len(b)
    for e, f in zip(a, b):
        assert f.duration == pytest.approx(e.duration * period)
        assert e.end_frame - e.start_frame + 1 >= 2
        assert x[e.start_frame - 1] and not x[e.start_frame:e.end_frame + 1].any()
        if not e.right_censored:
            assert x[e.end_frame + 1:e.end_frame + 3].all() and e.end_frame + 2 < x.size


# --- exponential fit ------------------------------------------------------

def test_fit_exponential_examples():
    f = fit_exponential([0.3] * 10)
    assert f.tau == pytest.approx(0.3) and f.stderr == pytest.approx(0.3 / math.sqrt(10))
    d = [0.1, 0.2, 0.5, 0.9, 0.4, 0.3]
    g = fit_exponential(d + [0.7], [False] * 6 + [True])
    assert g.tau - fit_exponential(d).tau == pytest.approx(0.7 / 6)
    assert g.n_censored == 1
    with pytest.raises(FitError):
        fit_exponential([0.1, 0.2, 0.3, 0.4])
    with pytest.raises(ValueError):
        fit_exponential([0.1] * 6, [False] * 5)


def test_truncated_exponential_is_unbiased():
    rng = np.random.default_rng(0)
    d = 0.06 + rng.exponential(0.5, 20_000)
    assert fit_exponential(d, truncation=0.06).tau == pytest.approx(0.5, abs=3 * 0.5 / math.sqrt(d.size))


# --- jump floor --------------------------------------------------------

def test_floor_noiseless_recovery():
    t = np.array([10, 20, 30, 50, 100]) * 1e-3
    y = jump_floor_model(t, 4e-3, 0.54)
    f = fit_jump_floor(list(zip(t, y)))
    assert f.p_m == pytest.approx(4e-3, rel=1e-6)
    assert f.tau_m == pytest.approx(0.54, rel=1e-6)
    assert np.abs(f.residuals).max() < 1e-12
    g = fit_jump_floor([{"exposure": a, "p_db": b, "sigma": 1e-4} for a, b in zip(t, y)])
    assert g.p_m == pytest.approx(4e-3, rel=1e-6)
    assert g.covers("p_m", 4e-3) and g.covers("tau_m", 0.54)


def test_floor_asymptote():
    assert jump_floor_model(1e6, 4e-3, 0.54) == pytest.approx(4e-3)
    assert jump_floor_model(0.0, 4e-3, 0.54) == 0.0


def test_floor_fit_errors():
    with pytest.raises(FitError):
        fit_jump_floor([(0.01, 1e-4), (0.02, 2e-4)])
    with pytest.raises(FitError):
        fit_jump_floor([(0.01, 1e-4), (0.015, 2e-4), (0.02, 3e-4)])


@pytest.mark.property
def test_floor_profile_coverage():
    # 2 sigma profile intervals should contain the truth in most noisy replicates
    rng = np.random.default_rng(1)
    t = np.array([10, 20, 30, 50, 100]) * 1e-3
    n = 2e5
    hits = 0
    reps = 60
    for _ in range(reps):
        k = rng.binomial(int(n), jump_floor_model(t, 4e-3, 0.54))
        pts = [(a, b / n, math.sqrt(max(b, 1)) / n) for a, b in zip(t, k)]
        f = fit_jump_floor(pts)
        hits += f.covers("p_m", 4e-3) and f.covers("tau_m", 0.54)
    assert hits / reps >= 0.9


# --- excluded errors ------------------------------------------------------

def test_excluded_when_all_db_inside_jumps():
    s = ClassifiedStack.from_labels(np.array([list("BBDDBBBDDDBB"), list("BBBBBBDDDDDD")]) == "B")
    ev = detect_jumps(s)
    st_ = excluded_error_rate(s, ev)
    assert st_.n_db == 2 and st_.n_db_excl == 0 and st_.n_dd_excl == 5
    assert st_.p_db_excl.value == 0.0 and st_.p_db_excl.interval[1] > 0


def test_excluded_infidelity_example():
    # 2 residual errors across 1.8e5 images with 30% bright
    st_ = TransitionStats(0.03, 0, 0, 0, 0, n_db_excl=2, n_dd_excl=0, n_bright_frames=54_000)
    inf = st_.infidelity
    assert inf.value == pytest.approx(3.7e-5, rel=0.01)
    assert inf.value - inf.stderr > 0
    assert inf.value + inf.stderr == pytest.approx(6e-5, rel=0.1)
    assert st_.fidelity == pytest.approx(1 - 3.7e-5, rel=1e-6)


def test_no_jumps_means_no_exclusion():
    s = ClassifiedStack.from_labels(np.random.default_rng(3).random((5, 200)) < 0.5)
    st_ = excluded_error_rate(s, [])
    assert st_.n_db_excl == st_.n_db


@pytest.mark.property
@settings(max_examples=60, deadline=None)
@given(bits=st.lists(st.booleans(), min_size=2, max_size=80))
def test_exclusion_only_removes(bits):
    s = ClassifiedStack.from_labels(np.array(bits))
    st_ = excluded_error_rate(s, detect_jumps(s))
    assert 0 <= st_.n_db_excl <= st_.n_db and st_.n_dd_excl <= st_.n_dd


def test_proportion_intervals():
    p = Proportion(0, 100)
    assert p.value == 0 and p.interval[0] == 0 and p.interval[1] > 0
    assert Proportion(5, 10, method="exact").interval[0] < 0.5 < Proportion(5, 10).interval[1]
    assert "no" not in repr(p)


# --- thermometry ---------------------------------------------------------

TIMES = np.linspace(5e-6, 60e-6, 8)


def test_temperature_noiseless_self_inversion():
    pts = release_recapture_curve(TrapSpec(), 6e-3, 6.4e-6, TIMES, 10_000, seed=21)
    measured = {"t": TIMES, "p": [q.p_recapture for q in pts]}
    f = fit_temperature_rr(measured, TrapSpec(), 6e-3, 10_000, np.arange(4.5, 9.0, 0.5) * 1e-6, seed=21)
    assert f.T == pytest.approx(6.4e-6, rel=0.02)
    assert f.stderr > 0


def test_temperature_flat_data_hits_boundary():
    measured = {"t": TIMES, "p": np.ones(TIMES.size)}
    with pytest.raises(GridBoundaryError, match="downward"):
        fit_temperature_rr(measured, TrapSpec(), 6e-3, 10_000, np.arange(4.0, 9.0, 1.0) * 1e-6)
    with pytest.raises(ValueError):
        fit_temperature_rr(measured, TrapSpec(), 6e-3, 100, [1e-6, 2e-6, 3e-6])


# --- array size bound ---------------------------------------------------

def test_max_defect_free_size():
    assert max_defect_free_size(4.5e-3) == 222
    assert max_defect_free_size(0.5) == 2
    assert max_defect_free_size(1e-2) == 100
    assert max_defect_free_size(0.0) is UNBOUNDED
    with pytest.raises(ValueError):
        max_defect_free_size(1.0)


@pytest.mark.property
@settings(max_examples=100, deadline=None)
@given(p=st.floats(1e-6, 0.999))
def test_max_size_is_floor_inverse(p):
    n = max_defect_free_size(p)
    assert n * p <= 1 + 1e-9 and (n + 1) * p > 1 - 1e-9
