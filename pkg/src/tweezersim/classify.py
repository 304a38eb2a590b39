"""
Bright/dark site classification.

Two classifiers share one calibration per site:

* a count threshold on the summed ROI counts, placed where the two fitted
  1D class distributions give the smallest prior-weighted error;
* a pixel-wise Bayesian classifier: every pixel is an independent Poisson
  count (background b_p, or b_p + a_p with an atom) seen through rounded
  Gaussian read noise and clamping at zero. The site score is the summed
  per-pixel log-likelihood ratio plus the log prior odds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln, logsumexp, ndtr, xlogy
from scipy.stats import norm

from .camera import SiteLayout, untile

MIN_CALIBRATION_FRAMES = 200
READ_NOISE_WINDOW = 6.0  # sigma


class CalibrationError(RuntimeError):
    pass


@dataclass
class SiteCalibration:
    roi: tuple  # (row0, row1, col0, col1) in full-frame pixels
    bright_template: np.ndarray  # a_p, mean atom counts per pixel
    background_template: np.ndarray  # b_p, mean background counts per pixel
    read_noise: float  # counts rms
    prior_bright: float
    gain: float = 1.0
    clamped: bool = True
    # Gaussian descriptions of the summed ROI counts for each class
    total_dark: tuple = (0.0, 1.0)  # (mean, variance)
    total_bright: tuple = (1.0, 1.0)
    threshold: float = 0.5

    def __post_init__(self):
        self.bright_template = np.asarray(self.bright_template, dtype=float)
        self.background_template = np.asarray(self.background_template, dtype=float)
        if np.any(self.bright_template < 0) or np.any(self.background_template < 0):
            raise ValueError("templates must be non-negative")
        if not self.bright_template.sum() > 0:
            raise ValueError("bright template carries no signal")
        if not 0 < self.prior_bright < 1:
            raise ValueError("prior_bright must lie in (0, 1)")

    @property
    def log_prior_odds(self):
        return float(np.log(self.prior_bright / (1 - self.prior_bright)))

    def with_prior(self, prior_bright):
        c = SiteCalibration(**{**self.__dict__})
        c.prior_bright = prior_bright
        c.__post_init__()
        return c

    def threshold_error_estimate(self):
        """Prior-weighted misclassification of the count threshold under the fitted components."""
        (md, vd), (mb, vb) = self.total_dark, self.total_bright
        p = self.prior_bright
        edge = self.threshold - 0.5
        return (1 - p) * norm.sf(edge, md, np.sqrt(vd)) + p * norm.cdf(edge, mb, np.sqrt(vb))


@dataclass
class ClassifiedStack:
    labels: np.ndarray  # bool (..., n_frames), True = bright
    scores: np.ndarray  # float, same shape; score > 0 <=> bright
    frame_period: float = 1.0
    exposure: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        self.scores = np.asarray(self.scores, dtype=float)
        if self.labels.shape != self.scores.shape:
            raise ValueError("labels and scores must share a shape")

    @property
    def n_frames(self):
        return self.labels.shape[-1] if self.labels.ndim else 0

    def sequences(self):
        """Labels flattened to (n_sequences, n_frames)."""
        return self.labels.reshape(-1, self.n_frames) if self.labels.size else self.labels.reshape(0, 0)

    @classmethod
    def from_labels(cls, labels, frame_period=1.0, **kw):
        """Stack from bright/dark labels (bool, or strings 'B'/'D')."""
        lab = np.asarray(labels)
        if lab.dtype.kind in "US":
            lab = np.char.upper(lab) == "B"
        lab = lab.astype(bool)
        return cls(lab, np.where(lab, 1.0, -1.0), frame_period, **kw)


# ---------------------------------------------------------------------------
# pixel likelihoods
# ---------------------------------------------------------------------------

def _poisson_logpmf(k, lam):
    return xlogy(k, lam) - lam - gammaln(k + 1)


def pixel_log_likelihood(lam, counts, read_noise, gain=1.0, clamped=True):
    """log P(c | lam_p) for every pixel p and every count c in ``counts``.

    The observed count is round(gain * k + e) with k ~ Poisson(lam_p) and
    e ~ N(0, read_noise); with ``clamped`` the value 0 also collects every
    negative reading. The Poisson sum is restricted to a +-6 sigma window
    of k around each count. Returns an array of shape (n_pixels, n_counts).
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    c = np.atleast_1d(np.asarray(counts, dtype=np.int64))
    if read_noise <= 0:
        k = c / gain
        ok = np.isclose(k, np.rint(k)) & (k >= 0)
        k = np.where(ok, np.rint(k), 0)
        out = _poisson_logpmf(k[None, :], lam[:, None])
        return np.where(ok[None, :], out, -np.inf)

    w = int(np.ceil(READ_NOISE_WINDOW * read_noise / gain)) + 1
    j = np.arange(-w, w + 1)
    k = np.rint(c / gain).astype(np.int64)[:, None] + j[None, :]  # (C, J)
    mu = gain * k
    upper = ndtr((c[:, None] + 0.5 - mu) / read_noise)
    lower = ndtr((c[:, None] - 0.5 - mu) / read_noise)
    if clamped:
        lower = np.where(c[:, None] <= 0, 0.0, lower)
    with np.errstate(divide="ignore"):
        log_pc = np.log(np.clip(upper - lower, 0.0, None))
    valid = k >= 0
    log_pc = np.where(valid, log_pc, -np.inf)
    kk = np.where(valid, k, 0)
    # (P, C, J)
    terms = _poisson_logpmf(kk[None, :, :], lam[:, None, None]) + log_pc[None, :, :]
    if clamped:
        # the zero bucket also receives k beyond the symmetric window
        zero = np.flatnonzero(c <= 0)
        if zero.size:
            kz = np.arange(0, int(np.ceil((0.5 + READ_NOISE_WINDOW * read_noise) / gain)) + 1)
            with np.errstate(divide="ignore"):
                lz = np.log(ndtr((0.5 - gain * kz) / read_noise))
            tz = logsumexp(_poisson_logpmf(kz[None, :], lam[:, None]) + lz[None, :], axis=1)
            out = logsumexp(terms, axis=2)
            out[:, zero] = tz[:, None]
            return out
    return logsumexp(terms, axis=2)


def clamped_mean(lam, read_noise, gain=1.0, clamped=True):
    """Expected recorded count for Poisson(lam) electrons."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if read_noise <= 0 or not clamped:
        return gain * lam
    kmax = int(lam.max() + 10 * np.sqrt(lam.max() + 1) + 10)
    k = np.arange(kmax + 1)
    pm = np.exp(_poisson_logpmf(k[None, :], lam[:, None]))
    cmax = int(gain * kmax + READ_NOISE_WINDOW * read_noise + 2)
    cc = np.arange(1, cmax + 1)
    # E[max(0, R)] = sum_{c >= 1} P(R >= c)
    m = ndtr((gain * k[:, None] - (cc[None, :] - 0.5)) / read_noise).sum(axis=1)
    return pm @ m


def invert_clamped_mean(observed, read_noise, gain=1.0, clamped=True, iters=60):
    """Poisson mean whose clamped, noisy reading averages to ``observed`` (vectorised bisection)."""
    obs = np.atleast_1d(np.asarray(observed, dtype=float))
    if read_noise <= 0 or not clamped:
        return np.clip(obs / gain, 0.0, None)
    lo = np.zeros_like(obs)
    hi = np.maximum(obs / gain, 0.0) + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = clamped_mean(mid, read_noise, gain) > obs
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _reading_variance(lam, read_noise, gain, clamped):
    lam = np.atleast_1d(lam)
    c = np.arange(0 if clamped else -int(8 * read_noise) - 2,
                  int(gain * (lam.max() + 8 * np.sqrt(lam.max() + 1)) + 8 * read_noise) + 3)
    p = np.exp(pixel_log_likelihood(lam, c, read_noise, gain, clamped))
    m = p @ c
    return p @ c**2 - m**2


def estimate_read_noise(dark, gain=1.0, clamped=True):
    """Read noise (counts rms) matching the per-pixel variance of dark-class readings.

    Clamping at zero shrinks both the mean and the variance, so the moment
    match goes through the clamped reading model rather than var - mean.
    """
    d = np.asarray(dark, dtype=float)
    # pooled over pixels: the dark class sees a near-uniform background
    mean, var = d.mean(), d.var(axis=0).mean()
    if not clamped:
        return float(np.sqrt(max(var - gain * mean, 1e-6)))

    def gap(rn):
        lam = invert_clamped_mean(mean, rn, gain, clamped)
        return _reading_variance(lam, rn, gain, clamped)[0] - var

    lo, hi = 0.05, 50.0
    if gap(lo) >= 0:
        return lo
    if gap(hi) <= 0:
        return hi
    return float(brentq(gap, lo, hi, xtol=1e-4))


def _two_means_1d(y):
    """Exact 1D k-means with k=2: best split of the sorted values."""
    ys = np.sort(y)
    n = ys.size
    cs = np.cumsum(ys)
    cs2 = np.cumsum(ys**2)
    i = np.arange(1, n)
    left = cs2[i - 1] - cs[i - 1] ** 2 / i
    right = (cs2[-1] - cs2[i - 1]) - (cs[-1] - cs[i - 1]) ** 2 / (n - i)
    s = int(np.argmin(left + right)) + 1
    return ys[:s].mean(), ys[s:].mean()


def _mixture_labels(y, seed=0):
    from sklearn.mixture import GaussianMixture

    m0, m1 = _two_means_1d(y)
    gm = GaussianMixture(2, means_init=[[m0], [m1]], random_state=seed, tol=1e-6, max_iter=500)
    gm.fit(y[:, None])
    bright_comp = int(np.argmax(gm.means_[:, 0]))
    labels = gm.predict(y[:, None]) == bright_comp
    mu = gm.means_[:, 0]
    var = gm.covariances_.reshape(2)
    sep = abs(mu[1] - mu[0]) / np.sqrt(0.5 * (var[0] + var[1]))
    return labels, sep


def _roi_rows(frames, layout: SiteLayout):
    """Coerce full frames (..., H, W) or ROI stacks (..., n_sites, r, r) to (n, n_sites, P)."""
    a = np.asarray(frames)
    r = layout.roi
    if a.shape[-2:] == layout.shape and not (a.ndim >= 3 and a.shape[-3:] == (layout.n_sites, r, r)):
        a = untile(a, layout)
    if a.shape[-3:] != (layout.n_sites, r, r):
        raise ValueError(f"frames of shape {a.shape} do not match the site layout")
    lead = a.shape[:-3]
    return a.reshape(-1, layout.n_sites, r * r), lead


def _templates(X, labels, read_noise, gain, clamped):
    lam_d = invert_clamped_mean(X[~labels].mean(axis=0), read_noise, gain, clamped)
    lam_b = invert_clamped_mean(X[labels].mean(axis=0), read_noise, gain, clamped)
    return np.clip(lam_b - lam_d, 0.0, None), lam_d


def _best_threshold(dark, bright, prior):
    (md, vd), (mb, vb) = dark, bright
    sd, sb = np.sqrt(max(vd, 1e-12)), np.sqrt(max(vb, 1e-12))
    grid = np.arange(np.floor(min(md, mb)), np.ceil(max(md, mb)) + 2)
    err = (1 - prior) * norm.sf(grid - 0.5, md, sd) + prior * norm.cdf(grid - 0.5, mb, sb)
    return float(grid[int(np.argmin(err))])


def calibrate(frames, layout: SiteLayout, read_noise=None, gain=1.0, clamped=True, n_refine=4,
              min_separation=3.0, initial=None):
    """Fit one :class:`SiteCalibration` per site from an unlabeled frame stack.

    Frames are first split by a two-component Gaussian mixture (EM, with an
    exact 2-means initialisation) on a template-weighted total count, where
    the per-pixel weights are the stack's mean image above its median. The
    labels then seed a few rounds of Bayes relabelling and template
    re-estimation. ``read_noise`` is in counts; when omitted it is
    estimated from the dark-class pixel variance.

    ``initial`` (one calibration per site, e.g. from another exposure via
    :func:`scale_calibration`) replaces the mixture step: its Bayes labels
    start the refinement, which is how weakly separated stacks are handled.
    """
    X_all, _ = _roi_rows(frames, layout)
    n = X_all.shape[0]
    if n < MIN_CALIBRATION_FRAMES:
        raise CalibrationError(f"need >= {MIN_CALIBRATION_FRAMES} frames per site, got {n}")
    out = []
    for k in range(layout.n_sites):
        X = X_all[:, k].astype(float)
        if initial is not None:
            rn = initial[k].read_noise if read_noise is None else read_noise
            labels = bayes_scores(X_all[:, k], initial[k]) > 0
            if labels.all() or not labels.any():
                raise CalibrationError(f"site {k}: initial calibration finds a single class")
            out.append(_refine(layout, k, X, X_all[:, k], labels, rn, gain, clamped, n_refine))
            continue
        m = X.mean(axis=0)
        wts = np.clip(m - np.median(m), 0.0, None)
        if not wts.sum() > 0:
            wts = np.ones_like(m)
        labels, sep = _mixture_labels(X @ wts)
        rn = read_noise
        if not (labels.all() or not labels.any()):
            if rn is None:
                rn = estimate_read_noise(X[~labels], gain, clamped)
            # reweight with near-optimal weights log(1 + a / (b + read variance))
            for _ in range(3):
                a, b = _templates(X, labels, rn, gain, clamped)
                w2 = np.log1p(a / (b + rn**2 + 1e-9))
                if not w2.sum() > 0:
                    break
                labels2, sep2 = _mixture_labels(X @ w2)
                if sep2 <= sep or labels2.all() or not labels2.any():
                    break
                labels, sep = labels2, sep2
        if sep < min_separation or labels.all() or not labels.any():
            raise CalibrationError(
                f"site {k}: no distinct bright class (component separation {sep:.2f} sigma)")
        out.append(_refine(layout, k, X, X_all[:, k], labels, rn, gain, clamped, n_refine))
    return out


def _refine(layout, k, X, Xi, labels, rn, gain, clamped, n_refine):
    """Hard-EM: alternate template estimation and Bayes relabelling."""
    for _ in range(n_refine):
        a, b = _templates(X, labels, rn, gain, clamped)
        if not a.sum() > 0:
            raise CalibrationError(f"site {k}: bright template is empty")
        prior = float(np.clip(labels.mean(), 1e-6, 1 - 1e-6))
        cal = _make_cal(layout, k, a, b, rn, prior, gain, clamped, X, labels)
        new = bayes_scores(Xi, cal) > 0
        if np.array_equal(new, labels):
            break
        labels = new
        if labels.all() or not labels.any():
            raise CalibrationError(f"site {k}: refinement collapsed to a single class")
    a, b = _templates(X, labels, rn, gain, clamped)
    prior = float(np.clip(labels.mean(), 1e-6, 1 - 1e-6))
    return _make_cal(layout, k, a, b, rn, prior, gain, clamped, X, labels)


def scale_calibration(calibs, factor):
    """Calibrations for an exposure ``factor`` times as long: signal and background templates scale linearly."""
    out = []
    for c in calibs:
        (md, vd), (mb, vb) = c.total_dark, c.total_bright
        out.append(SiteCalibration(c.roi, c.bright_template * factor, c.background_template * factor,
                                   c.read_noise, c.prior_bright, c.gain, c.clamped,
                                   (md * factor, vd), (mb * factor, vb), c.threshold * factor))
    return out


def _make_cal(layout, k, a, b, rn, prior, gain, clamped, X, labels):
    rs, cs = layout.roi_slices(k)
    tot = X.sum(axis=1)
    dark = (float(tot[~labels].mean()), float(tot[~labels].var()) if (~labels).sum() > 1 else 1.0)
    bright = (float(tot[labels].mean()), float(tot[labels].var()) if labels.sum() > 1 else 1.0)
    r = layout.roi
    return SiteCalibration((rs.start, rs.stop, cs.start, cs.stop), a.reshape(r, r), b.reshape(r, r),
                           rn, prior, gain, clamped, dark, bright,
                           _best_threshold(dark, bright, prior))


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------

def bayes_scores(pixels, calib: SiteCalibration):
    """Log posterior odds for each row of integer pixel counts (n, P)."""
    X = np.asarray(pixels).reshape(len(pixels), -1).astype(np.int64)
    a = calib.bright_template.ravel()
    b = calib.background_template.ravel()
    if X.shape[1] != a.size:
        raise ValueError("pixel count does not match the calibration templates")
    if X.size == 0:
        return np.zeros(0)
    cmin, cmax = int(X.min()), int(X.max())
    grid = np.arange(cmin, cmax + 1)
    info = a > 0
    score = np.full(X.shape[0], calib.log_prior_odds)
    if not info.any():
        return score
    cols = np.flatnonzero(info)
    l1 = pixel_log_likelihood(b[cols] + a[cols], grid, calib.read_noise, calib.gain, calib.clamped)
    l0 = pixel_log_likelihood(b[cols], grid, calib.read_noise, calib.gain, calib.clamped)
    with np.errstate(invalid="ignore"):
        llr = l1 - l0
    # both hypotheses impossible: that pixel carries no evidence
    llr = np.where(np.isneginf(l1) & np.isneginf(l0), 0.0, llr)
    idx = X[:, cols] - cmin
    score += llr[np.arange(cols.size)[None, :], idx].sum(axis=1)
    return score


def _classify(frames, calibs, layout, scorer, frame_period, exposure, name):
    X, lead = _roi_rows(frames, layout)
    if len(calibs) != layout.n_sites:
        raise ValueError("one calibration per site is required")
    scores = np.stack([scorer(X[:, k], calibs[k]) for k in range(layout.n_sites)], axis=-1)
    # (..., n_frames, n_sites) -> (..., n_sites, n_frames)
    scores = np.moveaxis(scores.reshape(lead + (layout.n_sites,)), -1, -2)
    return ClassifiedStack(scores > 0, scores, frame_period, exposure, {"classifier": name})


def threshold_scores(pixels, calib: SiteCalibration):
    """Count margin: total - threshold + 1/2, positive iff total >= threshold."""
    tot = np.asarray(pixels).reshape(len(pixels), -1).sum(axis=1)
    return tot - calib.threshold + 0.5


def classify_threshold(frames, calibs, layout: SiteLayout, frame_period=1.0, exposure=0.0):
    """Label a site bright when its summed ROI counts reach the calibrated threshold."""
    return _classify(frames, calibs, layout, threshold_scores, frame_period, exposure, "threshold")


def classify_bayes(frames, calibs, layout: SiteLayout, frame_period=1.0, exposure=0.0):
    """Pixel-wise Poisson / read-noise likelihood-ratio classification."""
    return _classify(frames, calibs, layout, bayes_scores, frame_period, exposure, "bayes")
