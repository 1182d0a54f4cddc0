"""Windowed outlier-count spoofing detection.

Per supported measurement channel the estimator produces, at every step, a
binary outlier indicator (predicted measurement outside a fixed-width region
around the received measurement) together with the model probability of that
indicator firing under nominal conditions. A sliding window of length W turns
the indicators into a count; the count is compared against a quantile of the
Poisson-binomial distribution built from the windowed probabilities. The
module also houses the special-function kernel (regularized incomplete gamma,
erf, chi-square quantile) used here and by the gating/merging logic, kept
in-repo so results are bit-reproducible across platforms.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

# ---------------------------------------------------------------------------
# special functions

_EPS = 1e-15
_MAX_ITER = 500


def _gamma_p_series(a: float, x: float) -> float:
    # lower series: P(a,x) = x^a e^-x / Gamma(a) * sum x^n / (a)_(n+1)
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    # upper tail via Lentz's continued fraction, stable for x >= a + 1
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) for a > 0, x >= 0."""
    if a <= 0.0:
        raise ValueError("shape parameter must be positive")
    if x < 0.0:
        raise ValueError("argument must be non-negative")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_p_series(a, x)
    return 1.0 - _gamma_q_contfrac(a, x)


def erf(x: float) -> float:
    """Error function via the incomplete-gamma kernel (double precision)."""
    if x == 0.0:
        return 0.0
    s = 1.0 if x > 0 else -1.0
    ax = abs(x)
    if ax < 1e-8:
        return s * (2.0 / math.sqrt(math.pi)) * ax
    if ax > 6.5:
        return s  # |erf| - 1 < 1e-19 out here
    return s * gamma_p(0.5, ax * ax)


def chi2_cdf(x: float, dof: int) -> float:
    if x <= 0.0:
        return 0.0
    return gamma_p(0.5 * dof, 0.5 * x)


@lru_cache(maxsize=512)
def chi2_quantile(prob: float, dof: int) -> float:
    """Inverse chi-square CDF by bisection, absolute tolerance 1e-10."""
    if not 0.0 < prob < 1.0:
        raise ValueError("probability must be in (0, 1)")
    lo, hi = 0.0, float(dof) + 10.0
    while chi2_cdf(hi, dof) < prob:
        hi *= 2.0
        if hi > 1e8:
            raise RuntimeError("chi-square quantile bracket failed")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# indicator and its model probabilities


def region_halfwidth_scale(alpha_chi: float) -> float:
    """Half-width of the univariate inlier region in measurement-noise sigmas."""
    return math.sqrt(chi2_quantile(alpha_chi, 1))


def mean_inlier_prob(halfwidth_scale: float, meas_std, pred_std):
    """Probability that the predicted measurement lands inside the region.

    Closed form for one channel: the prediction is N(0, p^2) around the true
    value, the measurement N(0, r^2), the region is |z_hat - z| <= n*r, giving

        P_in = erf( n * r / sqrt(2 * (r^2 + p^2)) )

    with n = ``halfwidth_scale``. Vectorized over numpy inputs. At p = 0 and
    n = 2 this evaluates to erf(sqrt(2)) ~ 0.9545, the region mass itself.
    """
    r = np.asarray(meas_std, dtype=float)
    p = np.asarray(pred_std, dtype=float)
    arg = halfwidth_scale * r / np.sqrt(2.0 * (r * r + p * p))
    out = np.vectorize(erf, otypes=[float])(arg)
    return out if out.ndim else float(out)


def outlier_prob(mode_probs, inlier_prob):
    """Per-step probability of the outlier indicator firing.

    mode 0 is the nominal mixture mode; every other mode is assumed to throw
    the measurement out of the region, so its mass counts fully.
    """
    p0 = mode_probs[0]
    rest = float(sum(mode_probs[1:]))
    return p0 * (1.0 - np.asarray(inlier_prob)) + rest


def outlier_flags(residual, meas_std, halfwidth_scale: float):
    """Binary outlier indicators: 1 where |residual| exceeds n * sigma."""
    r = np.abs(np.asarray(residual, dtype=float))
    return (r > halfwidth_scale * np.asarray(meas_std, dtype=float)).astype(np.int8)


# ---------------------------------------------------------------------------
# Poisson binomial


def poisson_binomial_pmf(probs) -> np.ndarray:
    """Exact pmf of a sum of independent Bernoulli(p_i) via PGF convolution.

    O(n^2): fold one trial at a time into the coefficient vector.
    """
    p = np.asarray(probs, dtype=float).ravel()
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("Bernoulli probabilities must lie in [0, 1]")
    pmf = np.zeros(p.size + 1)
    pmf[0] = 1.0
    for i, pi in enumerate(p):
        pmf[1 : i + 2] = pmf[1 : i + 2] * (1.0 - pi) + pmf[: i + 1] * pi
        pmf[0] *= 1.0 - pi
    return pmf


def pb_cdf(probs, k: int) -> float:
    """P(sum of Bernoulli(p_i) <= k)."""
    pmf = poisson_binomial_pmf(probs)
    if k < 0:
        return 0.0
    return float(min(1.0, pmf[: min(k, pmf.size - 1) + 1].sum()))


# summation roundoff slack for quantile threshold comparisons
_Q_SLACK = 1e-12


def pb_quantile(probs, beta: float) -> int:
    """Smallest o with CDF(o) >= beta."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must be in (0, 1]")
    cdf = np.cumsum(poisson_binomial_pmf(probs))
    idx = np.searchsorted(cdf, beta - _Q_SLACK, side="left")
    return int(min(idx, cdf.size - 1))


def pb_quantile_batch(probs: np.ndarray, beta: float) -> np.ndarray:
    """Row-wise pb_quantile for a (n_rows, n_trials) probability matrix.

    One vectorized DP across all rows; exactly matches pb_quantile per row.
    """
    probs = np.asarray(probs, dtype=float)
    n, w = probs.shape
    pmf = np.zeros((n, w + 1))
    pmf[:, 0] = 1.0
    for j in range(w):
        pj = probs[:, j : j + 1]
        pmf[:, 1:] = pmf[:, 1:] * (1.0 - pj) + pmf[:, :-1] * pj
        pmf[:, 0] *= 1.0 - pj[:, 0]
    cdf = np.cumsum(pmf, axis=1)
    idx = (cdf >= beta - _Q_SLACK).argmax(axis=1)
    return np.minimum(idx, w)


# ---------------------------------------------------------------------------
# sliding windows


class SourceWindow:
    """Sliding indicator/probability window for one measurement source.

    Fixed-size circular buffers per channel; counts are maintained
    incrementally so a step costs O(n_channels).
    """

    def __init__(self, n_channels: int, window: int):
        self.window = int(window)
        self.flags = np.zeros((n_channels, self.window), dtype=np.int8)
        self.probs = np.zeros((n_channels, self.window))
        self._head = 0
        self.fill = 0
        self._counts = np.zeros(n_channels, dtype=np.int64)

    @property
    def n_channels(self) -> int:
        return self.flags.shape[0]

    @property
    def full(self) -> bool:
        return self.fill >= self.window

    def push(self, flags, probs) -> None:
        h = self._head
        self._counts += np.asarray(flags, dtype=np.int64) - self.flags[:, h]
        self.flags[:, h] = flags
        self.probs[:, h] = probs
        self._head = (h + 1) % self.window
        if self.fill < self.window:
            self.fill += 1

    def counts(self) -> np.ndarray:
        """Windowed outlier counts per channel."""
        return self._counts.copy()

    def copy(self) -> "SourceWindow":
        dup = SourceWindow(self.n_channels, self.window)
        dup.flags = self.flags.copy()
        dup.probs = self.probs.copy()
        dup._head = self._head
        dup.fill = self.fill
        dup._counts = self._counts.copy()
        return dup


class QuantileBatch:
    """Collects window rows from many hypotheses, solves one batched DP.

    Keys are opaque; ``solve`` returns {key: thresholds array} with one
    threshold per enqueued channel row.
    """

    def __init__(self, beta: float):
        self.beta = beta
        self._keys: list = []
        self._rows: list[np.ndarray] = []
        self._sizes: list[int] = []

    def add(self, key, window: SourceWindow) -> None:
        self._keys.append(key)
        self._rows.append(window.probs)
        self._sizes.append(window.n_channels)

    def solve(self) -> dict:
        if not self._keys:
            return {}
        mat = np.vstack(self._rows)
        q = pb_quantile_batch(mat, self.beta)
        out = {}
        at = 0
        for key, size in zip(self._keys, self._sizes):
            out[key] = q[at : at + size]
            at += size
        return out


def detect_step(windows: dict, age: int, window: int, beta: float,
                alarm_mode: str = "any"):
    """Alarm verdict for one hypothesis from its per-source windows.

    A channel is eligible once the hypothesis has lived a full window and the
    channel's own buffer is full (quantiles are never computed over partial
    windows). ``alarm_mode`` 'any' raises on the first exceeding channel,
    'all' requires every eligible channel to exceed and at least one eligible
    channel to exist.

    Returns (alarm, report) where report maps tag -> dict with per-channel
    counts, thresholds and eligibility.
    """
    if alarm_mode not in ("any", "all"):
        raise ValueError(f"unknown alarm mode {alarm_mode!r}")
    report = {}
    exceeded = []
    for tag in sorted(windows):
        win = windows[tag]
        counts = win.counts()
        eligible = bool(age >= window) and win.full
        if eligible:
            thresh = pb_quantile_batch(win.probs, beta)
            exceeded.extend(counts > thresh)
        else:
            thresh = np.full(win.n_channels, -1, dtype=np.int64)
        report[tag] = {
            "counts": counts,
            "thresholds": thresh,
            "eligible": eligible,
        }
    if not exceeded:
        return False, report
    alarm = any(exceeded) if alarm_mode == "any" else all(exceeded)
    return bool(alarm), report
