"""Baseline calibration and the statistical decision pipeline.

Calibration turns a batch of timed trials into a BaselineProfile holding
location, spread, and tail statistics. Detectors classify a single timing
against that profile; distribution tests compare whole batches; the repeat
policy drives per-session confidence to an arbitrary target by issuing
independent challenges.

Everything here is pure over immutable inputs and safe for concurrent use.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import (
    DegenerateSeries,
    InsufficientSamples,
    MaxTrialsExceeded,
)

# Normal-consistency constant for the modified z-score (Iglewicz & Hoaglin):
# for gaussian data, 0.6745 * dev / MAD estimates the ordinary z.
MODIFIED_Z_SCALE = 0.6745

DEFAULT_Z_THRESHOLD = 2.0
DEFAULT_MODIFIED_Z_THRESHOLD = 2.5
DEFAULT_CHEBYSHEV_K = 31.6

# Below this combined effective size the asymptotic two-sample KS p-value is
# only indicative; the D statistic itself is always exact.
KS_ASYMPTOTIC_MIN_N = 35


@dataclass(frozen=True)
class BaselineProfile:
    """Calibration sample with derived statistics used by every detector."""

    samples: tuple
    n: int
    mean: float
    std: float      # sample standard deviation, n-1 denominator
    median: float
    mad: float      # median absolute deviation
    p2_5: float
    p97_5: float


def calibrate(samples) -> BaselineProfile:
    """Build a BaselineProfile; percentiles use linear rank interpolation."""
    arr = np.asarray(list(samples), dtype=float)
    if arr.size < 2:
        raise InsufficientSamples(f"calibration needs >= 2 samples, got {arr.size}")
    median = float(np.median(arr))
    return BaselineProfile(
        samples=tuple(float(v) for v in arr),
        n=int(arr.size),
        mean=float(arr.mean()),
        std=float(arr.std(ddof=1)),
        median=median,
        mad=float(np.median(np.abs(arr - median))),
        p2_5=float(np.percentile(arr, 2.5)),
        p97_5=float(np.percentile(arr, 97.5)),
    )


# --- serial correlation ------------------------------------------------------

@dataclass(frozen=True)
class SerialCorrelation:
    """Per-lag autocorrelations with a pointwise band and a whiteness verdict."""

    lags: tuple
    autocorr: tuple
    band: float              # pointwise 95% band: 1.96/sqrt(n)
    flagged_lags: tuple      # lags whose |r| exceeds the band
    q_stat: float            # Ljung-Box portmanteau statistic over all lags
    q_pvalue: float
    white: bool              # Ljung-Box at 95%: fails only on real structure


def serial_correlation(samples, max_lag: int) -> SerialCorrelation:
    """Sample autocorrelations for lags 1..max_lag plus a whiteness verdict.

    Pointwise flags use the +/-1.96/sqrt(n) band. Because roughly 5% of lags
    from white noise poke outside a 95% band by chance, the overall verdict
    comes from the Ljung-Box portmanteau test at the same confidence instead
    of demanding that every lag stay inside.
    """
    arr = np.asarray(list(samples), dtype=float)
    n = arr.size
    if not 1 <= max_lag < n:
        raise InsufficientSamples(f"need n > max_lag >= 1 (n={n}, max_lag={max_lag})")
    centered = arr - arr.mean()
    denom = float(np.dot(centered, centered))
    if denom == 0.0:
        raise DegenerateSeries("autocorrelation undefined for a constant series")
    rs = []
    for lag in range(1, max_lag + 1):
        rs.append(float(np.dot(centered[:-lag], centered[lag:])) / denom)
    band = 1.96 / math.sqrt(n)
    flagged = tuple(lag for lag, r in zip(range(1, max_lag + 1), rs) if abs(r) > band)
    q = n * (n + 2) * sum(r * r / (n - lag)
                          for lag, r in zip(range(1, max_lag + 1), rs))
    q_pvalue = float(special.chdtrc(max_lag, q))
    return SerialCorrelation(
        lags=tuple(range(1, max_lag + 1)),
        autocorr=tuple(rs),
        band=band,
        flagged_lags=flagged,
        q_stat=float(q),
        q_pvalue=q_pvalue,
        white=q_pvalue > 0.05,
    )


# --- two-sample tests --------------------------------------------------------

def t_test(a, b):
    """Welch's unequal-variance t-test; returns (t, two-sided p).

    Degrees of freedom by Welch-Satterthwaite; the p-value comes from the
    Student t CDF. Pooled-variance is deliberately not offered: scenario
    spreads differ.
    """
    xa = np.asarray(list(a), dtype=float)
    xb = np.asarray(list(b), dtype=float)
    if xa.size < 2 or xb.size < 2:
        raise InsufficientSamples("t-test needs >= 2 samples per side")
    va = xa.var(ddof=1)
    vb = xb.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        raise DegenerateSeries("both samples are constant; t statistic undefined")
    sa = va / xa.size
    sb = vb / xb.size
    t = (xa.mean() - xb.mean()) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa ** 2 / (xa.size - 1) + sb ** 2 / (xb.size - 1))
    p = 2.0 * float(special.stdtr(df, -abs(t)))
    return float(t), min(1.0, p)


def _kolmogorov_sf(x: float) -> float:
    """Survival function of the Kolmogorov distribution.

    Uses the theta-function form for small x (where the alternating series
    converges slowly) and the alternating series otherwise.
    """
    if x <= 0.0:
        return 1.0
    if x < 1.18:
        t = math.exp(-math.pi ** 2 / (8.0 * x * x))
        cdf = math.sqrt(2.0 * math.pi) / x * (t + t ** 9 + t ** 25)
        return max(0.0, min(1.0, 1.0 - cdf))
    total = 0.0
    sign = 1.0
    for j in range(1, 101):
        term = math.exp(-2.0 * j * j * x * x)
        total += sign * term
        sign = -sign
        if term < 1e-16:
            break
    return max(0.0, min(1.0, 2.0 * total))


def ks_test(a, b):
    """Two-sample Kolmogorov-Smirnov test; returns (D, asymptotic p).

    D is the exact max ECDF distance (tie-safe); the p-value uses the
    asymptotic Kolmogorov distribution, which is only indicative when the
    combined effective sample size falls below KS_ASYMPTOTIC_MIN_N.
    """
    xa = np.sort(np.asarray(list(a), dtype=float))
    xb = np.sort(np.asarray(list(b), dtype=float))
    if xa.size < 1 or xb.size < 1:
        raise InsufficientSamples("ks-test needs >= 1 sample per side")
    grid = np.concatenate([xa, xb])
    cdf_a = np.searchsorted(xa, grid, side="right") / xa.size
    cdf_b = np.searchsorted(xb, grid, side="right") / xb.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    en = math.sqrt(xa.size * xb.size / (xa.size + xb.size))
    return d, _kolmogorov_sf(en * d)


# --- single-point detectors --------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    """One detector's call on one timing measurement."""

    method: str
    score: float
    flagged: bool
    threshold: object


def detect_percentile(profile: BaselineProfile, point: float) -> Verdict:
    """Non-parametric band check: outside [p2.5, p97.5] of the baseline."""
    flagged = point < profile.p2_5 or point > profile.p97_5
    return Verdict("percentile", float(point), flagged,
                   (profile.p2_5, profile.p97_5))


def detect_zscore(profile: BaselineProfile, point: float,
                  threshold: float = DEFAULT_Z_THRESHOLD) -> Verdict:
    """Classical z-score against baseline mean and standard deviation."""
    if profile.std == 0.0:
        raise DegenerateSeries("z-score needs nonzero baseline spread")
    z = (point - profile.mean) / profile.std
    return Verdict("zscore", float(z), abs(z) > threshold, threshold)


def detect_modified_z(profile: BaselineProfile, point: float,
                      threshold: float = DEFAULT_MODIFIED_Z_THRESHOLD) -> Verdict:
    """Robust z-score from median and MAD (Iglewicz-Hoaglin scaling)."""
    if profile.mad == 0.0:
        raise DegenerateSeries("modified z-score needs nonzero baseline MAD")
    m = MODIFIED_Z_SCALE * (point - profile.median) / profile.mad
    return Verdict("modz", float(m), abs(m) > threshold, threshold)


def detect_chebyshev(profile: BaselineProfile, point: float,
                     k_sigma: float = DEFAULT_CHEBYSHEV_K) -> Verdict:
    """Distribution-free bound: |dev| > k*sigma has probability <= 1/k^2."""
    if profile.std == 0.0:
        raise DegenerateSeries("chebyshev bound needs nonzero baseline spread")
    score = abs(point - profile.mean) / profile.std
    return Verdict("chebyshev", float(score), score > k_sigma, k_sigma)


DETECTORS = {
    "percentile": detect_percentile,
    "zscore": detect_zscore,
    "modz": detect_modified_z,
    "chebyshev": detect_chebyshev,
}


def detect(method: str, profile: BaselineProfile, point: float, **kwargs) -> Verdict:
    try:
        fn = DETECTORS[method]
    except KeyError:
        raise ValueError(f"unknown detector {method!r}; known: {', '.join(DETECTORS)}")
    return fn(profile, point, **kwargs)


# --- confusion metrics -------------------------------------------------------

@dataclass(frozen=True)
class ConfusionRow:
    method: str
    fpr: float
    fnr: float
    false_positives: int
    baseline_count: int
    false_negatives: int
    attack_count: int


def confusion_report(baseline_points, attack_points,
                     methods=("percentile", "zscore", "modz"),
                     profile: BaselineProfile = None) -> dict:
    """Per-method FPR/FNR over labeled point sets.

    When no explicit profile is given, each baseline point is classified
    leave-one-out against the remaining baseline points (the tested point
    never calibrates its own band); attack points are classified against
    the full-baseline profile.
    """
    baseline_points = [float(v) for v in baseline_points]
    attack_points = [float(v) for v in attack_points]
    if not baseline_points or not attack_points:
        raise InsufficientSamples("confusion report needs non-empty point sets")
    full = profile if profile is not None else calibrate(baseline_points)
    loo_profiles = None
    if profile is None:
        loo_profiles = [
            calibrate(baseline_points[:i] + baseline_points[i + 1:])
            for i in range(len(baseline_points))
        ]
    rows = {}
    for method in methods:
        fn = DETECTORS[method]
        fp = 0
        for i, point in enumerate(baseline_points):
            prof = loo_profiles[i] if loo_profiles is not None else full
            if fn(prof, point).flagged:
                fp += 1
        misses = sum(1 for point in attack_points if not fn(full, point).flagged)
        rows[method] = ConfusionRow(
            method=method,
            fpr=fp / len(baseline_points),
            fnr=misses / len(attack_points),
            false_positives=fp,
            baseline_count=len(baseline_points),
            false_negatives=misses,
            attack_count=len(attack_points),
        )
    return rows


# --- challenge repetition policy ----------------------------------------------

@dataclass(frozen=True)
class RepeatDecision:
    accepted: bool
    trials: int
    nmi_retries: int
    residual_miss: float
    verdicts: tuple


def repeat_policy(profile: BaselineProfile, challenger, target_confidence: float,
                  per_trial_miss: float = 0.1, method: str = "percentile",
                  max_trials: int = 32, max_nmi_retries: int = 8) -> RepeatDecision:
    """Issue independent challenges until the residual miss probability is low.

    target_confidence is the residual false-negative probability to reach:
    with per-trial miss probability m, t clean trials leave m^t. A flagged
    trial rejects immediately. Trials that report an interrupt spike are
    invalid measurements and are retried without counting.
    """
    if not 0.0 < target_confidence < 1.0:
        raise ValueError("target_confidence must be in (0, 1)")
    if not 0.0 < per_trial_miss < 1.0:
        raise ValueError("per_trial_miss must be in (0, 1)")
    fn = DETECTORS[method]
    verdicts = []
    residual = 1.0
    trials = 0
    nmi_retries = 0
    while trials < max_trials:
        out = challenger()
        duration = getattr(out, "duration_us", out)
        if getattr(out, "nmi", False):
            nmi_retries += 1
            if nmi_retries > max_nmi_retries:
                raise MaxTrialsExceeded(f"{nmi_retries} interrupt-spoiled trials")
            continue
        trials += 1
        verdict = fn(profile, float(duration))
        verdicts.append(verdict)
        if verdict.flagged:
            return RepeatDecision(False, trials, nmi_retries, residual, tuple(verdicts))
        residual *= per_trial_miss
        # tolerate float dust so e.g. 0.1^3 meets a 1e-3 target exactly
        if residual <= target_confidence * (1.0 + 1e-9):
            return RepeatDecision(True, trials, nmi_retries, residual, tuple(verdicts))
    raise MaxTrialsExceeded(
        f"no decision after {max_trials} trials (residual {residual:.3g})"
    )
