"""Detection-probability predictions, the frequency CRB and Monte Carlo scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, special, stats

from .errors import InvalidArgumentError, NumericalFailureError
from .nomp import CandidateSet
from .tensor_spectrum import TWO_PI, wrap_dist

# mean straddle gain of an off-grid tone in one dimension
STRADDLE_GAIN = 0.88


def marcum_q1(a: float, b: float) -> float:
    """First-order Marcum Q function.

    Summed as a Poisson mixture of upper incomplete gamma functions,
    ``Q1(a, b) = sum_k Pois(k; a^2/2) * Q(k + 1, b^2/2)``, over a window
    wide enough that the dropped Poisson mass is below 1e-14.
    """
    a, b = float(a), float(b)
    if not (math.isfinite(a) and math.isfinite(b)):
        raise InvalidArgumentError("Marcum Q arguments must be finite")
    a, b = abs(a), abs(b)
    if b == 0.0:
        return 1.0
    lam = 0.5 * a * a
    x = 0.5 * b * b
    if lam == 0.0:
        return math.exp(-x)
    spread = 9.0 * math.sqrt(lam) + 20.0
    k = np.arange(max(0, int(lam - spread)), int(lam + spread) + 1)
    weights = stats.poisson.pmf(k, lam)
    val = float(np.dot(weights, special.gammaincc(k + 1.0, x)))
    return min(1.0, max(0.0, val))


def pd_single(snr_linear: float, alpha: float, n_ref: int, d_dims: int = 1) -> float:
    """Average detection probability of one target under the adaptive threshold.

    The peak bin holds the target scaled by the mean straddle gain ``0.88^D``;
    the threshold (in noise-power units) is Gamma distributed with shape
    ``n_ref`` and mean ``alpha``.
    """
    if not snr_linear >= 0:
        raise InvalidArgumentError(f"SNR must be >= 0, got {snr_linear}")
    if alpha <= 0 or n_ref < 1 or d_dims < 1:
        raise InvalidArgumentError("alpha, n_ref and d_dims must be positive")
    a = STRADDLE_GAIN ** d_dims * math.sqrt(2.0 * snr_linear)
    if snr_linear == 0.0:
        return (alpha / n_ref + 1.0) ** (-n_ref)
    dist = stats.gamma(n_ref, scale=alpha / n_ref)
    lo, hi = float(dist.ppf(1e-14)), float(dist.isf(1e-14))

    def integrand(t):
        return marcum_q1(a, math.sqrt(2.0 * t)) * dist.pdf(t)

    val, err = integrate.quad(integrand, lo, hi, points=[alpha], epsabs=1e-12, epsrel=1e-10, limit=200)
    if not math.isfinite(val) or err > 1e-7:
        raise NumericalFailureError(f"detection-probability quadrature failed (error {err})")
    return min(1.0, max(0.0, val))


def pd_all_upper(snrs: Sequence[float], alpha: float, n_ref: int, d_dims: int = 1) -> float:
    """Upper bound on detecting every target: product of single-target probabilities."""
    snrs = list(snrs)
    if not snrs:
        raise InvalidArgumentError("need at least one target SNR")
    cache: dict[float, float] = {}
    out = 1.0
    for s in snrs:
        if s not in cache:
            cache[s] = pd_single(s, alpha, n_ref, d_dims)
        out *= cache[s]
    return out


def crb_single_freq(n: int, snr_linear: float) -> float:
    """Frequency variance bound (rad^2) for one complex tone in white noise.

    ``snr_linear`` is the integrated SNR ``N |x|^2 / sigma^2``.
    """
    if n < 2:
        raise InvalidArgumentError(f"need at least 2 samples, got {n}")
    if not snr_linear > 0:
        raise InvalidArgumentError(f"SNR must be > 0, got {snr_linear}")
    per_sample = snr_linear / n
    return 6.0 / (per_sample * n * (n * n - 1.0))


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class ScoreResult:
    n_true: int
    n_estimated: int
    n_detected_true: int
    n_false: int
    all_detected: bool
    freq_sq_error: float
    nmse: float

    @property
    def order_correct(self) -> bool:
        return self.n_estimated == self.n_true


def normalized_distance(est: np.ndarray, truth: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """``(K_est, K_true)`` max over dimensions of wrap distance in DFT bins."""
    est = np.asarray(est, dtype=float).reshape(-1, len(dims))
    truth = np.asarray(truth, dtype=float).reshape(-1, len(dims))
    bins = TWO_PI / np.asarray(dims, dtype=float)
    d = wrap_dist(est[:, None, :], truth[None, :, :]) / bins
    return d.max(axis=2) if d.size else np.zeros((len(est), len(truth)))


def greedy_match(dist: np.ndarray) -> list[tuple[int, int]]:
    """Pairs ``(est, truth)`` by increasing distance, each index used once."""
    order = np.argsort(dist, axis=None, kind="stable")
    used_e, used_t, pairs = set(), set(), []
    for flat in order:
        i, j = divmod(int(flat), dist.shape[1])
        if i in used_e or j in used_t:
            continue
        pairs.append((i, j))
        used_e.add(i)
        used_t.add(j)
        if len(pairs) == min(dist.shape):
            break
    return pairs


def _reconstruct(cset: CandidateSet, dims) -> np.ndarray:
    from .atoms import AtomDictionary

    dic = AtomDictionary(dims)
    return dic.synthesize(cset.freqs, cset.amp_matrix)


def score(truth: CandidateSet, estimate, dims: Sequence[int] | None = None) -> ScoreResult:
    """Compare estimated frequencies to the truth with half-bin matching.

    ``estimate`` is a :class:`CandidateSet` or anything with a
    ``components`` attribute holding one. A truth is detected when some
    estimate lies within half a bin; an estimate is false when it is at least
    half a bin from every truth. ``freq_sq_error`` sums squared wrap distances
    over greedily matched pairs and is ``nan`` unless the model order is
    right. ``nmse`` compares noiseless reconstructions on the raw atoms.
    """
    est = estimate if isinstance(estimate, CandidateSet) else estimate.components
    dims = tuple(truth.dims if dims is None else dims)
    if tuple(est.dims) != dims or tuple(truth.dims) != dims:
        raise InvalidArgumentError("truth, estimate and dims disagree")
    K, K_hat = len(truth), len(est)
    if K and K_hat:
        dist = normalized_distance(est.freqs, truth.freqs, dims)
        detected = int(np.sum(dist.min(axis=0) <= 0.5))
        false = int(np.sum(dist.min(axis=1) >= 0.5))
    else:
        dist = np.zeros((K_hat, K))
        detected, false = 0, K_hat
    sq = math.nan
    if K == K_hat:
        sq = 0.0
        for i, j in greedy_match(dist) if K else []:
            sq += float(np.sum(wrap_dist(est.freqs[i], truth.freqs[j]) ** 2))
    z = _reconstruct(truth, dims) if K else None
    if z is None:
        nmse = math.nan
    else:
        zh = _reconstruct(est, dims) if K_hat else np.zeros_like(z)
        nmse = float(np.sum(np.abs(zh - z) ** 2) / np.sum(np.abs(z) ** 2))
    return ScoreResult(K, K_hat, detected, false, detected == K, sq, nmse)
