"""CFAR detector: reference windows, the soft margin and threshold design.

The detector examines the peak of the power spectrum ``|Y~|^2`` and compares
it with ``alpha`` times a noise floor estimated from reference cells around
the peak. Instead of a binary decision it reports the margin

    delta = 10 log10(peak_power / (alpha * noise_floor))   [dB]

which is non-negative exactly when the detector fires.

Threshold multipliers are designed from the *average* false-alarm rate of the
global-peak detector over ``N`` cells with ``N_r`` exponential reference
samples; see :func:`pfa_from_alpha` and friends.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, optimize, special, stats

from .errors import (
    DegenerateWindowError,
    DomainError,
    InvalidArgumentError,
    NumericalFailureError,
)
from .tensor_spectrum import dft_spectrum

# gamma-weight tail mass left outside the quadrature interval
_TAIL = 1e-12
_QUAD_ABS_TOL = 1e-10
_SERIES_MAX_CELLS = 64


class CfarVariant(str, enum.Enum):
    CA = "CA"
    OS = "OS"


@dataclass(frozen=True)
class CfarConfig:
    """Detector geometry and threshold multiplier.

    Attributes:
        variant: cell averaging (``CA``) or order statistic (``OS``).
        n_ref: number of reference cells ``N_r``.
        n_guard: guard cells per side in every dimension.
        os_rank: rank ``r`` of the order statistic (OS only, 1-based).
        alpha: threshold multiplier applied to the noise floor.
        exclusion_radius: Chebyshev radius (cells) removed from the reference
            window around each excluded index; ``None`` means ``n_guard``.
    """

    variant: CfarVariant = CfarVariant.CA
    n_ref: int = 50
    n_guard: int = 4
    os_rank: int | None = None
    alpha: float = 11.22
    exclusion_radius: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", CfarVariant(self.variant))
        if self.n_ref < 1:
            raise InvalidArgumentError(f"n_ref must be >= 1, got {self.n_ref}")
        if self.n_guard < 0:
            raise InvalidArgumentError(f"n_guard must be >= 0, got {self.n_guard}")
        if not self.alpha > 0:
            raise InvalidArgumentError(f"alpha must be > 0, got {self.alpha}")
        if self.variant is CfarVariant.OS:
            if self.os_rank is None:
                object.__setattr__(self, "os_rank", max(1, (3 * self.n_ref) // 4))
            if not 1 <= self.os_rank <= self.n_ref:
                raise InvalidArgumentError(
                    f"os_rank must lie in [1, n_ref={self.n_ref}], got {self.os_rank}"
                )
        if self.exclusion_radius is not None and self.exclusion_radius < 0:
            raise InvalidArgumentError("exclusion_radius must be >= 0")

    @property
    def radius(self) -> int:
        return self.n_guard if self.exclusion_radius is None else self.exclusion_radius


@dataclass(frozen=True)
class FalseAlarmSpec:
    p_fa: float
    n_cells: int
    n_ref: int
    snapshots: int = 1

    def __post_init__(self):
        if not 0.0 < self.p_fa < 1.0:
            raise InvalidArgumentError(f"p_fa must lie in (0, 1), got {self.p_fa}")
        if self.n_cells < 1 or self.n_ref < 1 or self.snapshots < 1:
            raise InvalidArgumentError("n_cells, n_ref and snapshots must be >= 1")


@dataclass(frozen=True)
class DeltaReport:
    """Outcome of one soft CFAR test.

    ``n_ref_used`` records how many reference cells were actually collected;
    it is below the configured ``n_ref`` when exclusions or a small grid
    depleted the window. ``zero_floor`` flags a vanishing noise estimate.
    """

    delta: float
    peak: tuple[int, ...]
    peak_power: float
    noise_floor: float
    threshold: float
    n_ref_used: int
    zero_floor: bool = False

    @property
    def fired(self) -> bool:
        return self.delta >= 0.0


# ---------------------------------------------------------------------------
# reference window geometry


@lru_cache(maxsize=64)
def _window_offsets(dims: tuple[int, ...], n_guard: int) -> np.ndarray:
    """All circular offsets outside the guard box, nearest rings first.

    Each residue class modulo ``dims`` appears once. Within a Chebyshev ring,
    offsets are ordered by L1 norm, then per coordinate with positive steps
    ahead of negative ones, so a partially used ring is filled
    deterministically.
    """
    axes = [np.arange(-((n - 1) // 2), n // 2 + 1) for n in dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    off = np.stack([m.ravel() for m in mesh], axis=1)
    cheb = np.abs(off).max(axis=1)
    off = off[cheb > n_guard]
    cheb = np.abs(off).max(axis=1)
    l1 = np.abs(off).sum(axis=1)
    keys = [cheb, l1]
    for d in range(len(dims)):
        keys.append(np.abs(off[:, d]))
        keys.append(off[:, d] < 0)
    order = np.lexsort(tuple(reversed(keys)))
    off = off[order]
    off.setflags(write=False)
    return off


def _as_index(cut, dims: tuple[int, ...]) -> np.ndarray:
    cut = np.atleast_1d(np.asarray(cut, dtype=int))
    if cut.shape != (len(dims),) or np.any(cut < 0) or np.any(cut >= np.asarray(dims)):
        raise InvalidArgumentError(f"cell {tuple(cut)} is out of bounds for grid {dims}")
    return cut


def exclusion_mask(dims: Sequence[int], excluded: Iterable, radius: int) -> np.ndarray:
    """Flat C-order mask of cells within ``radius`` (Chebyshev, circular) of any excluded index."""
    dims = tuple(int(n) for n in dims)
    mask = np.zeros(dims, dtype=bool)
    excluded = [tuple(int(i) for i in e) for e in excluded]
    if not excluded:
        return mask.ravel()
    box = [np.arange(-radius, radius + 1)] * len(dims)
    for e in excluded:
        idx = np.ix_(*[(c + b) % n for c, b, n in zip(e, box, dims)])
        mask[idx] = True
    return mask.ravel()


def _reference_flat(
    cut: np.ndarray, dims: tuple[int, ...], config: CfarConfig, mask: np.ndarray | None
) -> np.ndarray:
    offsets = _window_offsets(dims, config.n_guard)
    strides = np.array([int(np.prod(dims[d + 1:])) for d in range(len(dims))])
    dims_arr = np.asarray(dims)
    # a prefix is enough unless exclusions eat into it
    budget = config.n_ref if mask is None else config.n_ref + int(mask.sum())
    for stop in (min(len(offsets), 2 * budget + 8), len(offsets)):
        cells = ((cut + offsets[:stop]) % dims_arr) @ strides
        if mask is not None:
            cells = cells[~mask[cells]]
        if len(cells) >= config.n_ref or stop == len(offsets):
            break
    if len(cells) == 0:
        raise DegenerateWindowError(f"no eligible reference cell around {tuple(cut)} in grid {dims}")
    return cells[: config.n_ref]


def reference_cells(
    cut: Sequence[int],
    grid_dims: Sequence[int],
    config: CfarConfig,
    excluded: Iterable = (),
) -> list[tuple[int, ...]]:
    """Reference cells around ``cut`` in selection order.

    The window grows ring by ring (circular wrap in every dimension) outside
    the guard box and skips cells near any ``excluded`` index, until
    ``config.n_ref`` cells are collected or the grid runs out. The length of
    the returned list is the count actually collected.
    """
    dims = tuple(int(n) for n in grid_dims)
    cut = _as_index(cut, dims)
    mask = exclusion_mask(dims, excluded, config.radius)
    flat = _reference_flat(cut, dims, config, mask if mask.any() else None)
    return [tuple(int(i) for i in np.unravel_index(f, dims)) for f in flat]


def os_threshold(window, os_rank: int, alpha_os: float) -> float:
    """``alpha_os`` times the ``os_rank``-th smallest window value."""
    window = np.asarray(window, dtype=float).ravel()
    if window.size == 0:
        raise DegenerateWindowError("empty reference window")
    if not 1 <= os_rank <= window.size:
        raise InvalidArgumentError(f"os_rank {os_rank} outside [1, {window.size}]")
    return float(alpha_os * np.partition(window, os_rank - 1)[os_rank - 1])


def _floor_from_powers(ref_power: np.ndarray, config: CfarConfig) -> float:
    if config.variant is CfarVariant.OS:
        rank = min(config.os_rank, ref_power.size)
        return float(np.partition(ref_power, rank - 1)[rank - 1])
    return float(ref_power.mean())


def noise_floor(
    spectrum: np.ndarray, cut: Sequence[int], config: CfarConfig, excluded: Iterable = ()
) -> float:
    """Noise power estimate from the reference cells around ``cut``.

    CA: the mean of ``|spectrum|^2`` over the window. OS: the ``os_rank``-th
    smallest power (clipped to the collected count).
    """
    spectrum = np.asarray(spectrum)
    dims = spectrum.shape
    cut = _as_index(cut, dims)
    mask = exclusion_mask(dims, excluded, config.radius)
    flat = _reference_flat(cut, dims, config, mask if mask.any() else None)
    power = np.abs(spectrum.ravel()[flat]) ** 2
    return _floor_from_powers(power, config)


def delta_from_power(
    power: np.ndarray, config: CfarConfig, mask: np.ndarray | None = None
) -> DeltaReport:
    """Soft CFAR test on a power map (``|Y~|^2`` or its snapshot average)."""
    dims = power.shape
    flat_power = power.ravel()
    peak_flat = int(np.argmax(flat_power))
    if mask is not None and not mask.any():
        mask = None
    peak = np.array(np.unravel_index(peak_flat, dims))
    ref = _reference_flat(peak, dims, config, mask)
    return _delta_report(flat_power, peak_flat, dims, ref, config)


def delta_batch(
    powers: np.ndarray, config: CfarConfig, masks: np.ndarray | None = None
) -> list[DeltaReport]:
    """:func:`delta_from_power` for a stack of power maps ``(K, *dims)``.

    ``masks`` is ``(K, n_cells)`` (flat C order) or ``None``.
    """
    K = powers.shape[0]
    dims = powers.shape[1:]
    flat = powers.reshape(K, -1)
    peaks = np.argmax(flat, axis=1)
    peak_idx = np.stack(np.unravel_index(peaks, dims), axis=1)
    offsets = _window_offsets(dims, config.n_guard)
    strides = np.array([int(np.prod(dims[d + 1:])) for d in range(len(dims))])
    extra = 0 if masks is None else int(masks.sum(axis=1).max())
    stop = min(len(offsets), 2 * (config.n_ref + extra) + 8)
    cand = ((peak_idx[:, None, :] + offsets[None, :stop, :]) % np.asarray(dims)) @ strides
    if masks is None:
        ok = np.ones(cand.shape, dtype=bool)
    else:
        ok = ~np.take_along_axis(masks, cand, axis=1)
    rank = np.cumsum(ok, axis=1)
    keep = ok & (rank <= config.n_ref)
    if np.all(rank[:, -1] >= config.n_ref):
        refs = cand[keep].reshape(K, config.n_ref)
        ref_power = np.take_along_axis(flat, refs, axis=1)
        if config.variant is CfarVariant.OS:
            r = min(config.os_rank, config.n_ref)
            floors = np.partition(ref_power, r - 1, axis=1)[:, r - 1]
        else:
            floors = ref_power.mean(axis=1)
        peak_power = flat[np.arange(K), peaks]
        return [
            _make_report(float(peak_power[k]), float(floors[k]), peak_idx[k], config.n_ref, config)
            for k in range(K)
        ]
    out = []
    for k in range(K):
        mask_k = None if masks is None or not masks[k].any() else masks[k]
        if rank[k, -1] >= config.n_ref:
            ref = cand[k][keep[k]]
        else:
            ref = _reference_flat(peak_idx[k], dims, config, mask_k)
        out.append(_delta_report(flat[k], int(peaks[k]), dims, ref, config))
    return out


def _make_report(peak_power: float, floor: float, peak, n_used: int, config: CfarConfig) -> DeltaReport:
    threshold = config.alpha * floor
    zero_floor = False
    if peak_power <= 0.0:
        delta = -math.inf
    elif threshold <= 0.0:
        delta, zero_floor = math.inf, True
    else:
        delta = 10.0 * math.log10(peak_power / threshold)
    return DeltaReport(delta, tuple(int(i) for i in peak), peak_power, floor, threshold, n_used, zero_floor)


def _delta_report(flat_power, peak_flat, dims, ref, config) -> DeltaReport:
    floor = _floor_from_powers(flat_power[ref], config)
    peak = np.unravel_index(peak_flat, dims)
    return _make_report(float(flat_power[peak_flat]), floor, peak, len(ref), config)


def cfar_delta(y: np.ndarray, config: CfarConfig, excluded: Iterable = ()) -> DeltaReport:
    """Run the soft CFAR detector on a time-domain tensor."""
    power = np.abs(dft_spectrum(y)) ** 2
    mask = exclusion_mask(power.shape, excluded, config.radius)
    return delta_from_power(power, config, mask)


# ---------------------------------------------------------------------------
# false-alarm analysis


def _gamma_interval(shape: float) -> tuple[float, float]:
    lo = stats.gamma.ppf(_TAIL, shape)
    hi = stats.gamma.isf(_TAIL, shape)
    return float(lo), float(hi)


def _expect_over_gamma(logf, shape: float) -> float:
    """``E[exp(logf(X))]`` for ``X ~ Gamma(shape, 1)`` by adaptive Gauss-Kronrod."""
    lo, hi = _gamma_interval(shape)
    log_norm = special.gammaln(shape)

    def integrand(x):
        return math.exp(logf(x) + (shape - 1.0) * math.log(x) - x - log_norm)

    mode = max(shape - 1.0, lo)
    value, err = integrate.quad(
        integrand, lo, hi, points=[mode], epsabs=_QUAD_ABS_TOL, epsrel=1e-12, limit=500
    )
    if not np.isfinite(value) or err > 1e3 * _QUAD_ABS_TOL:
        raise NumericalFailureError(f"quadrature did not converge (estimate {value}, error {err})")
    return value


def _log_cdf_power(x: float, n_cells: int) -> float:
    # N * log(1 - exp(-x)), accurate for small and large x
    return n_cells * math.log(-math.expm1(-x)) if x > 0 else -math.inf


def pfa_from_alpha(alpha: float, n_cells: int, n_ref: int) -> float:
    """Average false-alarm probability of the global-peak CA-CFAR detector."""
    if not alpha > 0:
        raise InvalidArgumentError(f"alpha must be > 0, got {alpha}")
    scale = alpha / n_ref
    value = _expect_over_gamma(lambda x: _log_cdf_power(scale * x, n_cells), n_ref)
    return float(min(1.0, max(0.0, 1.0 - value)))


def pfa_from_alpha_series(alpha: float, n_cells: int, n_ref: int) -> float:
    """Closed-form alternating binomial series for :func:`pfa_from_alpha`.

    The terms span many orders of magnitude and cancel, so the sum runs in
    60-digit arithmetic and is only offered for ``n_cells <= 64``.
    """
    import mpmath

    if n_cells > _SERIES_MAX_CELLS:
        raise DomainError(
            f"alternating series is unstable for n_cells={n_cells} > {_SERIES_MAX_CELLS}"
        )
    if not alpha > 0:
        raise InvalidArgumentError(f"alpha must be > 0, got {alpha}")
    with mpmath.workdps(60):
        a = mpmath.mpf(alpha)
        total = mpmath.fsum(
            (-1) ** n * mpmath.binomial(n_cells, n) * (n * a / n_ref + 1) ** (-n_ref)
            for n in range(n_cells + 1)
        )
        return float(1 - total)


def pfa_approx(alpha: float, n_cells: int, n_ref: int) -> float:
    """Small-``P_FA`` approximation ``N * (alpha/N_r + 1)^(-N_r)``."""
    return float(n_cells * math.exp(-n_ref * math.log1p(alpha / n_ref)))


def alpha_approx(p_fa: float, n_cells: int, n_ref: int) -> float:
    """Invert :func:`pfa_approx`."""
    return float(n_ref * math.expm1(math.log(n_cells / p_fa) / n_ref))


def alpha_nomp(p_fa: float, n_cells: int) -> float:
    """Multiplier for the known-variance detector: ``-ln(1 - (1 - p)^(1/N))``."""
    if not 0.0 < p_fa < 1.0:
        raise InvalidArgumentError(f"p_fa must lie in (0, 1), got {p_fa}")
    return float(-math.log(-math.expm1(math.log1p(-p_fa) / n_cells)))


def pfa_from_alpha_mmv(alpha: float, n_cells: int, n_ref: int, snapshots: int) -> float:
    """Average false-alarm probability of the snapshot-averaged CA detector.

    Each cell's summed power is ``Gamma(S)`` and the summed reference power
    ``Gamma(S*N_r)`` (unit scale, in units of the noise variance).
    """
    if not alpha > 0:
        raise InvalidArgumentError(f"alpha must be > 0, got {alpha}")
    if snapshots < 1:
        raise InvalidArgumentError("snapshots must be >= 1")
    scale = alpha / n_ref
    S = snapshots

    def log_cdf(t):
        p = special.gammainc(S, scale * t)
        return n_cells * math.log(p) if p > 0 else -math.inf

    value = _expect_over_gamma(log_cdf, S * n_ref)
    return float(min(1.0, max(0.0, 1.0 - value)))


def pfa_from_alpha_os(alpha_os: float, n_cells: int, n_ref: int, os_rank: int) -> float:
    """Average false-alarm probability of the global-peak OS-CFAR detector.

    The ``r``-th order statistic of ``N_r`` unit exponentials has density
    ``r C(N_r, r) e^{-(N_r - r + 1) x} (1 - e^{-x})^{r - 1}``.
    """
    if not alpha_os > 0:
        raise InvalidArgumentError(f"alpha_os must be > 0, got {alpha_os}")
    if not 1 <= os_rank <= n_ref:
        raise InvalidArgumentError(f"os_rank {os_rank} outside [1, {n_ref}]")
    r = os_rank
    log_coef = math.log(r) + special.gammaln(n_ref + 1) - special.gammaln(r + 1) - special.gammaln(n_ref - r + 1)

    def integrand(x):
        if x <= 0:
            return 0.0
        log_pdf = log_coef - (n_ref - r + 1) * x + (r - 1) * math.log(-math.expm1(-x))
        return math.exp(_log_cdf_power(alpha_os * x, n_cells) + log_pdf)

    # order statistic mean ~ sum_{i<r} 1/(N_r - i); its tail is exponential with rate N_r - r + 1
    mean = sum(1.0 / (n_ref - i) for i in range(r))
    hi = mean + (-math.log(_TAIL) + 50.0) / (n_ref - r + 1)
    value, err = integrate.quad(
        integrand, 0.0, hi, points=[mean], epsabs=_QUAD_ABS_TOL, epsrel=1e-12, limit=500
    )
    if not np.isfinite(value) or err > 1e3 * _QUAD_ABS_TOL:
        raise NumericalFailureError(f"quadrature did not converge (estimate {value}, error {err})")
    return float(min(1.0, max(0.0, 1.0 - value)))


def _solve_decreasing(fn, target: float, lo: float = 1e-6, hi: float = 16.0) -> float:
    """Root of a strictly decreasing ``fn(alpha) = target`` by bracketed bisection."""
    f_hi = fn(hi) - target
    while f_hi > 0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e9:
            raise NumericalFailureError("could not bracket the threshold multiplier")
        f_hi = fn(hi) - target
    if fn(lo) - target < 0:
        raise NumericalFailureError("could not bracket the threshold multiplier")
    try:
        # Brent's method keeps a sign-changing bracket and falls back to bisection
        return float(optimize.brentq(lambda a: fn(a) - target, lo, hi, xtol=1e-13, rtol=1e-14, maxiter=200))
    except (RuntimeError, ValueError) as exc:
        raise NumericalFailureError(str(exc)) from exc


def alpha_from_pfa(spec: FalseAlarmSpec) -> float:
    """Threshold multiplier meeting ``spec.p_fa`` (MMV formula when ``snapshots > 1``)."""
    if spec.snapshots > 1:
        fn = lambda a: pfa_from_alpha_mmv(a, spec.n_cells, spec.n_ref, spec.snapshots)
    else:
        fn = lambda a: pfa_from_alpha(a, spec.n_cells, spec.n_ref)
    return _solve_decreasing(fn, spec.p_fa)


def alpha_from_pfa_os(p_fa: float, n_cells: int, n_ref: int, os_rank: int) -> float:
    if not 0.0 < p_fa < 1.0:
        raise InvalidArgumentError(f"p_fa must lie in (0, 1), got {p_fa}")
    return _solve_decreasing(lambda a: pfa_from_alpha_os(a, n_cells, n_ref, os_rank), p_fa)


def alpha_per_cell(p_cell: float, n_ref: int, variant: CfarVariant = CfarVariant.CA, os_rank: int | None = None) -> float:
    """Single-cell multiplier for the classical every-cell detector.

    CA inverts ``(alpha/N_r + 1)^(-N_r) = p_cell``; OS inverts
    ``prod_{i<r} (N_r - i) / (N_r - i + alpha) = p_cell``.
    """
    if not 0.0 < p_cell < 1.0:
        raise InvalidArgumentError(f"p_cell must lie in (0, 1), got {p_cell}")
    if CfarVariant(variant) is CfarVariant.CA:
        return float(n_ref * math.expm1(-math.log(p_cell) / n_ref))
    r = os_rank if os_rank is not None else max(1, (3 * n_ref) // 4)

    def p_os(a):
        return math.exp(sum(math.log(n_ref - i) - math.log(n_ref - i + a) for i in range(r)))

    return _solve_decreasing(p_os, p_cell)


def design_config(
    p_fa: float,
    n_cells: int,
    n_ref: int = 50,
    n_guard: int = 4,
    snapshots: int = 1,
    variant: CfarVariant = CfarVariant.CA,
    os_rank: int | None = None,
    exclusion_radius: int | None = None,
) -> CfarConfig:
    """Build a :class:`CfarConfig` whose ``alpha`` meets the nominal ``p_fa``."""
    variant = CfarVariant(variant)
    if variant is CfarVariant.OS:
        if snapshots > 1:
            raise InvalidArgumentError("OS threshold design is single-snapshot only")
        rank = os_rank if os_rank is not None else max(1, (3 * n_ref) // 4)
        alpha = alpha_from_pfa_os(p_fa, n_cells, n_ref, rank)
        return CfarConfig(variant, n_ref, n_guard, rank, alpha, exclusion_radius)
    alpha = alpha_from_pfa(FalseAlarmSpec(p_fa, n_cells, n_ref, snapshots))
    return CfarConfig(variant, n_ref, n_guard, None, alpha, exclusion_radius)
