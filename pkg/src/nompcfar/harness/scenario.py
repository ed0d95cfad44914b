"""Random line-spectral scenes with separated frequencies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..atoms import AtomDictionary
from ..errors import InfeasibleScenarioError, InvalidArgumentError
from ..nomp import CandidateSet
from ..tensor_spectrum import TWO_PI, unvec, wrap_dist

REJECTION_BUDGET = 100_000


@dataclass(frozen=True)
class ScenarioSpec:
    """Scene recipe.

    ``snr_db`` is the integrated SNR ``N |x|^2 / sigma_0^2`` per target
    against the nominal unit noise variance (a scalar applies to all).
    ``noise_fluct_db`` is the half-range ``u`` of the per-scene noise level
    in dB, drawn uniformly around that nominal level. ``compression_ratio`` (1-D only) asks for
    ``round(ratio * N)`` compressed measurements.
    """

    dims: tuple[int, ...]
    k_targets: int
    snr_db: Sequence[float] | float = 15.0
    min_sep_bins: float = 2.5
    snapshots: int = 1
    compression_ratio: float | None = None
    noise_fluct_db: float = 0.0
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(n) for n in np.atleast_1d(self.dims))
        object.__setattr__(self, "dims", dims)
        snr = np.atleast_1d(np.asarray(self.snr_db, dtype=float))
        if snr.size == 1:
            snr = np.full(self.k_targets, snr[0])
        if snr.size != self.k_targets:
            raise InvalidArgumentError(f"{snr.size} SNR values for {self.k_targets} targets")
        object.__setattr__(self, "snr_db", tuple(float(s) for s in snr))
        if self.k_targets < 0 or self.snapshots < 1 or self.noise_fluct_db < 0 or self.min_sep_bins < 0:
            raise InvalidArgumentError("invalid scenario counts")
        if self.compression_ratio is not None:
            if len(dims) != 1:
                raise InvalidArgumentError("compression is 1-D only")
            if not 0 < self.compression_ratio <= 1:
                raise InvalidArgumentError("compression ratio must lie in (0, 1]")
        for n in dims:
            if self.k_targets > 1 and self.min_sep_bins * self.k_targets >= n:
                raise InfeasibleScenarioError(
                    f"{self.k_targets} targets cannot be {self.min_sep_bins} bins apart on {n} cells"
                )


@dataclass
class Scenario:
    truth: CandidateSet
    y: np.ndarray
    sigma2: float
    phi: np.ndarray | None = None
    clean: np.ndarray = field(default=None, repr=False)


def _draw_freqs(rng: np.random.Generator, dims, k: int, sep_bins: float) -> np.ndarray:
    bins = TWO_PI / np.asarray(dims, dtype=float)
    for _ in range(REJECTION_BUDGET):
        f = rng.uniform(0.0, TWO_PI, size=(k, len(dims)))
        if k < 2:
            return f
        d = wrap_dist(f[:, None, :], f[None, :, :]) / bins
        # two targets collide only if they are close in every dimension
        close = np.all(d <= sep_bins, axis=2)
        np.fill_diagonal(close, False)
        if not close.any():
            return f
    raise InfeasibleScenarioError(f"no admissible frequency draw in {REJECTION_BUDGET} attempts")


def bernoulli_matrix(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    """Entries ``(+-1 +- 1j) / sqrt(2)``, equiprobable."""
    re = rng.integers(0, 2, size=(m, n)) * 2 - 1
    im = rng.integers(0, 2, size=(m, n)) * 2 - 1
    return (re + 1j * im) / np.sqrt(2.0)


def generate_scenario(spec: ScenarioSpec, rng: np.random.Generator | None = None) -> Scenario:
    """Draw one scene.

    Frequencies are uniform and rejection-sampled as a whole set until every
    pair is more than ``min_sep_bins`` DFT bins apart (in the max-normalised
    multi-dimensional distance). ``y`` has shape ``dims`` for one snapshot,
    ``(S, *dims)`` for several, or ``(M,)`` when compressed.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    dims = spec.dims
    N = int(np.prod(dims))
    S = spec.snapshots
    u = spec.noise_fluct_db
    sigma2 = 10.0 ** (rng.uniform(-u, u) / 10.0) if u > 0 else 1.0
    freqs = _draw_freqs(rng, dims, spec.k_targets, spec.min_sep_bins)
    # SNR is set against the nominal unit variance, so a louder draw of the
    # noise lowers the realised SNR
    mags = np.sqrt(10.0 ** (np.asarray(spec.snr_db) / 10.0) / N)
    phases = rng.uniform(0.0, TWO_PI, size=(spec.k_targets, S))
    amps = mags[:, None] * np.exp(1j * phases)
    dic = AtomDictionary(dims)
    clean = dic.synthesize(freqs, amps)  # (S, N) in vec order
    noise = np.sqrt(sigma2 / 2) * (rng.standard_normal((S, N)) + 1j * rng.standard_normal((S, N)))
    truth = CandidateSet(dims, freqs, amps[:, 0] if S == 1 else amps)
    if spec.compression_ratio is not None:
        M = max(1, int(round(spec.compression_ratio * N)))
        phi = bernoulli_matrix(rng, M, N)
        noise_c = np.sqrt(sigma2 / 2) * (rng.standard_normal(M) + 1j * rng.standard_normal(M))
        y = phi @ clean[0] + noise_c
        return Scenario(truth, y, sigma2, phi, clean[0])
    tensors = np.stack([unvec(row, dims) for row in clean + noise])
    clean_t = np.stack([unvec(row, dims) for row in clean])
    if S == 1:
        return Scenario(truth, tensors[0], sigma2, None, clean_t[0])
    return Scenario(truth, tensors, sigma2, None, clean_t)
