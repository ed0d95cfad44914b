"""Newtonized orthogonal matching pursuit.

Each detection step picks the oversampled-spectrum peak of the residual,
polishes its frequency with Newton steps on

    G(w) = |a(w)^H y|^2 / N,

sweeps the whole set with the same single-component refinement (cyclic
refinement) and finally re-fits every amplitude by least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .atoms import AtomDictionary, as_block
from .cfar_core import alpha_nomp
from .errors import IllConditionedError, InvalidArgumentError
from .tensor_spectrum import (
    SinusoidComponent,
    TWO_PI,
    dft_spectrum,
    unvec,
    wrap_dist,
    wrap_freq,
)

# duplicate frequencies closer than this in every coordinate are merged
_MERGE_TOL = 1e-12
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class RefineSettings:
    """Refinement knobs.

    Attributes:
        newton_steps_single: Newton steps per single refinement.
        cyclic_rounds: Gauss-Seidel sweeps over the set after each change.
        oversample: oversampling factor of the coarse grid.
        step_accept_rule: when set, descent of the residual energy is
            asserted after every refinement pass (debug aid).
    """

    newton_steps_single: int = 1
    cyclic_rounds: int = 3
    oversample: int = 4
    step_accept_rule: bool = False

    def __post_init__(self):
        if self.newton_steps_single < 0 or self.cyclic_rounds < 0:
            raise InvalidArgumentError("refinement counts must be >= 0")
        if self.oversample < 1:
            raise InvalidArgumentError("oversample must be >= 1")


@dataclass(frozen=True)
class CandidateSet:
    """Ordered amplitude/frequency pairs on a ``dims`` grid.

    ``freqs`` is ``(K, D)``; ``amplitudes`` is ``(K,)`` for one snapshot and
    ``(K, S)`` for several.
    """

    dims: tuple[int, ...]
    freqs: np.ndarray = field(default=None)
    amplitudes: np.ndarray = field(default=None)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        freqs = np.zeros((0, len(dims))) if self.freqs is None else np.asarray(self.freqs, dtype=float)
        freqs = wrap_freq(freqs.reshape(-1, len(dims)))
        amps = np.zeros(0, dtype=complex) if self.amplitudes is None else np.asarray(self.amplitudes, dtype=complex)
        if amps.shape[0] != freqs.shape[0]:
            raise InvalidArgumentError(
                f"{freqs.shape[0]} frequencies but {amps.shape[0]} amplitudes"
            )
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "amplitudes", amps)

    def __len__(self) -> int:
        return self.freqs.shape[0]

    @classmethod
    def from_components(cls, dims: Sequence[int], components: Sequence[SinusoidComponent]) -> "CandidateSet":
        dims = tuple(dims)
        if not components:
            return cls(dims)
        freqs = np.stack([np.asarray(c.freq, dtype=float) for c in components])
        amps = np.array([c.amplitude for c in components])
        return cls(dims, freqs, amps)

    @property
    def components(self) -> list[SinusoidComponent]:
        return [SinusoidComponent(a, f) for a, f in zip(self.amplitudes, self.freqs)]

    @property
    def amp_matrix(self) -> np.ndarray:
        """Amplitudes as ``(K, S)``."""
        return self.amplitudes.reshape(len(self), -1)

    def without(self, k: int) -> "CandidateSet":
        if not 0 <= k < len(self):
            raise InvalidArgumentError(f"component index {k} out of range for {len(self)} components")
        keep = np.arange(len(self)) != k
        return CandidateSet(self.dims, self.freqs[keep], self.amplitudes[keep])

    def scaled(self, c: complex) -> "CandidateSet":
        return CandidateSet(self.dims, self.freqs, self.amplitudes * c)


class PursuitState:
    """Mutable working set of a pursuit run over an :class:`AtomDictionary`.

    Keeps frequencies ``(K, D)``, amplitudes ``(K, S)`` and the residual
    ``(S, M)`` consistent with each other.
    """

    def __init__(self, dictionary: AtomDictionary, Y: np.ndarray, settings: RefineSettings):
        self.dic = dictionary
        self.Y = np.ascontiguousarray(Y, dtype=complex)
        self.S = self.Y.shape[0]
        self.settings = settings
        self.freqs = np.zeros((0, dictionary.D))
        self.amps = np.zeros((0, self.S), dtype=complex)
        self.R = self.Y.copy()

    def __len__(self) -> int:
        return self.freqs.shape[0]

    def residual_energy(self) -> float:
        return float(np.vdot(self.R, self.R).real)

    def recompute_residual(self) -> None:
        self.R = np.ascontiguousarray(self.Y - self.dic.synthesize(self.freqs, self.amps))

    def coarse(self) -> tuple[np.ndarray, np.ndarray]:
        """Oversampled-grid peak of the residual and its projection amplitudes."""
        G, shape = self.dic.objective_grid(self.R, self.settings.oversample)
        flat = int(np.argmax(G))
        idx = np.array(np.unravel_index(flat, shape), dtype=float)
        freq = TWO_PI * idx / np.asarray(shape, dtype=float)
        amps = self.dic.project(freq[None, :], self.R)[0]
        return freq, amps

    def add(self, freq: np.ndarray, amps: np.ndarray) -> None:
        self.freqs = np.vstack([self.freqs, np.asarray(freq, dtype=float)[None, :]])
        self.amps = np.vstack([self.amps, np.asarray(amps, dtype=complex)[None, :]])
        self.R = np.ascontiguousarray(self.R - self.dic.synthesize(freq[None, :], amps[None, :]))

    def remove(self, k: int) -> None:
        keep = np.arange(len(self)) != k
        self.freqs = self.freqs[keep]
        self.amps = self.amps[keep]
        self.recompute_residual()

    def detect_new(self, steps: int | None = None) -> None:
        """Coarse detection on the residual followed by single refinement."""
        freq, _ = self.coarse()
        steps = self.settings.newton_steps_single if steps is None else steps
        w, amps = self.dic.refine_single(self.R, freq, steps)
        self.add(wrap_freq(w), amps)

    def cyclic(self) -> None:
        if len(self) == 0 or self.settings.cyclic_rounds == 0:
            return
        before = self.residual_energy()
        freqs = np.ascontiguousarray(self.freqs)
        amps = np.ascontiguousarray(self.amps)
        self.dic.cyclic(self.R, freqs, amps, self.settings.cyclic_rounds, self.settings.newton_steps_single)
        self.freqs = wrap_freq(freqs)
        self.amps = amps
        self.merge_duplicates()
        if self.settings.step_accept_rule:
            after = self.residual_energy()
            assert after <= before * (1 + 1e-9) + 1e-12, (before, after)

    def merge_duplicates(self) -> None:
        K = len(self)
        if K < 2:
            return
        close = np.all(wrap_dist(self.freqs[:, None, :], self.freqs[None, :, :]) < _MERGE_TOL, axis=2)
        if np.count_nonzero(close) == K:
            return
        keep = np.ones(K, dtype=bool)
        amps = self.amps.copy()
        for i in range(K):
            if not keep[i]:
                continue
            for j in range(i + 1, K):
                if keep[j] and close[i, j]:
                    amps[i] += amps[j]
                    keep[j] = False
        if not keep.all():
            self.freqs = self.freqs[keep]
            self.amps = amps[keep]
            self.recompute_residual()

    def least_squares(self, strict: bool = False) -> None:
        if len(self) == 0:
            return
        A = self.dic.atoms(self.freqs)
        x = None
        if not strict:
            x = _gram_solve(A, self.Y.T)
        if x is None:
            x, _res, _rank, sv = np.linalg.lstsq(A, self.Y.T, rcond=None)
            cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
            if strict and cond > _COND_LIMIT:
                raise IllConditionedError("atoms are linearly dependent", cond)
        self.amps = np.ascontiguousarray(x)
        self.R = np.ascontiguousarray(self.Y - (A @ x).T)

    def refine_all(self) -> None:
        self.cyclic()
        self.least_squares()

    def detection_step(self) -> None:
        self.detect_new()
        self.refine_all()


def _gram_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray | None:
    """Normal-equation solve by Cholesky; ``None`` when the Gram matrix is nearly singular."""
    gram = A.conj().T @ A
    try:
        factor = linalg.cho_factor(gram, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return None
    diag = np.abs(np.diagonal(factor[0]))
    # squared pivots bound the Gram condition number from below
    if diag.min() <= 0 or (diag.max() / diag.min()) ** 2 > 1e8:
        return None
    return linalg.cho_solve(factor, A.conj().T @ B, check_finite=False)


def _state_from_set(dic: AtomDictionary, Y: np.ndarray, cset: CandidateSet, settings: RefineSettings) -> PursuitState:
    state = PursuitState(dic, Y, settings)
    if len(cset):
        state.freqs = np.ascontiguousarray(cset.freqs, dtype=float)
        state.amps = np.ascontiguousarray(cset.amp_matrix.reshape(len(cset), state.S))
        state.recompute_residual()
    return state


def _set_from_state(state: PursuitState, dims, single: bool) -> CandidateSet:
    amps = state.amps[:, 0] if single else state.amps
    return CandidateSet(dims, state.freqs.copy(), amps.copy())


# ---------------------------------------------------------------------------
# public single-snapshot API


def objective_derivatives(y: np.ndarray, freq) -> tuple[float, np.ndarray, np.ndarray]:
    """``G``, gradient and Hessian of ``|a(w)^H vec(y)|^2 / N`` at ``freq``."""
    y = np.asarray(y, dtype=complex)
    return AtomDictionary(y.shape).derivatives(as_block(y), np.atleast_1d(freq))


def coarse_detect(residual: np.ndarray, gamma: int = 4) -> SinusoidComponent:
    """Oversampled-grid argmax of ``G`` and the matched amplitude ``a^H y / N``."""
    residual = np.asarray(residual, dtype=complex)
    if residual.size == 0:
        raise InvalidArgumentError("empty residual")
    state = PursuitState(AtomDictionary(residual.shape), as_block(residual), RefineSettings(oversample=gamma))
    freq, amps = state.coarse()
    return SinusoidComponent(complex(amps[0]), freq)


def newton_refine_single(
    y_pseudo: np.ndarray, comp: SinusoidComponent, settings: RefineSettings = RefineSettings()
) -> SinusoidComponent:
    """Refine one component against its pseudo-measurement; ``G`` never decreases."""
    y_pseudo = np.asarray(y_pseudo, dtype=complex)
    dic = AtomDictionary(y_pseudo.shape)
    w, amps = dic.refine_single(as_block(y_pseudo), comp.freq, settings.newton_steps_single)
    return SinusoidComponent(complex(amps[0]), wrap_freq(w))


def cyclic_refine(y: np.ndarray, cset: CandidateSet, settings: RefineSettings = RefineSettings()) -> CandidateSet:
    """``cyclic_rounds`` Gauss-Seidel sweeps of single refinement over the set."""
    y = np.asarray(y, dtype=complex)
    state = _state_from_set(AtomDictionary(y.shape), as_block(y), cset, settings)
    state.cyclic()
    return _set_from_state(state, y.shape, single=True)


def ls_reestimate(y: np.ndarray, cset: CandidateSet) -> CandidateSet:
    """Replace amplitudes by the least-squares fit; frequencies untouched.

    Raises:
        IllConditionedError: the atoms are (numerically) linearly dependent.
    """
    y = np.asarray(y, dtype=complex)
    if len(cset) > y.size:
        raise IllConditionedError("more atoms than samples", np.inf)
    state = _state_from_set(AtomDictionary(y.shape), as_block(y), cset, RefineSettings())
    state.least_squares(strict=True)
    return _set_from_state(state, y.shape, single=True)


def nomp_baseline(
    y: np.ndarray, sigma2: float, p_fa: float, settings: RefineSettings = RefineSettings()
) -> CandidateSet:
    """NOMP with the known-noise stopping rule.

    Stops once the unitary-DFT peak power of the residual falls below
    ``alpha' * sigma2`` with ``alpha'`` from :func:`~nompcfar.cfar_core.alpha_nomp`.
    """
    if not sigma2 > 0:
        raise InvalidArgumentError(f"sigma2 must be > 0, got {sigma2}")
    y = np.asarray(y, dtype=complex)
    tau = alpha_nomp(p_fa, y.size) * sigma2
    state = PursuitState(AtomDictionary(y.shape), as_block(y), settings)
    while len(state) < y.size:
        peak = np.max(np.abs(dft_spectrum(unvec(state.R[0], y.shape))) ** 2)
        if peak < tau:
            break
        state.detection_step()
    return _set_from_state(state, y.shape, single=True)


def run_topk(state: PursuitState, k_max: int) -> None:
    # merges can shrink the set, so loop on size with a hard cap
    for _ in range(2 * k_max):
        if len(state) >= k_max:
            break
        state.detection_step()


def nomp_topk(y: np.ndarray, k_max: int, settings: RefineSettings = RefineSettings()) -> CandidateSet:
    """Run ``k_max`` detect-refine-LS iterations without any stopping test."""
    y = np.asarray(y, dtype=complex)
    if k_max < 1 or k_max > y.size:
        raise InvalidArgumentError(f"k_max must lie in [1, {y.size}], got {k_max}")
    state = PursuitState(AtomDictionary(y.shape), as_block(y), settings)
    run_topk(state, k_max)
    return _set_from_state(state, y.shape, single=True)
