"""NOMP with a soft CFAR stopping rule.

The detector starts from ``k_max`` pursuit components and then alternates
between dropping the weakest component (when its CFAR margin is negative)
and adding a new one from the residual (when the residual still fires the
detector). Variants cover the additive-only ablation, several snapshots
sharing frequencies, and compressed 1-D measurements.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .atoms import AtomDictionary, as_block
from .cfar_core import CfarConfig, DeltaReport, delta_batch, delta_from_power
from .errors import InvalidArgumentError
from .nomp import (
    CandidateSet,
    PursuitState,
    RefineSettings,
    _set_from_state,
    run_topk,
)
from .tensor_spectrum import TWO_PI, nearest_cell, synthesize, vec, wrap_freq


@dataclass(frozen=True)
class NompCfarSettings:
    """Run settings; ``max_iters`` defaults to ``4 * k_max + 16``.

    With ``refit_margins`` each component is tested against the residual of
    a least-squares fit of the other components; otherwise the others keep
    their current amplitudes and the test input is the residual plus
    component ``k``.
    """

    k_max: int
    cfar: CfarConfig = field(default_factory=CfarConfig)
    refine: RefineSettings = field(default_factory=RefineSettings)
    max_iters: int | None = None
    refit_margins: bool = True

    def __post_init__(self):
        if int(self.k_max) < 1:
            raise InvalidArgumentError(f"k_max must be >= 1, got {self.k_max}")
        if self.max_iters is None:
            object.__setattr__(self, "max_iters", 4 * int(self.k_max) + 16)
        if self.max_iters < self.k_max:
            raise InvalidArgumentError("max_iters must be >= k_max")


@dataclass(frozen=True)
class CompressionOperator:
    """``M x N`` complex compression matrix with ``M <= N``."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=complex)
        if mat.ndim != 2:
            raise InvalidArgumentError("compression matrix must be 2-D")
        if mat.shape[0] > mat.shape[1]:
            raise InvalidArgumentError(f"compression matrix has more rows than columns: {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise InvalidArgumentError("compression matrix has non-finite entries")
        object.__setattr__(self, "matrix", mat)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]


@dataclass
class DetectionReport:
    """Final components with their CFAR margins (dB) and bookkeeping.

    ``trace`` lists ``(action, index, delta)`` with action one of
    ``"deactivate"``, ``"activate"`` or ``"stop"``. ``saturated`` is set when
    the residual still fired but the set was already ``k_max`` long;
    ``converged`` is false only when ``max_iters`` ran out.
    """

    components: CandidateSet
    margins: np.ndarray
    thresholds: np.ndarray
    noise_floors: np.ndarray
    peak_powers: np.ndarray
    n_ref_used: np.ndarray
    iterations: int
    trace: list = field(default_factory=list)
    converged: bool = True
    saturated: bool = False
    cycle_stop: bool = False

    def __len__(self) -> int:
        return len(self.components)


# ---------------------------------------------------------------------------
# residual helpers on tensors


def residual(y: np.ndarray, cset: CandidateSet) -> np.ndarray:
    y = np.asarray(y, dtype=complex)
    if tuple(y.shape) != tuple(cset.dims):
        raise InvalidArgumentError(f"tensor shape {y.shape} does not match set dims {cset.dims}")
    return y - synthesize(y.shape, cset.components)


def pseudo_measurement(y: np.ndarray, cset: CandidateSet, k: int) -> np.ndarray:
    """Residual with component ``k`` added back."""
    if not 0 <= k < len(cset):
        raise InvalidArgumentError(f"component index {k} out of range for {len(cset)} components")
    return residual(y, cset.without(k))


# ---------------------------------------------------------------------------
# CFAR margins on a pursuit state


class _Scorer:
    """CFAR bookkeeping for one dictionary and config."""

    def __init__(self, dic: AtomDictionary, config: CfarConfig, refit: bool = True):
        self.dic = dic
        self.config = config
        self.refit = refit
        self.cells = dic.dims
        # k -> (neighbour indices, their frequencies once k is dropped)
        self.moved: dict = {}

    def _power(self, spec: np.ndarray) -> np.ndarray:
        """Snapshot-averaged power; ``spec`` has snapshots on axis -2."""
        return np.mean(np.abs(spec) ** 2, axis=-2)

    def _cell_masks(self, freqs: np.ndarray) -> np.ndarray:
        """``(K, n_cells)`` exclusion footprint of each component's nearest cell."""
        dims = np.asarray(self.cells)
        K = len(freqs)
        n_cells = int(np.prod(dims))
        if K == 0:
            return np.zeros((0, n_cells), dtype=bool)
        cells = np.rint(wrap_freq(freqs) * dims / TWO_PI).astype(int) % dims
        r = self.config.radius
        box = np.stack(np.meshgrid(*[np.arange(-r, r + 1)] * len(dims), indexing="ij"), axis=-1)
        box = box.reshape(-1, len(dims))
        strides = np.array([int(np.prod(dims[d + 1:])) for d in range(len(dims))])
        flat = ((cells[:, None, :] + box[None, :, :]) % dims) @ strides
        masks = np.zeros((K, n_cells), dtype=bool)
        masks[np.repeat(np.arange(K), flat.shape[1]), flat.ravel()] = True
        return masks

    def residual_test(self, state: PursuitState) -> DeltaReport:
        spec = self.dic.spectrum(state.R).reshape(state.S, -1)
        mask = self._cell_masks(state.freqs).any(axis=0) if len(state) else None
        return delta_from_power(self._power(spec).reshape(self.cells), self.config, mask)

    def margins(self, state: PursuitState) -> list[DeltaReport]:
        K = len(state)
        if K == 0:
            return []
        # spectra are linear, so every test spectrum is a combination of
        # the residual spectrum and the atom spectra
        spec_c = self.dic.atom_spectra(state.freqs).reshape(K, -1)
        if self.refit:
            R, W, X = self._downdates(state)
        else:
            R, W, X = state.R, np.eye(K, dtype=complex), state.amps
        spec_r = self.dic.spectrum(R).reshape(R.shape[0], -1)
        spec = spec_r[None, :, :] + X[:, :, None] * (W.T @ spec_c)[:, None, :]
        self.moved = {}
        if self.refit:
            for k, near in self._crowded(state.freqs):
                spec[k], self.moved[k] = self._rerefined_spectrum(state, R, W, X, k, near)
        powers = self._power(spec).reshape((K,) + self.cells)
        own = self._cell_masks(state.freqs)
        others = (own.sum(axis=0)[None, :] - own) > 0
        return delta_batch(powers, self.config, others)

    def _crowded(self, freqs: np.ndarray):
        """``(k, neighbours)`` for components with others inside their exclusion footprint."""
        dims = np.asarray(self.cells)
        cells = np.rint(wrap_freq(freqs) * dims / TWO_PI).astype(int) % dims
        diff = np.abs(cells[:, None, :] - cells[None, :, :])
        cheb = np.minimum(diff, dims - diff).max(axis=2)
        np.fill_diagonal(cheb, np.iinfo(int).max)
        close = cheb <= self.config.radius
        return [(k, np.flatnonzero(close[k])) for k in np.flatnonzero(close.any(axis=1))]

    def _rerefined_spectrum(self, state, R, W, X, k, near) -> np.ndarray:
        """Spectrum of the residual once ``k`` is dropped and its neighbours re-refined.

        Without ``k`` a neighbour may move to absorb what ``k`` explained
        (a split target), so the neighbours get the usual cyclic pass
        against the residual of the downdated fit before ``k`` is tested.
        """
        A = self.dic.atoms(state.freqs)
        shift = (A @ W[:, k])[None, :] * X[k][:, None]
        Rk = np.ascontiguousarray(R + shift)
        # downdated amplitudes of the neighbours
        amps = np.ascontiguousarray(X[near] - np.outer(W[near, k], X[k]))
        freqs = np.ascontiguousarray(state.freqs[near])
        rs = state.settings
        self.dic.cyclic(Rk, freqs, amps, max(rs.cyclic_rounds, 1), max(rs.newton_steps_single, 1))
        return self.dic.spectrum(Rk).reshape(Rk.shape[0], -1), (near, wrap_freq(freqs))

    def drop(self, state: PursuitState, k: int) -> None:
        """Remove ``k`` and refit, starting from the neighbour positions its margin assumed."""
        if k in self.moved:
            near, freqs = self.moved[k]
            state.freqs[near] = freqs
        state.remove(k)
        state.least_squares()
        state.refine_all()

    def _downdates(self, state: PursuitState):
        """LS residual of the full set and, per ``k``, the rank-one term restoring it.

        Dropping column ``k`` from a least-squares fit adds
        ``A g_k x_k / g_kk`` to the residual, where ``g_k`` is column ``k`` of
        the inverse Gram matrix and ``x_k`` the full-fit amplitude. Returns
        the residual, the matrix whose column ``k`` is ``g_k / g_kk`` and the
        ``(K, S)`` amplitudes.
        """
        A = self.dic.atoms(state.freqs)
        gram = A.conj().T @ A
        ginv = np.linalg.pinv(gram, hermitian=True)
        x = ginv @ (A.conj().T @ state.Y.T)
        R = state.Y - (A @ x).T
        diag = ginv.diagonal().real
        safe = np.where(diag > 0, diag, np.inf)
        return R, ginv / safe[None, :], x


def _report(state: PursuitState, reports: list[DeltaReport], single: bool, **kw) -> DetectionReport:
    dims = state.dic.dims
    return DetectionReport(
        components=_set_from_state(state, dims, single),
        margins=np.array([r.delta for r in reports], dtype=float),
        thresholds=np.array([r.threshold for r in reports], dtype=float),
        noise_floors=np.array([r.noise_floor for r in reports], dtype=float),
        peak_powers=np.array([r.peak_power for r in reports], dtype=float),
        n_ref_used=np.array([r.n_ref_used for r in reports], dtype=int),
        **kw,
    )


def _run(state: PursuitState, settings: NompCfarSettings, single: bool) -> DetectionReport:
    scorer = _Scorer(state.dic, settings.cfar, settings.refit_margins)
    run_topk(state, settings.k_max)
    trace: list = []
    last_removed = None
    # Δ of the last activation at each cell, for the cycle guard
    activated_at: dict = {}
    saturated = cycle_stop = False
    converged = False
    it = 0
    reports = scorer.margins(state)
    while it < settings.max_iters:
        it += 1
        if reports:
            deltas = np.array([r.delta for r in reports])
            k_hat = int(np.argmin(deltas))
            if deltas[k_hat] < 0:
                last_removed = nearest_cell(state.freqs[k_hat], state.dic.dims)
                trace.append(("deactivate", k_hat, float(deltas[k_hat])))
                scorer.drop(state, k_hat)
                reports = scorer.margins(state)
                continue
        new = scorer.residual_test(state)
        if new.delta >= 0 and len(state) < settings.k_max:
            freq, _ = state.coarse()
            cell = nearest_cell(freq, state.dic.dims)
            # re-adding what was just removed is only progress if the
            # residual test now fires harder than the last time it did here
            if cell == last_removed and new.delta <= activated_at.get(cell, -np.inf):
                cycle_stop = True
                trace.append(("stop", len(state), float(new.delta)))
                converged = True
                break
            activated_at[cell] = float(new.delta)
            state.detect_new()
            last_removed = None
            trace.append(("activate", len(state) - 1, float(new.delta)))
            reports = scorer.margins(state)
            continue
        saturated = new.delta >= 0
        trace.append(("stop", -1, float(new.delta)))
        converged = True
        break
    return _report(
        state, reports, single,
        iterations=it, trace=trace, converged=converged, saturated=saturated, cycle_stop=cycle_stop,
    )


def _run_forward(state: PursuitState, settings: NompCfarSettings, single: bool) -> DetectionReport:
    scorer = _Scorer(state.dic, settings.cfar, settings.refit_margins)
    trace: list = []
    converged = saturated = False
    it = 0
    while it < settings.max_iters:
        it += 1
        new = scorer.residual_test(state)
        if new.delta < 0:
            trace.append(("stop", -1, float(new.delta)))
            converged = True
            break
        if len(state) >= settings.k_max:
            saturated = True
            trace.append(("stop", -1, float(new.delta)))
            converged = True
            break
        state.detection_step()
        trace.append(("activate", len(state) - 1, float(new.delta)))
    return _report(
        state, scorer.margins(state), single,
        iterations=it, trace=trace, converged=converged, saturated=saturated,
    )


# ---------------------------------------------------------------------------
# public entry points


def component_margins(y: np.ndarray, cset: CandidateSet, settings: NompCfarSettings) -> list[DeltaReport]:
    """CFAR report of each component's pseudo-measurement.

    Reference cells skip the DFT cells nearest every other component.
    """
    y = np.asarray(y, dtype=complex)
    dic = AtomDictionary(y.shape)
    state = PursuitState(dic, as_block(y), settings.refine)
    if len(cset):
        state.freqs = np.ascontiguousarray(cset.freqs)
        state.amps = np.ascontiguousarray(cset.amp_matrix)
        state.recompute_residual()
    return _Scorer(dic, settings.cfar, settings.refit_margins).margins(state)


def nomp_cfar(y: np.ndarray, settings: NompCfarSettings) -> DetectionReport:
    """Estimate count, frequencies and amplitudes of sinusoids in ``y``."""
    y = np.asarray(y, dtype=complex)
    _check_kmax(settings, y.size)
    state = PursuitState(AtomDictionary(y.shape), as_block(y), settings.refine)
    return _run(state, settings, single=True)


def nomp_cfar_forward(y: np.ndarray, settings: NompCfarSettings) -> DetectionReport:
    """Additive-only variant: detect, add, refine until the residual is quiet."""
    y = np.asarray(y, dtype=complex)
    _check_kmax(settings, y.size)
    state = PursuitState(AtomDictionary(y.shape), as_block(y), settings.refine)
    return _run_forward(state, settings, single=True)


def nomp_cfar_mmv(snapshots, settings: NompCfarSettings) -> DetectionReport:
    """Several snapshots with shared frequencies.

    ``snapshots`` is a sequence of equally shaped tensors (or one array whose
    leading axis indexes snapshots). The detector averages power spectra over
    snapshots, so ``settings.cfar.alpha`` should come from the multi-snapshot
    design. Amplitudes in the result are ``(K, S)``.
    """
    snaps = [np.asarray(s, dtype=complex) for s in snapshots]
    if not snaps:
        raise InvalidArgumentError("no snapshots given")
    dims = snaps[0].shape
    if any(s.shape != dims for s in snaps):
        raise InvalidArgumentError("snapshots differ in shape")
    _check_kmax(settings, snaps[0].size)
    Y = np.stack([vec(s) for s in snaps])
    state = PursuitState(AtomDictionary(dims), Y, settings.refine)
    return _run(state, settings, single=len(snaps) == 1)


def nomp_cfar_compressive(y_c: np.ndarray, phi, settings: NompCfarSettings) -> DetectionReport:
    """1-D detection from ``y_c = phi @ z + noise`` over unit-norm compressed atoms.

    Amplitudes refer to the normalised atoms ``phi a(w) / ||phi a(w)||``.
    """
    op = phi if isinstance(phi, CompressionOperator) else CompressionOperator(phi)
    y_c = np.asarray(y_c, dtype=complex).ravel()
    if y_c.size != op.m:
        raise InvalidArgumentError(f"measurement length {y_c.size} does not match {op.m} rows")
    _check_kmax(settings, op.m)
    dic = AtomDictionary((op.n,), op.matrix)
    state = PursuitState(dic, y_c[None, :].copy(), settings.refine)
    return _run(state, settings, single=True)


def _check_kmax(settings: NompCfarSettings, n: int) -> None:
    if settings.k_max > n:
        raise InvalidArgumentError(f"k_max {settings.k_max} exceeds the {n} available samples")


# ---------------------------------------------------------------------------
# detection records


RECORD_FIELDS = (
    "run_id", "k", "freqs", "amp_re", "amp_im",
    "amplitude_db", "delta_db", "threshold_db", "noise_floor_db",
)


def _db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


def detection_records(report: DetectionReport, run_id: str = "0") -> list[dict]:
    """One flat record per component.

    ``amplitude_db`` is the integrated SNR ``N |x|^2 / noise_floor``; with
    several snapshots the first snapshot's amplitude is reported.
    """
    cset = report.components
    N = int(np.prod(cset.dims))
    amps = cset.amp_matrix[:, 0] if len(cset) else np.zeros(0, complex)
    out = []
    for k in range(len(cset)):
        floor = float(report.noise_floors[k])
        x = complex(amps[k])
        out.append({
            "run_id": run_id,
            "k": k,
            "freqs": [float(w) for w in cset.freqs[k]],
            "amp_re": x.real,
            "amp_im": x.imag,
            "amplitude_db": _db(N * abs(x) ** 2 / floor) if floor > 0 else math.inf,
            "delta_db": float(report.margins[k]),
            "threshold_db": _db(float(report.thresholds[k])),
            "noise_floor_db": _db(floor),
        })
    return out


def write_records(records: Iterable[dict], dest, fmt: str | None = None) -> None:
    """Write records as CSV (frequencies joined by ``;``) or JSON.

    ``dest`` is a path or an open text stream; the format defaults to JSON
    for paths ending in ``.json`` and CSV otherwise.
    """
    records = list(records)
    if hasattr(dest, "write"):
        _write_records(records, dest, fmt or "csv")
        return
    fmt = fmt or ("json" if str(dest).endswith(".json") else "csv")
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        _write_records(records, fh, fmt)


def _write_records(records: list[dict], fh, fmt: str) -> None:
    if fmt == "json":
        json.dump(records, fh, indent=1)
        fh.write("\n")
        return
    if fmt != "csv":
        raise InvalidArgumentError(f"unknown record format {fmt!r}")
    writer = csv.DictWriter(fh, fieldnames=RECORD_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        row = dict(rec)
        row["freqs"] = ";".join(repr(w) for w in rec["freqs"])
        writer.writerow(row)
