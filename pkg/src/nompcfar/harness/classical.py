"""Grid-based FFT + CFAR detector used as a reference point."""

from __future__ import annotations

import numpy as np

from ..cfar_core import CfarConfig, CfarVariant, _window_offsets
from ..nomp_cfar import DetectionReport
from ..errors import DegenerateWindowError
from ..nomp import CandidateSet
from ..tensor_spectrum import TWO_PI, dft_spectrum


def classical_cfar_detect(y: np.ndarray, config: CfarConfig) -> DetectionReport:
    """Test every DFT cell against its own CA/OS threshold.

    ``config.alpha`` is the per-cell multiplier (see
    :func:`~nompcfar.cfar_core.alpha_per_cell`). Firing cells come back as on-grid
    components with amplitude ``Y~ / sqrt(N)``, in C order.
    """
    y = np.asarray(y, dtype=complex)
    dims = y.shape
    spec = dft_spectrum(y)
    power = np.abs(spec) ** 2
    offsets = _window_offsets(dims, config.n_guard)[: config.n_ref]
    if len(offsets) == 0:
        raise DegenerateWindowError(f"grid {dims} leaves no reference cells outside the guard")
    cells = np.stack(np.unravel_index(np.arange(power.size), dims), axis=1)
    strides = np.array([int(np.prod(dims[d + 1:])) for d in range(len(dims))])
    ref = ((cells[:, None, :] + offsets[None, :, :]) % np.asarray(dims)) @ strides
    ref_power = power.ravel()[ref]
    if config.variant is CfarVariant.OS:
        r = min(config.os_rank, ref_power.shape[1])
        floor = np.partition(ref_power, r - 1, axis=1)[:, r - 1]
    else:
        floor = ref_power.mean(axis=1)
    thresh = config.alpha * floor
    flat = power.ravel()
    fired = np.flatnonzero(flat >= thresh)
    with np.errstate(divide="ignore"):
        margins = 10 * np.log10(flat[fired] / thresh[fired])
    freqs = TWO_PI * cells[fired] / np.asarray(dims, dtype=float)
    amps = spec.ravel()[fired] / np.sqrt(y.size)
    return DetectionReport(
        components=CandidateSet(dims, freqs, amps),
        margins=margins,
        thresholds=thresh[fired],
        noise_floors=floor[fired],
        peak_powers=flat[fired],
        n_ref_used=np.full(len(fired), len(offsets)),
        iterations=1,
    )
