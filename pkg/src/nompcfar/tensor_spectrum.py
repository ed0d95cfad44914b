"""Complex-tensor primitives: steering vectors, atoms, spectra and peaks.

Observations are plain ``numpy`` arrays of shape ``(N_1, ..., N_D)`` indexed
as ``y[n_1, ..., n_D]``. Atoms and least-squares systems use the Kronecker
vectorisation in which the first dimension varies fastest, i.e.
``vec(y) == y.reshape(-1, order="F")``. Spectra, peaks and files use the
natural C (row-major) order of the array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError

TWO_PI = 2.0 * np.pi


def wrap_freq(omega):
    """Reduce angles into ``[0, 2*pi)``."""
    w = np.mod(np.asarray(omega, dtype=float), TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    return np.where(w >= TWO_PI, 0.0, w)


def wrap_dist(omega_a, omega_b):
    """Circular distance ``min_a |omega_b - omega_a + 2*pi*a|`` in ``[0, pi]``."""
    d = np.mod(np.asarray(omega_b, dtype=float) - np.asarray(omega_a, dtype=float), TWO_PI)
    return np.minimum(d, TWO_PI - d)


def signed_freq(omega):
    """Map angles into ``[-pi, pi)``."""
    return np.mod(np.asarray(omega, dtype=float) + np.pi, TWO_PI) - np.pi


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(n) for n in dims)
    if len(dims) == 0 or any(n < 1 for n in dims):
        raise InvalidArgumentError(f"dims must be a non-empty list of positive sizes, got {dims}")
    return dims


def _check_freq(dims: tuple[int, ...], freq) -> np.ndarray:
    freq = np.atleast_1d(np.asarray(freq, dtype=float))
    if freq.shape != (len(dims),):
        raise InvalidArgumentError(
            f"frequency has {freq.size} entries but the tensor has {len(dims)} dimensions"
        )
    return freq


@dataclass(frozen=True)
class SinusoidComponent:
    """One complex amplitude and its D-dimensional frequency."""

    amplitude: complex
    freq: np.ndarray

    def __post_init__(self):
        freq = wrap_freq(np.atleast_1d(np.asarray(self.freq, dtype=float)))
        if not np.all(np.isfinite(freq)):
            raise InvalidArgumentError("frequency must be finite")
        if not np.all(np.isfinite(np.asarray(self.amplitude))):
            raise InvalidArgumentError("amplitude must be finite")
        object.__setattr__(self, "freq", freq)


def steering_vector(P: int, omega: float) -> np.ndarray:
    """Return ``[1, e^{j w}, ..., e^{j (P-1) w}]``."""
    if int(P) < 1:
        raise InvalidArgumentError(f"steering vector length must be >= 1, got {P}")
    return np.exp(1j * omega * np.arange(int(P)))


def atom_tensor(dims: Sequence[int], freq) -> np.ndarray:
    """Outer product ``a_{N_1}(w_1) o ... o a_{N_D}(w_D)`` with shape ``dims``."""
    dims = _check_dims(dims)
    freq = _check_freq(dims, freq)
    out = np.ones((), dtype=complex)
    for n, w in zip(dims, freq):
        out = np.multiply.outer(out, steering_vector(n, w))
    return out


def atom(dims: Sequence[int], freq) -> np.ndarray:
    """Vectorised atom ``a_{N_D}(w_D) kron ... kron a_{N_1}(w_1)``."""
    dims = _check_dims(dims)
    freq = _check_freq(dims, freq)
    out = np.ones(1, dtype=complex)
    for n, w in zip(dims, freq):
        # later dimensions go to the left of the Kronecker chain
        out = np.kron(steering_vector(n, w), out)
    return out


def vec(y: np.ndarray) -> np.ndarray:
    """Kronecker-order vectorisation (first dimension fastest)."""
    return np.asarray(y).reshape(-1, order="F")


def unvec(v: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    return np.asarray(v).reshape(tuple(dims), order="F")


def grid_indices(dims: Sequence[int]) -> np.ndarray:
    """``(N, D)`` array of sample indices in Kronecker (``vec``) order."""
    dims = _check_dims(dims)
    mesh = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    return np.stack([vec(m) for m in mesh], axis=1).astype(float)


def synthesize(dims: Sequence[int], components: Iterable[SinusoidComponent]) -> np.ndarray:
    """Noiseless tensor ``sum_k x_k A(w_k)``; an empty list gives zeros."""
    dims = _check_dims(dims)
    out = np.zeros(dims, dtype=complex)
    for comp in components:
        out += comp.amplitude * atom_tensor(dims, comp.freq)
    return out


def dft_spectrum(y: np.ndarray) -> np.ndarray:
    """Unitary D-dimensional DFT, ``1/sqrt(N)`` normalised."""
    return np.fft.fftn(np.asarray(y, dtype=complex), norm="ortho")


def oversampled_spectrum(y: np.ndarray, gamma: int) -> np.ndarray:
    """Zero-padded spectrum on the ``gamma * N_d`` grid, scaled by ``1/sqrt(N)``.

    Bin ``k_d`` sits at frequency ``2*pi*k_d / (gamma*N_d)``; with ``gamma=1``
    this is exactly :func:`dft_spectrum`.
    """
    gamma = int(gamma)
    if gamma < 1:
        raise InvalidArgumentError(f"oversampling factor must be >= 1, got {gamma}")
    y = np.asarray(y, dtype=complex)
    shape = [gamma * n for n in y.shape]
    return np.fft.fftn(y, s=shape, axes=tuple(range(y.ndim))) / np.sqrt(y.size)


def peak_location(spectrum: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Index of the largest ``|.|^2``; ties go to the smallest C-order index."""
    spectrum = np.asarray(spectrum)
    if spectrum.size == 0:
        raise InvalidArgumentError("peak of an empty tensor")
    power = np.abs(spectrum) ** 2
    flat = int(np.argmax(power))
    idx = tuple(int(i) for i in np.unravel_index(flat, spectrum.shape))
    return idx, float(power.flat[flat])


def grid_frequency(index: Sequence[int], grid_dims: Sequence[int]) -> np.ndarray:
    """Frequency vector of a bin on a ``grid_dims`` DFT grid."""
    return TWO_PI * np.asarray(index, dtype=float) / np.asarray(grid_dims, dtype=float)


def nearest_cell(freq, dims: Sequence[int]) -> tuple[int, ...]:
    """DFT-grid cell closest (circularly) to ``freq``."""
    dims_arr = np.asarray(dims)
    k = np.rint(wrap_freq(freq) * dims_arr / TWO_PI).astype(int) % dims_arr
    return tuple(int(i) for i in k)
