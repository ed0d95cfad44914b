"""Atom dictionaries shared by the pursuit and the detector.

An :class:`AtomDictionary` hides whether measurements are the full tensor
(possibly with several snapshots) or a compressed vector ``phi @ vec(z)``.
Measurement blocks are always ``(S, M)`` complex arrays in Kronecker order.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError
from .tensor_spectrum import TWO_PI, grid_indices, vec

_NO_PHI = np.zeros((1, 1), dtype=complex)


class AtomDictionary:
    """Atoms ``a(w)`` of a ``dims`` grid, optionally compressed by ``phi``.

    With ``phi`` the atoms are the unit-norm generalised atoms
    ``phi a(w) / ||phi a(w)||``; without it they are the raw unit-modulus
    atoms, whose amplitudes follow the usual ``a(w)^H y / N`` convention.
    """

    def __init__(self, dims: Sequence[int], phi: np.ndarray | None = None):
        self.dims = tuple(int(n) for n in dims)
        self.D = len(self.dims)
        self.N = int(np.prod(self.dims))
        self.grid = grid_indices(self.dims)
        if phi is None:
            self.phi = _NO_PHI
            self.use_phi = False
            self.M = self.N
        else:
            phi = np.ascontiguousarray(phi, dtype=complex)
            if phi.ndim != 2 or phi.shape[1] != self.N:
                raise InvalidArgumentError(f"compression matrix must be M x {self.N}, got {phi.shape}")
            if self.D != 1:
                raise InvalidArgumentError("compressive measurements are supported in 1-D only")
            self.phi = phi
            self.use_phi = True
            self.M = phi.shape[0]
        self.normalize = self.use_phi
        self.max_step = TWO_PI / np.asarray(self.dims, dtype=float)
        self._grid_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- atoms -------------------------------------------------------------

    def atoms(self, freqs: np.ndarray) -> np.ndarray:
        """``(M, K)`` matrix of fitted atoms."""
        freqs = np.ascontiguousarray(np.asarray(freqs, dtype=float).reshape(-1, self.D))
        return _kernels.atom_matrix(self.grid, freqs, self.phi, self.use_phi, self.normalize)

    def synthesize(self, freqs: np.ndarray, amps: np.ndarray) -> np.ndarray:
        """``(S, M)`` block ``sum_k amps[k, s] * c(w_k)``."""
        amps = np.asarray(amps, dtype=complex)
        if len(freqs) == 0:
            S = amps.shape[1] if amps.ndim == 2 else 1
            return np.zeros((S, self.M), dtype=complex)
        return (self.atoms(freqs) @ amps).T

    def project(self, freqs: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Single-atom least-squares amplitudes, ``(K, S)``."""
        A = self.atoms(freqs)
        scale = 1.0 if self.normalize else 1.0 / self.N
        return (A.conj().T @ Y.T) * scale

    # -- spectra -----------------------------------------------------------

    def _grid_atoms(self, gamma: int) -> tuple[np.ndarray, np.ndarray]:
        """Compressed atoms on the ``gamma * N`` grid and their norms."""
        if gamma not in self._grid_cache:
            L = gamma * self.N
            B = np.fft.ifft(self.phi, n=L, axis=1) * L
            norms = np.linalg.norm(B, axis=0)
            self._grid_cache[gamma] = (B, norms)
        return self._grid_cache[gamma]

    def _as_tensors(self, Y: np.ndarray) -> np.ndarray:
        """``(S, M)`` Kronecker-order rows to ``(S, *dims)`` tensors."""
        S = Y.shape[0]
        rev = Y.reshape((S,) + self.dims[::-1])
        return rev.transpose((0,) + tuple(range(self.D, 0, -1)))

    def spectrum(self, Y: np.ndarray) -> np.ndarray:
        """Normalised DFT-grid spectrum per snapshot, ``(S, *dims)``.

        For raw atoms this is the unitary DFT; for generalised atoms it is
        ``c(w_n)^H y`` over the N-point grid.
        """
        if self.use_phi:
            B, norms = self._grid_atoms(1)
            spec = (B.conj().T @ Y.T) / norms[:, None]
            return spec.T.reshape((Y.shape[0],) + self.dims)
        axes = tuple(range(1, self.D + 1))
        return np.fft.fftn(self._as_tensors(Y), axes=axes, norm="ortho")

    def atom_spectra(self, freqs: np.ndarray) -> np.ndarray:
        """Spectra of the fitted atoms, ``(K, *dims)``."""
        freqs = np.asarray(freqs, dtype=float).reshape(-1, self.D)
        return self.spectrum(self.atoms(freqs).T)

    def objective_grid(self, Y: np.ndarray, gamma: int) -> tuple[np.ndarray, tuple[int, ...]]:
        """``G(w)`` summed over snapshots on the oversampled grid, and the grid shape."""
        if self.use_phi:
            B, norms = self._grid_atoms(gamma)
            G = (np.abs(B.conj().T @ Y.T) ** 2).sum(axis=1) / norms**2
            return G, (gamma * self.N,)
        shape = tuple(gamma * n for n in self.dims)
        axes = tuple(range(1, self.D + 1))
        spec = np.fft.fftn(self._as_tensors(Y), s=shape, axes=axes)
        G = (np.abs(spec) ** 2).sum(axis=0) / self.N
        return G, shape

    # -- kernels -----------------------------------------------------------

    def derivatives(self, Y: np.ndarray, freq) -> tuple[float, np.ndarray, np.ndarray]:
        G, grad, hess, _u, _v = _kernels.derivatives(
            np.ascontiguousarray(Y, dtype=complex), self.grid,
            np.asarray(freq, dtype=float), self.phi, self.use_phi,
        )
        return G, grad, hess

    def objective(self, Y: np.ndarray, freq) -> float:
        return _kernels.value(
            np.ascontiguousarray(Y, dtype=complex), self.grid,
            np.asarray(freq, dtype=float), self.phi, self.use_phi,
        )

    def refine_single(self, Y: np.ndarray, freq, steps: int) -> tuple[np.ndarray, np.ndarray]:
        w, amps = _kernels.refine_single(
            np.ascontiguousarray(Y, dtype=complex), self.grid,
            np.asarray(freq, dtype=float), self.phi, self.use_phi,
            self.normalize, int(steps), self.max_step,
        )
        return w, amps

    def cyclic(self, R: np.ndarray, freqs: np.ndarray, amps: np.ndarray, rounds: int, steps: int) -> None:
        _kernels.cyclic(
            R, self.grid, freqs, amps, self.phi, self.use_phi,
            self.normalize, int(rounds), int(steps), self.max_step,
        )


def as_block(y: np.ndarray) -> np.ndarray:
    """One tensor to a ``(1, N)`` measurement block."""
    return vec(np.asarray(y, dtype=complex))[None, :].copy()
