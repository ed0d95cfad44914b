"""Compiled inner loops for frequency refinement.

Everything here works on vectorised data: ``Y`` is ``(S, M)`` (one row per
snapshot), ``grid`` is the ``(N, D)`` table of sample indices in Kronecker
order and ``phi`` an ``(M, N)`` compression matrix, ignored unless
``use_phi``. With ``b(w) = phi @ a(w)`` (or ``a(w)`` itself) the objective is

    G(w) = sum_s |b(w)^H y_s|^2 / ||b(w)||^2

and the fitted atom is ``c = b / scale`` with ``scale = ||b||`` when
``normalize`` else 1. The least-squares amplitude on ``c`` is
``u * scale / ||b||^2`` where ``u = b^H y``.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _powers(omega, n):
    """``exp(j k omega)`` for ``k < n`` as products of two short tables."""
    small = np.empty(32, dtype=np.complex128)
    z = np.exp(1j * omega)
    cur = 1.0 + 0.0j
    for k in range(32):
        small[k] = cur
        cur *= z
    n_big = (n + 31) // 32
    big = np.empty(n_big, dtype=np.complex128)
    for b in range(n_big):
        big[b] = np.exp(1j * omega * (32.0 * b))
    out = np.empty(n, dtype=np.complex128)
    for k in range(n):
        out[k] = small[k & 31] * big[k >> 5]
    return out


@numba.njit(cache=True)
def _base_atom(grid, omega):
    """Unit-modulus atom ``exp(j n.w)`` in Kronecker order."""
    n, d = grid.shape
    if d == 1:
        return _powers(omega[0], n)
    a = np.ones(n, dtype=np.complex128)
    for j in range(d):
        size = 0
        for i in range(n):
            if grid[i, j] >= size:
                size = int(grid[i, j]) + 1
        tab = _powers(omega[j], size)
        for i in range(n):
            a[i] *= tab[int(grid[i, j])]
    return a


@numba.njit(cache=True)
def atom_and_norm(grid, omega, phi, use_phi):
    a = _base_atom(grid, omega)
    if use_phi:
        b = phi @ a
        v = 0.0
        for m in range(b.shape[0]):
            v += b[m].real * b[m].real + b[m].imag * b[m].imag
        return b, v
    return a, float(a.shape[0])


@numba.njit(cache=True)
def value(Y, grid, omega, phi, use_phi):
    b, v = atom_and_norm(grid, omega, phi, use_phi)
    if v <= 0.0:
        return 0.0
    total = 0.0
    for s in range(Y.shape[0]):
        u = 0.0 + 0.0j
        for m in range(b.shape[0]):
            u += np.conj(b[m]) * Y[s, m]
        total += u.real * u.real + u.imag * u.imag
    return total / v


@numba.njit(cache=True)
def _moments_plain(Y, grid, a):
    """``u = a^H y`` and its first/second derivatives for raw atoms."""
    n, d = grid.shape
    S = Y.shape[0]
    u = np.zeros(S, dtype=np.complex128)
    up = np.zeros((S, d), dtype=np.complex128)
    upp = np.zeros((S, d, d), dtype=np.complex128)
    if d == 1:
        for s in range(S):
            s0 = 0.0 + 0.0j
            s1 = 0.0 + 0.0j
            s2 = 0.0 + 0.0j
            for i in range(n):
                t = np.conj(a[i]) * Y[s, i]
                g = grid[i, 0]
                s0 += t
                s1 += g * t
                s2 += g * g * t
            u[s] = s0
            # d/dw conj(a) = -j n conj(a)
            up[s, 0] = -1j * s1
            upp[s, 0, 0] = -s2
        return u, up, upp
    for i in range(n):
        ca = np.conj(a[i])
        for s in range(S):
            t = ca * Y[s, i]
            u[s] += t
            for j in range(d):
                up[s, j] += -1j * grid[i, j] * t
                for k in range(d):
                    upp[s, j, k] += -grid[i, j] * grid[i, k] * t
    return u, up, upp


@numba.njit(cache=True)
def _moments_phi(Y, grid, a, phi):
    """Same as :func:`_moments_plain` for compressed atoms, plus ``||b||^2`` terms."""
    n, d = grid.shape
    S = Y.shape[0]
    ap = np.empty((d, n), dtype=np.complex128)
    app = np.empty((d, d, n), dtype=np.complex128)
    for i in range(n):
        for j in range(d):
            ap[j, i] = 1j * grid[i, j] * a[i]
            for k in range(d):
                app[j, k, i] = -grid[i, j] * grid[i, k] * a[i]
    b = phi @ a
    m_len = phi.shape[0]
    bp = np.empty((d, m_len), dtype=np.complex128)
    bpp = np.empty((d, d, m_len), dtype=np.complex128)
    for j in range(d):
        bp[j] = phi @ np.ascontiguousarray(ap[j])
        for k in range(d):
            bpp[j, k] = phi @ np.ascontiguousarray(app[j, k])
    v = 0.0
    vp = np.zeros(d)
    vpp = np.zeros((d, d))
    for m in range(m_len):
        v += (np.conj(b[m]) * b[m]).real
    for j in range(d):
        acc = 0.0 + 0.0j
        for m in range(m_len):
            acc += np.conj(bp[j, m]) * b[m]
        vp[j] = 2.0 * acc.real
        for k in range(d):
            acc2 = 0.0 + 0.0j
            for m in range(m_len):
                acc2 += np.conj(bpp[j, k, m]) * b[m] + np.conj(bp[j, m]) * bp[k, m]
            vpp[j, k] = 2.0 * acc2.real
    u = np.zeros(S, dtype=np.complex128)
    up = np.zeros((S, d), dtype=np.complex128)
    upp = np.zeros((S, d, d), dtype=np.complex128)
    for s in range(S):
        for m in range(m_len):
            y = Y[s, m]
            u[s] += np.conj(b[m]) * y
            for j in range(d):
                up[s, j] += np.conj(bp[j, m]) * y
                for k in range(d):
                    upp[s, j, k] += np.conj(bpp[j, k, m]) * y
    return u, up, upp, v, vp, vpp


@numba.njit(cache=True)
def derivatives(Y, grid, omega, phi, use_phi):
    """Return ``G``, its gradient and Hessian at ``omega``, plus ``u`` and ``||b||^2``."""
    d = grid.shape[1]
    S = Y.shape[0]
    a = _base_atom(grid, omega)
    if use_phi:
        u, up, upp, v, vp, vpp = _moments_phi(Y, grid, a, phi)
    else:
        u, up, upp = _moments_plain(Y, grid, a)
        v = float(grid.shape[0])
        vp = np.zeros(d)
        vpp = np.zeros((d, d))

    P = 0.0
    Pp = np.zeros(d)
    Ppp = np.zeros((d, d))
    for s in range(S):
        P += (np.conj(u[s]) * u[s]).real
        for j in range(d):
            Pp[j] += 2.0 * (np.conj(u[s]) * up[s, j]).real
            for k in range(d):
                Ppp[j, k] += 2.0 * (np.conj(up[s, k]) * up[s, j] + np.conj(u[s]) * upp[s, j, k]).real

    G = P / v
    grad = np.empty(d)
    hess = np.empty((d, d))
    for j in range(d):
        grad[j] = (Pp[j] * v - P * vp[j]) / (v * v)
    for j in range(d):
        for k in range(d):
            hess[j, k] = (
                Ppp[j, k] / v
                - (Pp[j] * vp[k] + Pp[k] * vp[j]) / (v * v)
                - P * vpp[j, k] / (v * v)
                + 2.0 * P * vp[j] * vp[k] / (v * v * v)
            )
    return G, grad, hess, u, v


@numba.njit(cache=True)
def _clip(step, max_step):
    out = step.copy()
    for j in range(out.shape[0]):
        if out[j] > max_step[j]:
            out[j] = max_step[j]
        elif out[j] < -max_step[j]:
            out[j] = -max_step[j]
    return out


@numba.njit(cache=True)
def _line_search(Y, grid, omega, direction, G0, phi, use_phi, max_halvings):
    t = 1.0
    # gains below rounding of G are noise, not ascent
    floor = G0 + 8.0 * 2.220446049250313e-16 * abs(G0)
    for _ in range(max_halvings):
        cand = omega + t * direction
        Gc = value(Y, grid, cand, phi, use_phi)
        if Gc > floor:
            return cand, Gc, True
        t *= 0.5
    return omega, G0, False


@numba.njit(cache=True)
def refine(Y, grid, omega, phi, use_phi, steps, max_step):
    """Damped Newton ascent on ``G`` with a gradient-ascent fallback.

    A Newton step is tried only where the Hessian is negative definite; any
    trial point must raise ``G`` by more than its rounding error or the step
    is halved. Returns the new
    frequency and ``G`` there; ``G`` never decreases.
    """
    d = omega.shape[0]
    w = omega.copy()
    if steps <= 0:
        return w, value(Y, grid, w, phi, use_phi)
    G = 0.0
    for _ in range(steps):
        G, grad, hess, u, v = derivatives(Y, grid, w, phi, use_phi)
        negdef = True
        if d == 1:
            negdef = hess[0, 0] < 0.0
        else:
            eig = np.linalg.eigvalsh(hess)
            negdef = eig.max() < 0.0
        moved = False
        if negdef:
            if d == 1:
                step = np.empty(1)
                step[0] = -grad[0] / hess[0, 0]
            else:
                step = -np.linalg.solve(hess, grad)
            direction = _clip(step, max_step)
            gain = 0.0
            for j in range(d):
                gain += 0.5 * grad[j] * direction[j]
            if gain <= 8.0 * 2.220446049250313e-16 * abs(G):
                # below the rounding of G the quadratic model is exact and a
                # value comparison cannot tell; take the step and stop
                w = w + direction
                G = value(Y, grid, w, phi, use_phi)
                break
            w_new, G_new, moved = _line_search(Y, grid, w, direction, G, phi, use_phi, 30)
            if not moved:
                break
        if not moved:
            gnorm = 0.0
            for j in range(d):
                gnorm = max(gnorm, abs(grad[j]) / max_step[j])
            if gnorm > 0.0:
                direction = grad / gnorm
                w_new, G_new, moved = _line_search(Y, grid, w, direction, G, phi, use_phi, 40)
        if not moved:
            break
        w = w_new
        G = G_new
    return w, G


@numba.njit(cache=True)
def atom_matrix(grid, freqs, phi, use_phi, normalize):
    """``(M, K)`` matrix of fitted atoms."""
    K = freqs.shape[0]
    M = phi.shape[0] if use_phi else grid.shape[0]
    out = np.empty((M, K), dtype=np.complex128)
    for k in range(K):
        c, _scale = fitted_atom(grid, freqs[k], phi, use_phi, normalize)
        out[:, k] = c
    return out


@numba.njit(cache=True)
def fitted_atom(grid, omega, phi, use_phi, normalize):
    """Atom used in the synthesis and the divisor turning ``u`` into an amplitude."""
    b, v = atom_and_norm(grid, omega, phi, use_phi)
    if normalize:
        scale = np.sqrt(v)
        return b / scale, scale / v
    return b, 1.0 / v


@numba.njit(cache=True)
def refine_single(Y, grid, omega, phi, use_phi, normalize, steps, max_step):
    w, G = refine(Y, grid, omega, phi, use_phi, steps, max_step)
    c, amp_scale = fitted_atom(grid, w, phi, use_phi, normalize)
    S = Y.shape[0]
    amps = np.zeros(S, dtype=np.complex128)
    for s in range(S):
        acc = 0.0 + 0.0j
        if normalize:
            # c is unit norm
            for m in range(c.shape[0]):
                acc += np.conj(c[m]) * Y[s, m]
            amps[s] = acc
        else:
            for m in range(c.shape[0]):
                acc += np.conj(c[m]) * Y[s, m]
            amps[s] = acc * amp_scale
    return w, amps


@numba.njit(cache=True)
def cyclic(R, grid, freqs, amps, phi, use_phi, normalize, rounds, steps, max_step):
    """Gauss-Seidel sweeps of single refinement; updates ``R``, ``freqs`` and ``amps`` in place.

    ``R`` must hold the residual of the current set on entry.
    """
    K = freqs.shape[0]
    S = R.shape[0]
    M = R.shape[1]
    pseudo = np.empty((S, M), dtype=np.complex128)
    atoms = np.empty((K, M), dtype=np.complex128)
    for k in range(K):
        c, _scale = fitted_atom(grid, freqs[k], phi, use_phi, normalize)
        atoms[k] = c
    for _ in range(rounds):
        for k in range(K):
            for s in range(S):
                for m in range(M):
                    pseudo[s, m] = R[s, m] + amps[k, s] * atoms[k, m]
            w, _G = refine(pseudo, grid, freqs[k], phi, use_phi, steps, max_step)
            c2, amp_scale = fitted_atom(grid, w, phi, use_phi, normalize)
            for s in range(S):
                acc = 0.0 + 0.0j
                for m in range(M):
                    acc += np.conj(c2[m]) * pseudo[s, m]
                x = acc if normalize else acc * amp_scale
                for m in range(M):
                    R[s, m] = pseudo[s, m] - x * c2[m]
                amps[k, s] = x
            atoms[k] = c2
            freqs[k] = w
