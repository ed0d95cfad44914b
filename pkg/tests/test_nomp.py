import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nompcfar.analysis import crb_single_freq
from nompcfar.atoms import AtomDictionary
from nompcfar.errors import IllConditionedError, InvalidArgumentError
from nompcfar.nomp import (
    CandidateSet,
    PursuitState,
    RefineSettings,
    coarse_detect,
    cyclic_refine,
    ls_reestimate,
    newton_refine_single,
    nomp_baseline,
    nomp_topk,
    objective_derivatives,
)
from nompcfar.tensor_spectrum import TWO_PI, SinusoidComponent, atom, steering_vector, synthesize, vec, wrap_dist


def noise(rng, dims, sigma2=1.0):
    return np.sqrt(sigma2 / 2) * (rng.standard_normal(dims) + 1j * rng.standard_normal(dims))


def separated(rng, k, n, sep=2.5):
    while True:
        f = np.sort(rng.uniform(0, TWO_PI, k))
        gaps = np.diff(np.r_[f, f[0] + TWO_PI])
        if k == 1 or gaps.min() > sep * TWO_PI / n:
            return f


def objective(y, w):
    a = atom(y.shape, w)
    return abs(np.vdot(a, vec(y))) ** 2 / y.size


# candidate sets


def test_candidate_set_validation():
    with pytest.raises(InvalidArgumentError):
        CandidateSet((8,), [[0.1], [0.2]], [1.0])
    c = CandidateSet((8,), [[-0.1]], [1j])
    assert c.freqs[0, 0] == pytest.approx(TWO_PI - 0.1)
    assert len(c.without(0)) == 0
    with pytest.raises(InvalidArgumentError):
        c.without(1)


# derivatives


@given(st.integers(0, 2**32 - 1), st.sampled_from([(16,), (5, 6), (3, 4, 2)]))
@settings(max_examples=25, deadline=None)
def test_gradient_and_hessian_match_finite_differences(seed, dims):
    rng = np.random.default_rng(seed)
    y = noise(rng, dims)
    w = rng.uniform(0, TWO_PI, len(dims))
    G, grad, hess = objective_derivatives(y, w)
    assert G == pytest.approx(objective(y, w), rel=1e-12)
    h = 1e-5
    fd_grad = np.zeros(len(dims))
    fd_hess = np.zeros((len(dims), len(dims)))
    for i in range(len(dims)):
        e = np.zeros(len(dims))
        e[i] = h
        fd_grad[i] = (objective(y, w + e) - objective(y, w - e)) / (2 * h)
        g_plus = objective_derivatives(y, w + e)[1]
        g_minus = objective_derivatives(y, w - e)[1]
        fd_hess[i] = (g_plus - g_minus) / (2 * h)
    scale = np.abs(grad).max() + 1e-3 * G
    assert np.abs(grad - fd_grad).max() <= 1e-5 * scale
    hscale = np.abs(hess).max()
    assert np.abs(hess - fd_hess).max() <= 1e-5 * hscale


# coarse detection and single refinement


def test_coarse_detect_on_grid_exact():
    N = 32
    w = TWO_PI * 5 / N
    comp = coarse_detect(0.7j * steering_vector(N, w))
    assert abs(comp.freq[0] - w) < 1e-10 and abs(comp.amplitude - 0.7j) < 1e-10
    assert coarse_detect(np.zeros(N)).amplitude == 0


def test_coarse_detect_off_grid_within_half_cell():
    N, gamma = 64, 4
    rng = np.random.default_rng(0)
    for _ in range(10):
        w = rng.uniform(0, TWO_PI)
        comp = coarse_detect(steering_vector(N, w), gamma)
        assert wrap_dist(comp.freq[0], w) <= math.pi / (gamma * N) + 1e-12


def test_newton_refine_single():
    N = 64
    w0 = TWO_PI * 7 / N
    y = steering_vector(N, w0)
    out = newton_refine_single(y, SinusoidComponent(1.0, [w0]), RefineSettings(newton_steps_single=3))
    assert abs(out.freq[0] - w0) < 1e-10 and abs(out.amplitude - 1) < 1e-10
    # 40 dB off-grid tone from the nearest oversampled grid point
    rng = np.random.default_rng(1)
    w = 1.2345
    y = steering_vector(N, w) * math.sqrt(1e4 / N) + noise(rng, (N,))
    start = coarse_detect(y, 4)
    out = newton_refine_single(y, start, RefineSettings(newton_steps_single=5))
    dense = np.linspace(w - 0.01, w + 0.01, 10**6)
    vals = np.abs(np.exp(-1j * np.outer(dense[::100], np.arange(N))) @ y)
    w_best = dense[::100][np.argmax(vals)]
    fine = np.linspace(w_best - 4e-6, w_best + 4e-6, 2001)
    w_best = fine[np.argmax(np.abs(np.exp(-1j * np.outer(fine, np.arange(N))) @ y))]
    gap = 0.02 / 10**6
    assert wrap_dist(out.freq[0], w_best) < 10 * gap
    g_in = np.linalg.norm(objective_derivatives(y, start.freq)[1])
    g_out = np.linalg.norm(objective_derivatives(y, out.freq)[1])
    assert g_out < g_in
    assert objective(y, out.freq) >= objective(y, start.freq)


@given(st.integers(0, 2**32 - 1), st.integers(0, 4))
@settings(max_examples=30, deadline=None)
def test_single_refinement_never_decreases_objective(seed, steps):
    rng = np.random.default_rng(seed)
    y = noise(rng, (6, 5)) + 3 * synthesize((6, 5), [SinusoidComponent(1, rng.uniform(0, TWO_PI, 2))])
    start = SinusoidComponent(1.0, rng.uniform(0, TWO_PI, 2))
    out = newton_refine_single(y, start, RefineSettings(newton_steps_single=steps))
    assert objective(y, out.freq) >= objective(y, start.freq) * (1 - 1e-12)


# cyclic refinement and least squares


def test_cyclic_refine_recovers_perturbed_pair():
    N = 64
    w = np.array([1.0, 2.3])
    x = np.array([1.0, 0.6j])
    y = synthesize((N,), [SinusoidComponent(a, [f]) for a, f in zip(x, w)])
    start = CandidateSet((N,), (w + np.array([0.3, -0.3]) / N)[:, None], x)
    out = cyclic_refine(y, start, RefineSettings(cyclic_rounds=3, newton_steps_single=1))
    assert np.max(wrap_dist(out.freqs[:, 0], w)) < 1e-6
    assert len(cyclic_refine(y, CandidateSet((N,)))) == 0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_residual_energy_monotone_over_rounds(seed):
    rng = np.random.default_rng(seed)
    N = 48
    f = separated(rng, 3, N)
    y = synthesize((N,), [SinusoidComponent(1.0, [w]) for w in f]) + 0.3 * noise(rng, (N,))
    start = CandidateSet((N,), (f + rng.uniform(-0.5, 0.5, 3) * TWO_PI / N)[:, None], np.ones(3))
    dic = AtomDictionary((N,))
    state = PursuitState(dic, y[None, :], RefineSettings(cyclic_rounds=1, step_accept_rule=True))
    state.freqs, state.amps = start.freqs.copy(), start.amp_matrix.copy()
    state.least_squares()
    energies = [state.residual_energy()]
    for _ in range(4):
        state.cyclic()
        energies.append(state.residual_energy())
    assert all(b <= a * (1 + 1e-9) for a, b in zip(energies, energies[1:]))


def test_ls_reestimate():
    rng = np.random.default_rng(2)
    N = 40
    y = noise(rng, (N,))
    one = ls_reestimate(y, CandidateSet((N,), [[0.7]], [0]))
    assert one.amplitudes[0] == pytest.approx(np.vdot(steering_vector(N, 0.7), y) / N)
    f = np.array([0.5, 1.9, 4.0])
    x = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    clean = synthesize((N,), [SinusoidComponent(a, [w]) for a, w in zip(x, f)])
    fit = ls_reestimate(clean, CandidateSet((N,), f[:, None], np.zeros(3)))
    resid = clean - synthesize((N,), fit.components)
    assert np.sum(np.abs(resid) ** 2) < 1e-16 * np.sum(np.abs(clean) ** 2)
    # independent dense normal-equations solve
    A = np.stack([steering_vector(N, w) for w in f], axis=1)
    oracle = np.linalg.solve(A.conj().T @ A, A.conj().T @ y)
    np.testing.assert_allclose(ls_reestimate(y, CandidateSet((N,), f[:, None], np.zeros(3))).amplitudes, oracle, atol=1e-12)
    with pytest.raises(IllConditionedError):
        ls_reestimate(y, CandidateSet((N,), [[0.5], [0.5 + 1e-13]], [0, 0]))


def test_ls_permutation_invariance():
    rng = np.random.default_rng(3)
    N = 30
    y = noise(rng, (N,))
    f = rng.uniform(0, TWO_PI, 4)
    perm = rng.permutation(4)
    a = ls_reestimate(y, CandidateSet((N,), f[:, None], np.zeros(4)))
    b = ls_reestimate(y, CandidateSet((N,), f[perm, None], np.zeros(4)))
    np.testing.assert_allclose(a.amplitudes[perm], b.amplitudes, atol=1e-12)


def test_duplicate_frequencies_are_merged():
    dic = AtomDictionary((16,))
    state = PursuitState(dic, np.zeros((1, 16), complex), RefineSettings())
    state.freqs = np.array([[0.4], [0.4], [1.0]])
    state.amps = np.array([[1.0], [2.0], [1j]])
    state.merge_duplicates()
    assert len(state) == 2 and state.amps[0, 0] == 3.0


# full pursuits


def test_topk_contracts():
    rng = np.random.default_rng(4)
    N = 64
    assert len(nomp_topk(noise(rng, (N,)), 5)) == 5
    with pytest.raises(InvalidArgumentError):
        nomp_topk(noise(rng, (4,)), 5)
    f = np.array([1.0, 3.0])
    x = np.array([1.0, -0.8j])
    y = synthesize((N,), [SinusoidComponent(a, [w]) for a, w in zip(x, f)])
    out = nomp_topk(y, 4)
    assert np.max(wrap_dist(out.freqs[:2, 0], f)) < 1e-6
    assert np.max(np.abs(out.amplitudes[2:])) < 1e-3 * np.min(np.abs(x))


def test_topk_one_equals_one_baseline_round():
    rng = np.random.default_rng(5)
    y = noise(rng, (32,)) + 2 * steering_vector(32, 1.1)
    a = nomp_topk(y, 1)
    b = nomp_baseline(y, 1.0, 1e-2)
    assert len(b) >= 1
    assert a.freqs[0, 0] == pytest.approx(b.freqs[0, 0], abs=1e-12)
    assert a.amplitudes[0] == pytest.approx(b.amplitudes[0], abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.sampled_from([(64,), (12, 10)]))
@settings(max_examples=20, deadline=None)
def test_exact_recovery_on_grid(seed, k, dims):
    rng = np.random.default_rng(seed)
    N = np.array(dims)
    idx = set()
    while len(idx) < k:
        cand = tuple(rng.integers(0, n) for n in dims)
        ok = all(np.max(np.minimum(np.abs(np.subtract(cand, c)), N - np.abs(np.subtract(cand, c)))) >= 3 for c in idx)
        if ok:
            idx.add(cand)
    idx = sorted(idx)
    f = TWO_PI * np.array(idx, dtype=float) / N
    x = np.exp(1j * rng.uniform(0, TWO_PI, k)) * rng.uniform(0.5, 2, k)
    y = synthesize(dims, [SinusoidComponent(a, w) for a, w in zip(x, f)])
    # Gauss-Seidel refinement converges linearly at close spacing; the default
    # three rounds leave ~1e-7 rad at 3 bins; run the sweeps to convergence
    out = nomp_topk(y, k, RefineSettings(cyclic_rounds=10))
    for w in f:
        assert np.min(np.max(wrap_dist(out.freqs, w), axis=1)) < 1e-8


def test_baseline_pure_noise_and_single_tone():
    rng = np.random.default_rng(6)
    N = 64
    empty = sum(len(nomp_baseline(noise(rng, (N,)), 1.0, 0.1)) == 0 for _ in range(400))
    # nominal 90% empty; 3-sigma band over 400 trials
    assert abs(empty / 400 - 0.9) < 3 * math.sqrt(0.09 / 400) + 1e-9
    snr = 10 ** 3.0
    sq = []
    for _ in range(30):
        w = rng.uniform(0, TWO_PI)
        y = math.sqrt(snr / N) * steering_vector(N, w) * np.exp(1j * rng.uniform(0, TWO_PI)) + noise(rng, (N,))
        out = nomp_baseline(y, 1.0, 1e-2)
        assert len(out) == 1
        sq.append(wrap_dist(out.freqs[0, 0], w) ** 2)
    assert np.mean(sq) < 10 * crb_single_freq(N, snr)
