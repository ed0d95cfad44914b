import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nompcfar.cfar_core import CfarConfig, FalseAlarmSpec, alpha_from_pfa, cfar_delta, design_config
from nompcfar.nomp_cfar import (
    RECORD_FIELDS,
    CompressionOperator,
    NompCfarSettings,
    component_margins,
    detection_records,
    nomp_cfar,
    nomp_cfar_compressive,
    nomp_cfar_forward,
    nomp_cfar_mmv,
    pseudo_measurement,
    residual,
    write_records,
)
from nompcfar.errors import InvalidArgumentError
from nompcfar.nomp import CandidateSet, RefineSettings
from nompcfar.tensor_spectrum import TWO_PI, SinusoidComponent, nearest_cell, steering_vector, synthesize, wrap_dist

N = 128
CFG = design_config(1e-2, N, n_ref=30, n_guard=3)
SETTINGS = NompCfarSettings(k_max=8, cfar=CFG)


def noise(rng, dims):
    return (rng.standard_normal(dims) + 1j * rng.standard_normal(dims)) / math.sqrt(2)


def scene(rng, k, snr_db, n=N, sep=2.5):
    while True:
        f = np.sort(rng.uniform(0, TWO_PI, k))
        if k == 1 or np.diff(np.r_[f, f[0] + TWO_PI]).min() > sep * TWO_PI / n:
            break
    x = math.sqrt(10 ** (snr_db / 10) / n) * np.exp(1j * rng.uniform(0, TWO_PI, k))
    truth = CandidateSet((n,), f[:, None], x)
    return truth, synthesize((n,), truth.components)


# settings and operators


def test_settings_validation():
    assert NompCfarSettings(k_max=4).max_iters == 32
    with pytest.raises(InvalidArgumentError):
        NompCfarSettings(k_max=0)
    with pytest.raises(InvalidArgumentError):
        NompCfarSettings(k_max=8, max_iters=4)
    with pytest.raises(InvalidArgumentError):
        CompressionOperator(np.ones((5, 4)))
    with pytest.raises(InvalidArgumentError):
        CompressionOperator(np.full((2, 4), np.nan))
    op = CompressionOperator(np.ones((2, 4)))
    assert (op.m, op.n) == (2, 4)


# residuals


def test_residual_and_pseudo_measurement():
    rng = np.random.default_rng(0)
    truth, clean = scene(rng, 3, 20)
    y = clean + noise(rng, N)
    np.testing.assert_array_equal(residual(y, CandidateSet((N,))), y)
    assert np.linalg.norm(residual(clean, truth)) < 1e-12 * np.linalg.norm(clean)
    direct = y - sum(c.amplitude * steering_vector(N, c.freq[0]) for c in truth.components)
    np.testing.assert_allclose(residual(y, truth), direct, atol=1e-12)
    single = CandidateSet((N,), truth.freqs[:1], truth.amplitudes[:1])
    np.testing.assert_allclose(pseudo_measurement(y, single, 0), y, atol=1e-15)
    for k in range(3):
        expected = residual(y, truth) + truth.amplitudes[k] * steering_vector(N, truth.freqs[k, 0])
        np.testing.assert_allclose(pseudo_measurement(y, truth, k), expected, atol=1e-12)
        np.testing.assert_allclose(pseudo_measurement(y, truth, k), residual(y, truth.without(k)), atol=1e-12)
    with pytest.raises(InvalidArgumentError):
        pseudo_measurement(y, truth, 3)


# margins


def test_margins_strong_target_and_null_component():
    rng = np.random.default_rng(1)
    truth, clean = scene(rng, 1, 30)
    y = clean + noise(rng, N)
    assert component_margins(y, truth, SETTINGS)[0].delta > 0
    fired = 0
    for _ in range(200):
        z = noise(rng, N)
        null = CandidateSet((N,), [[rng.uniform(0, TWO_PI)]], [0.0])
        fired += component_margins(z, null, SETTINGS)[0].delta >= 0
    assert fired / 200 < 0.05


def test_margins_cancel_interference():
    rng = np.random.default_rng(2)
    literal = NompCfarSettings(k_max=8, cfar=CFG, refit_margins=False)
    for _ in range(10):
        truth, clean = scene(rng, 2, 25, sep=8)
        z = noise(rng, N)
        both = component_margins(clean + z, truth, literal)
        for k in range(2):
            alone = synthesize((N,), [truth.components[k]]) + z
            # same reference geometry: the other target's cell stays excluded
            other = nearest_cell(truth.freqs[1 - k], (N,))
            ref = cfar_delta(alone, CFG, excluded=[other])
            assert abs(both[k].delta - ref.delta) < 0.5


def test_refit_margins_match_literal_on_exact_fit():
    # with amplitudes already at the least-squares solution and no neighbours,
    # refitting the others changes little
    rng = np.random.default_rng(3)
    truth, clean = scene(rng, 3, 30, sep=12)
    y = clean + 0.01 * noise(rng, N)
    a = component_margins(y, truth, SETTINGS)
    b = component_margins(y, truth, NompCfarSettings(k_max=8, cfar=CFG, refit_margins=False))
    for ra, rb in zip(a, b):
        assert ra.peak == rb.peak and abs(ra.delta - rb.delta) < 0.1


# full detector


def test_noiseless_recovery():
    rng = np.random.default_rng(4)
    truth, clean = scene(rng, 3, 30, sep=4)
    rep = nomp_cfar(clean + 1e-6 * noise(rng, N), NompCfarSettings(k_max=6, cfar=CFG))
    assert len(rep) == 3
    for w in truth.freqs[:, 0]:
        assert np.min(wrap_dist(rep.components.freqs[:, 0], w)) < 1e-6
    assert rep.converged and not rep.saturated


def test_forward_noiseless_pair():
    rng = np.random.default_rng(5)
    truth, clean = scene(rng, 2, 30, sep=4)
    rep = nomp_cfar_forward(clean + 1e-6 * noise(rng, N), SETTINGS)
    assert len(rep) == 2


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_output_margin_contract_and_termination(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, 5))
    if k:
        truth, clean = scene(rng, k, float(rng.uniform(10, 25)))
    else:
        clean = np.zeros(N, complex)
    y = clean + noise(rng, N)
    rep = nomp_cfar(y, SETTINGS)
    assert rep.iterations <= SETTINGS.max_iters
    assert len(rep.margins) == len(rep)
    assert np.all(rep.margins >= 0)
    again = component_margins(y, rep.components, SETTINGS)
    assert all(r.delta >= -1e-9 for r in again)


def test_saturation_flag():
    rng = np.random.default_rng(6)
    truth, clean = scene(rng, 5, 30, sep=4)
    rep = nomp_cfar(clean + noise(rng, N), NompCfarSettings(k_max=2, cfar=CFG))
    assert len(rep) == 2 and rep.saturated


def test_iteration_cap_reports_non_convergence():
    rng = np.random.default_rng(7)
    truth, clean = scene(rng, 6, 25)
    rep = nomp_cfar(clean + noise(rng, N), NompCfarSettings(k_max=8, cfar=CFG, max_iters=8))
    assert rep.iterations <= 8


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 20.0), st.floats(0, TWO_PI))
@settings(max_examples=10, deadline=None)
def test_scale_equivariance(seed, mag, phase):
    rng = np.random.default_rng(seed)
    truth, clean = scene(rng, 3, 20)
    y = clean + noise(rng, N)
    c = mag * np.exp(1j * phase)
    a = nomp_cfar(y, SETTINGS)
    b = nomp_cfar(c * y, SETTINGS)
    assert [t[0] for t in a.trace] == [t[0] for t in b.trace]
    assert len(a) == len(b)
    np.testing.assert_allclose(b.components.freqs, a.components.freqs, atol=1e-8)
    np.testing.assert_allclose(b.components.amplitudes, c * a.components.amplitudes, atol=1e-8 * abs(c))
    np.testing.assert_allclose(b.margins, a.margins, atol=1e-7)


def test_mmv_single_snapshot_reduces_to_smv():
    rng = np.random.default_rng(8)
    for _ in range(5):
        truth, clean = scene(rng, 4, 15)
        y = clean + noise(rng, N)
        a = nomp_cfar(y, SETTINGS)
        b = nomp_cfar_mmv([y], SETTINGS)
        assert a.trace == b.trace
        np.testing.assert_array_equal(a.components.freqs, b.components.freqs)
        np.testing.assert_array_equal(a.components.amplitudes, b.components.amplitudes)
    with pytest.raises(InvalidArgumentError):
        nomp_cfar_mmv([], SETTINGS)
    with pytest.raises(InvalidArgumentError):
        nomp_cfar_mmv([np.zeros(4), np.zeros(5)], SETTINGS)


def test_mmv_shared_frequencies():
    rng = np.random.default_rng(9)
    S = 5
    f = np.array([0.8, 2.9])
    snaps = [synthesize((N,), [SinusoidComponent(x, [w]) for x, w in zip(np.exp(1j * rng.uniform(0, TWO_PI, 2)), f)])
             + 0.3 * noise(rng, N) for _ in range(S)]
    cfg = CfarConfig(n_ref=30, n_guard=3, alpha=alpha_from_pfa(FalseAlarmSpec(1e-2, N, 30, S)))
    rep = nomp_cfar_mmv(snaps, NompCfarSettings(k_max=6, cfar=cfg))
    assert len(rep) == 2 and rep.components.amplitudes.shape == (2, S)
    for w in f:
        assert np.min(wrap_dist(rep.components.freqs[:, 0], w)) < 1e-2


def test_compressive_identity_reduces_to_smv():
    rng = np.random.default_rng(10)
    for _ in range(5):
        truth, clean = scene(rng, 3, 20)
        y = clean + noise(rng, N)
        a = nomp_cfar(y, SETTINGS)
        b = nomp_cfar_compressive(y, np.eye(N), SETTINGS)
        assert [t[0] for t in a.trace] == [t[0] for t in b.trace]
        np.testing.assert_allclose(b.components.freqs, a.components.freqs, atol=1e-8)
        # normalised atoms carry sqrt(N) times the raw amplitude
        np.testing.assert_allclose(b.components.amplitudes, math.sqrt(N) * a.components.amplitudes, atol=1e-7)


def test_compressive_generalised_spectrum_oracle():
    from nompcfar.atoms import AtomDictionary

    rng = np.random.default_rng(11)
    M, n = 20, 32
    phi = (rng.choice([-1, 1], (M, n)) + 1j * rng.choice([-1, 1], (M, n))) / math.sqrt(2)
    y = noise(rng, M)
    dic = AtomDictionary((n,), phi)
    spec = dic.spectrum(y[None, :])[0]
    for k in range(n):
        c = phi @ steering_vector(n, TWO_PI * k / n)
        assert spec[k] == pytest.approx(np.vdot(c / np.linalg.norm(c), y), abs=1e-12)


def test_compressive_recovery():
    rng = np.random.default_rng(12)
    n, M = 128, 64
    phi = (rng.choice([-1, 1], (M, n)) + 1j * rng.choice([-1, 1], (M, n))) / math.sqrt(2)
    truth, clean = scene(rng, 3, 30, n=n, sep=4)
    y_c = phi @ clean + noise(rng, M)
    rep = nomp_cfar_compressive(y_c, phi, NompCfarSettings(k_max=8, cfar=design_config(1e-2, n, 30, 3)))
    assert len(rep) == 3
    with pytest.raises(InvalidArgumentError):
        nomp_cfar_compressive(y_c[:-1], phi, SETTINGS)


def test_two_dimensional_scene():
    rng = np.random.default_rng(13)
    dims = (16, 12)
    f = np.array([[1.0, 2.0], [4.0, 0.5]])
    y = synthesize(dims, [SinusoidComponent(3.0, w) for w in f]) + noise(rng, dims)
    cfg = design_config(1e-2, 192, n_ref=24, n_guard=1)
    rep = nomp_cfar(y, NompCfarSettings(k_max=6, cfar=cfg))
    assert len(rep) == 2
    for w in f:
        assert np.min(np.max(wrap_dist(rep.components.freqs, w), axis=1)) < 0.05


# records


def test_detection_records_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    truth, clean = scene(rng, 2, 30, sep=4)
    rep = nomp_cfar(clean + noise(rng, N), SETTINGS)
    recs = detection_records(rep, "scan7")
    assert [r["k"] for r in recs] == list(range(len(rep)))
    for r, floor, thr in zip(recs, rep.noise_floors, rep.thresholds):
        x = complex(r["amp_re"], r["amp_im"])
        assert r["amplitude_db"] == pytest.approx(10 * math.log10(N * abs(x) ** 2 / floor))
        assert r["threshold_db"] == pytest.approx(10 * math.log10(thr))
    write_records(recs, tmp_path / "d.csv")
    with open(tmp_path / "d.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == RECORD_FIELDS
    assert [float(v) for v in rows[0]["freqs"].split(";")] == recs[0]["freqs"]
    write_records(recs, tmp_path / "d.json")
    assert json.loads((tmp_path / "d.json").read_text())[1]["run_id"] == "scan7"
