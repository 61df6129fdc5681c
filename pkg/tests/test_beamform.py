import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dasrkit.audio import Spectrogram, StftConfig, Waveform
from dasrkit.beamform import (BeamformerWeights, SteeringVector, apply_beamformer, ban_gain,
                              cwmwf, mask_postfilter, masks_from_speech_estimates, mvdr_souden,
                              peak_normalize, scm_from_mask, select_reference_channel,
                              stack_taps, steering_from_beamformed)

CFG = StftConfig(16, 4, 16)  # 9 bins


def _cplx(r, *shape):
    return r.standard_normal(shape) + 1j * r.standard_normal(shape)


def _spec(x):
    return Spectrogram(x, CFG)


def _min_eig_ok(phi):
    tr = np.trace(phi, axis1=-2, axis2=-1).real
    return np.all(np.linalg.eigvalsh(phi).min(axis=-1) >= -1e-10 * tr)


def test_scm_constant_vector():
    v = np.array([1.0, 2j, -1.0])
    x = np.broadcast_to(v[:, None, None], (3, 20, 9)).copy()
    phi = scm_from_mask(_spec(x), np.ones((20, 9))).phi
    np.testing.assert_allclose(phi, np.broadcast_to(np.outer(v, v.conj()), (9, 3, 3)), atol=1e-12)


def test_scm_zero_mask_falls_back(rng):
    c = scm_from_mask(_spec(_cplx(rng, 2, 10, 9)), np.zeros((10, 9)))
    assert c.flagged.all()
    np.testing.assert_allclose(c.phi, 1e-10 * np.eye(2)[None].repeat(9, 0))


def test_scm_matches_brute_force(rng):
    x = _cplx(rng, 3, 25, 9)
    m = rng.random((25, 9))
    c = scm_from_mask(_spec(x), m)
    for f in range(9):
        acc = sum(m[t, f] * np.outer(x[:, t, f], x[:, t, f].conj()) for t in range(25))
        np.testing.assert_allclose(c.phi[f], acc / m[:, f].sum(), atol=1e-10)
    assert np.allclose(c.phi, c.phi.conj().swapaxes(-1, -2), atol=1e-10)
    assert _min_eig_ok(c.phi)


def test_scm_validates_mask(rng):
    with pytest.raises(ValueError):
        scm_from_mask(_spec(_cplx(rng, 2, 10, 9)), np.full((10, 9), 1.5))
    with pytest.raises(ValueError):
        scm_from_mask(_spec(_cplx(rng, 2, 10, 9)), np.ones((9, 10)))


def test_mvdr_hand_example():
    d = np.array([1.0, 1.0])
    w = mvdr_souden(np.outer(d, d)[None], np.eye(2)[None], 0).w[0]
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-12)
    assert np.vdot(w, d) == pytest.approx(1.0)


def test_mvdr_single_channel_is_unity():
    w = mvdr_souden(np.array([[[3.0]]]), np.array([[[7.0]]]))
    assert w.w[0, 0] == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), dim=st.integers(2, 6), ref=st.integers(0, 5),
       scale=st.floats(0.01, 100.0))
def test_mvdr_distortionless_and_scale_invariant(seed, dim, ref, scale):
    r = np.random.default_rng(seed)
    ref = ref % dim
    d = _cplx(r, 4, dim)
    phi_s = np.einsum("fi,fj->fij", d, d.conj())
    a = _cplx(r, 4, dim, dim)
    phi_n = a @ a.conj().swapaxes(-1, -2) + 0.1 * np.eye(dim)
    w = mvdr_souden(phi_s, phi_n, ref).w
    rtf = d / d[:, ref:ref + 1]
    np.testing.assert_allclose(np.sum(w.conj() * rtf, axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(mvdr_souden(scale * phi_s, phi_n, ref).w, w, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(mvdr_souden(phi_s, scale * phi_n, ref).w, w, rtol=1e-6, atol=1e-9)


def test_mvdr_no_speech_energy_is_flagged():
    w = mvdr_souden(np.zeros((1, 3, 3)), np.eye(3)[None], ref=1)
    assert w.flagged[0]
    np.testing.assert_array_equal(w.w[0], [0, 1, 0])


def test_mvdr_output_snr_beats_best_channel():
    for seed in range(10):
        r = np.random.default_rng(seed)
        dim, frames = 4, 2000
        d = _cplx(r, dim)
        s = _cplx(r, frames)
        n = _cplx(r, dim, frames) * 0.7
        phi_s = np.outer(d, d.conj())[None]
        phi_n = (n @ n.conj().T / frames)[None]
        w = mvdr_souden(phi_s, phi_n, 0).w[0]
        out_snr = np.sum(np.abs(np.vdot(w, d) * s) ** 2) / np.sum(np.abs(w.conj() @ n) ** 2)
        best = max(np.sum(np.abs(d[i] * s) ** 2) / np.sum(np.abs(n[i]) ** 2) for i in range(dim))
        assert out_snr >= best


def test_reference_selection():
    phi_s = np.eye(2)[None].repeat(3, 0)
    phi_n = np.eye(2)[None].repeat(3, 0)
    assert select_reference_channel(phi_s, phi_n) == 0
    assert select_reference_channel(np.ones((1, 1, 1)), np.ones((1, 1, 1))) == 0
    # channel 0 is a noisy copy: speech only reaches channel 1
    phi_s = np.diag([0.0, 1.0])[None].astype(complex)
    phi_n = np.diag([1.0, 1.0])[None].astype(complex)
    assert select_reference_channel(phi_s + 1e-6 * np.eye(2), phi_n) == 1


def test_apply_beamformer_oracles(rng):
    x = _cplx(rng, 3, 12, 9)
    sel = BeamformerWeights(np.tile(np.eye(3)[2], (9, 1)).astype(complex))
    np.testing.assert_array_equal(apply_beamformer(sel, _spec(x)).data[0], x[2])
    w = BeamformerWeights(_cplx(rng, 9, 3))
    y = apply_beamformer(w, _spec(x)).data[0]
    for t in range(12):
        for f in range(9):
            assert y[t, f] == pytest.approx(np.vdot(w.w[f], x[:, t, f]), abs=1e-12)
    x2 = _cplx(rng, 3, 12, 9)
    np.testing.assert_allclose(apply_beamformer(w, _spec(2 * x - 1j * x2)).data,
                               2 * y[None] - 1j * apply_beamformer(w, _spec(x2)).data, atol=1e-12)
    with pytest.raises(ValueError):
        apply_beamformer(BeamformerWeights(np.ones((9, 2))), _spec(x))


def test_stacked_application_uses_past_frames(rng):
    x = _cplx(rng, 2, 10, 9)
    st_ = stack_taps(x, 3)
    np.testing.assert_array_equal(st_[2:4, 1:], x[:, :-1])
    np.testing.assert_array_equal(st_[4:6, :2], 0)
    w = BeamformerWeights(_cplx(rng, 9, 6), taps=3)
    y = apply_beamformer(w, _spec(x)).data[0]
    ref = np.einsum("fi,itf->tf", w.w.conj(), st_)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_ban_examples():
    g, flag = ban_gain(np.ones((1, 1), complex), np.full((1, 1, 1), 4.0))
    assert g[0] == pytest.approx(1.0) and not flag[0]
    dim = 4
    w = np.ones((1, dim), complex) / 2.0
    g, _ = ban_gain(w, np.eye(dim)[None])
    assert g[0] == pytest.approx(1 / np.sqrt(dim))
    g, flag = ban_gain(np.zeros((1, 2), complex), np.eye(2)[None])
    assert flag[0] and g[0] == 1.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), c=st.floats(1e-3, 1e3))
def test_ban_homogeneous_of_degree_zero(seed, c):
    r = np.random.default_rng(seed)
    a = _cplx(r, 3, 4, 4)
    phi = a @ a.conj().swapaxes(-1, -2)
    w = _cplx(r, 3, 4)
    np.testing.assert_allclose(ban_gain(w, c * phi)[0], ban_gain(w, phi)[0], rtol=1e-9)


def test_steering_rank_one_identity(rng):
    d = _cplx(rng, 9, 3)
    s = _cplx(rng, 40, 9)
    x = np.einsum("fi,tf->itf", d, s)
    sv = steering_from_beamformed(_spec(x), _spec(s[None]), ref=1)
    expect = d / np.linalg.norm(d, axis=1, keepdims=True)
    expect *= (expect[:, 1].conj() / np.abs(expect[:, 1]))[:, None]
    np.testing.assert_allclose(sv.d, expect, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(sv.d, axis=1), 1.0)
    assert np.all(sv.d[:, 1].imag == 0) and np.all(sv.d[:, 1].real >= 0)


def test_steering_robust_to_weak_noise(rng):
    d = _cplx(rng, 9, 4)
    s = _cplx(rng, 2000, 9)
    x = np.einsum("fi,tf->itf", d, s)
    power = np.mean(np.abs(x) ** 2)
    x_noisy = x + np.sqrt(power * 0.01 / 2) * _cplx(rng, *x.shape)
    sv = steering_from_beamformed(_spec(x_noisy), _spec(s[None]))
    cos = np.abs(np.sum(sv.d.conj() * d, axis=1)) / np.linalg.norm(d, axis=1)
    assert cos.min() >= 0.99


def test_steering_zero_bin_flagged():
    x = np.zeros((2, 5, 9), complex)
    sv = steering_from_beamformed(_spec(x), _spec(np.zeros((1, 5, 9), complex)))
    assert sv.flagged.all()
    np.testing.assert_array_equal(sv.d[:, 0], 1.0)


def test_cwmwf_closed_form_and_mvdr_limit(rng):
    x = _spec(_cplx(rng, 2, 10, 9))
    d = SteeringVector(np.tile([1.0 + 0j, 0.0], (9, 1)))
    w = cwmwf(x, d, np.eye(2)[None].repeat(9, 0), 1, np.ones(9))
    np.testing.assert_allclose(w.w, np.tile([0.5, 0.0], (9, 1)), atol=1e-12)
    dv = _cplx(rng, 9, 3)
    dv /= np.linalg.norm(dv, axis=1, keepdims=True)
    a = _cplx(rng, 9, 3, 3)
    phi = a @ a.conj().swapaxes(-1, -2) + np.eye(3)
    w = cwmwf(_spec(_cplx(rng, 3, 10, 9)), SteeringVector(dv), phi, 1, np.full(9, 1e9))
    u = np.linalg.solve(phi, dv[..., None])[..., 0]
    mvdr = u / np.sum(dv.conj() * u, axis=1, keepdims=True)
    np.testing.assert_allclose(w.w, mvdr, rtol=1e-6, atol=1e-9)


def test_cwmwf_convolutional_shape(rng):
    x = _spec(_cplx(rng, 2, 30, 9))
    stacked = stack_taps(x.data, 3)
    phi = scm_from_mask(_spec(stacked[:, :, :]), np.ones((30, 9))).phi
    d = SteeringVector(np.tile([1.0 + 0j, 0.0], (9, 1)))
    w = cwmwf(x, d, phi, 3, np.ones(9))
    assert w.w.shape == (9, 6) and w.taps == 3
    assert apply_beamformer(w, x).data.shape == (1, 30, 9)
    with pytest.raises(ValueError):
        cwmwf(x, d, phi, 2, np.ones(9))


def test_postfilter_and_peak(rng):
    y = _spec(_cplx(rng, 1, 10, 9))
    np.testing.assert_array_equal(mask_postfilter(y, np.ones((10, 9))).data, y.data)
    assert not np.any(mask_postfilter(y, np.zeros((10, 9))).data)
    m = rng.random((10, 9))
    assert np.all(np.abs(mask_postfilter(y, m).data) <= np.abs(y.data))
    w = Waveform(np.array([0.2, -0.8]), 16000)
    assert peak_normalize(w) is w
    out = peak_normalize(Waveform(np.array([0.5, -2.0]), 16000))
    np.testing.assert_array_equal(out.samples, [0.25, -1.0])
    assert not np.any(peak_normalize(Waveform(np.zeros(3), 16000)).samples)


def test_masks_from_estimates(rng):
    x = _spec(_cplx(rng, 2, 10, 9))
    s, n = masks_from_speech_estimates(x, x)
    np.testing.assert_allclose(s, 1.0, atol=1e-9)
    s, n = masks_from_speech_estimates(x, x.with_data(0 * x.data))
    np.testing.assert_array_equal(s, 0.0)
    s, n = masks_from_speech_estimates(x, x.with_data(x.data / 2))
    np.testing.assert_allclose(s, 0.5, atol=1e-9)
    est = x.with_data(_cplx(rng, 2, 10, 9))
    s, n = masks_from_speech_estimates(x, est)
    np.testing.assert_allclose(s + n, 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        masks_from_speech_estimates(x, x.with_data(x.data[:1]))
