"""Mask-based spatial covariance estimation, beamformers and their post-processing.

Per-bin quantities use a leading frequency axis: covariances are ``(bin, D, D)``
and weights ``(bin, D)`` where ``D`` is the channel count, or channels times
taps for convolutional filters.  Degenerate bins fall back to a safe value and
are reported in the ``flagged`` boolean array instead of raising.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Spectrogram, Waveform

LOADING = 1e-8


@dataclass(frozen=True)
class SpatialCovariance:
    phi: np.ndarray
    mass: np.ndarray
    flagged: np.ndarray

    @property
    def dim(self) -> int:
        return self.phi.shape[-1]


@dataclass(frozen=True)
class BeamformerWeights:
    w: np.ndarray
    ref_channel: int = 0
    taps: int = 1
    flagged: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.w)):
            raise ValueError("beamformer weights must be finite")
        if self.w.shape[-1] % self.taps:
            raise ValueError(f"weight dimension {self.w.shape[-1]} is not a multiple of "
                             f"{self.taps} taps")


@dataclass(frozen=True)
class SteeringVector:
    d: np.ndarray
    ref_channel: int = 0
    flagged: np.ndarray | None = None


def hermitize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.conj().swapaxes(-1, -2))


def diagonal_load(phi: np.ndarray, eps: float = LOADING) -> np.ndarray:
    dim = phi.shape[-1]
    tr = np.trace(phi, axis1=-2, axis2=-1).real
    return phi + (eps * tr / dim)[..., None, None] * np.eye(dim)


def stack_taps(x: np.ndarray, taps: int) -> np.ndarray:
    """``[x(t); x(t-1); ...; x(t-taps+1)]`` along the channel axis of ``(channel, frame, bin)`` data."""
    if taps < 1:
        raise ValueError("taps must be >= 1")
    channels, frames, bins = x.shape
    out = np.zeros((taps, channels, frames, bins), dtype=x.dtype)
    for k in range(taps):
        out[k, :, k:] = x[:, :frames - k]
    return out.reshape(taps * channels, frames, bins)


def scm_from_mask(s, mask, eps: float = 1e-10) -> SpatialCovariance:
    """Mask-weighted spatial covariance per bin.

    :param s: Spectrogram or ``(channel, frame, bin)`` array
    :param mask: ``(frame, bin)`` weights in [0, 1]
    """
    x = s.data if isinstance(s, Spectrogram) else np.asarray(s)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match frames x bins {x.shape[1:]}")
    if mask.min(initial=0.0) < 0 or mask.max(initial=0.0) > 1 + 1e-9:
        raise ValueError("mask values must lie in [0, 1]")
    xf = x.transpose(2, 0, 1)                                  # (bin, channel, frame)
    mass = mask.sum(axis=0)
    phi = (xf * mask.T[:, None, :]) @ xf.conj().transpose(0, 2, 1)
    phi = hermitize(phi / np.maximum(mass, 1e-10)[:, None, None])
    flagged = mass <= 0
    if np.any(flagged):
        phi[flagged] = eps * np.eye(x.shape[0])
    return SpatialCovariance(phi, mass, flagged)


def mvdr_souden(phi_s, phi_n, ref: int = 0, eps: float = LOADING) -> BeamformerWeights:
    """MVDR weights ``phi_n^-1 phi_s e_ref / tr(phi_n^-1 phi_s)`` (relative transfer function form)."""
    ps = phi_s.phi if isinstance(phi_s, SpatialCovariance) else np.asarray(phi_s)
    pn = phi_n.phi if isinstance(phi_n, SpatialCovariance) else np.asarray(phi_n)
    num = np.linalg.solve(diagonal_load(pn, eps), ps)
    tr = np.trace(num, axis1=-2, axis2=-1)
    flagged = np.abs(tr) < 1e-12
    safe = np.where(flagged, 1.0, tr)
    w = num[..., :, ref] / safe[..., None]
    if np.any(flagged):
        w[flagged] = np.eye(ps.shape[-1])[ref]
    return BeamformerWeights(w, ref, 1, flagged)


def _quadratic(w, phi):
    return np.real(np.einsum("fi,fij,fj->f", w.conj(), phi, w))


def select_reference_channel(phi_s, phi_n, eps: float = LOADING, rtol: float = 1e-9) -> int:
    """Reference channel maximising the summed per-bin output SNR of its MVDR filter.

    Scores within ``rtol`` of the best count as ties and go to the lowest index.
    """
    ps = phi_s.phi if isinstance(phi_s, SpatialCovariance) else np.asarray(phi_s)
    pn = phi_n.phi if isinstance(phi_n, SpatialCovariance) else np.asarray(phi_n)
    channels = ps.shape[-1]
    if channels == 1:
        return 0
    snr = np.empty(channels)
    for i in range(channels):
        w = mvdr_souden(ps, pn, i, eps).w
        den = _quadratic(w, pn)
        snr[i] = np.sum(_quadratic(w, ps) / np.maximum(den, 1e-30))
    best = snr.max()
    return int(np.flatnonzero(snr >= best - rtol * abs(best))[0])


def apply_beamformer(wts: BeamformerWeights, s: Spectrogram) -> Spectrogram:
    """``y(t, f) = w(f)^H x(t, f)``, tap-stacking the input when the filter is convolutional."""
    x = s.data
    if wts.taps > 1:
        x = stack_taps(x, wts.taps)
    if wts.w.shape != (x.shape[2], x.shape[0]):
        raise ValueError(f"weights of shape {wts.w.shape} do not fit input "
                         f"({x.shape[0]} channels x taps, {x.shape[2]} bins)")
    y = np.einsum("fi,itf->tf", wts.w.conj(), x)
    return s.with_data(y[None])


def ban_gain(wts, phi_n):
    """Blind analytic normalisation gain per bin.

    ``g = sqrt(w^H Phi Phi w / D) / (w^H Phi w)`` with ``D`` the filter
    dimension, so convolutional weights with a tap-stacked noise covariance
    give the convolutional variant.  Bins with a vanishing denominator get
    gain 1 and are flagged.

    :return: ``(gain, flagged)``
    """
    w = wts.w if isinstance(wts, BeamformerWeights) else np.asarray(wts)
    pn = phi_n.phi if isinstance(phi_n, SpatialCovariance) else np.asarray(phi_n)
    if w.ndim == 1:
        w = w[None]
        pn = pn[None] if pn.ndim == 2 else pn
    if pn.shape[-1] != w.shape[-1]:
        raise ValueError(f"weight dimension {w.shape[-1]} does not match covariance "
                         f"{pn.shape[-1]}")
    dim = w.shape[-1]
    pw = np.einsum("fij,fj->fi", pn, w)
    num = np.sqrt(np.maximum(np.real(np.sum(pw.conj() * pw, axis=-1)), 0.0) / dim)
    den = np.real(np.sum(w.conj() * pw, axis=-1))
    flagged = np.abs(den) < 1e-12
    gain = np.where(flagged, 1.0, num / np.where(flagged, 1.0, den))
    return gain, flagged


def steering_from_beamformed(s_wpe: Spectrogram, y: Spectrogram, ref: int = 0,
                             frames=None) -> SteeringVector:
    """Principal eigenvector of the rank-one SCM ``r r^H`` with ``r = sum_t x conj(y)``.

    The eigenvector of a rank-one matrix is ``r / ||r||``; it is phase-rotated
    so the reference entry is real and non-negative.
    """
    x = s_wpe.data
    yy = y.data[0]
    if frames is not None:
        x = x[:, frames]
        yy = yy[frames]
    r = np.einsum("itf,tf->fi", x, yy.conj())
    norm = np.linalg.norm(r, axis=-1)
    flagged = norm < 1e-12
    d = r / np.where(flagged, 1.0, norm)[:, None]
    phase = d[:, ref]
    rot = np.where(np.abs(phase) > 0, phase.conj() / np.maximum(np.abs(phase), 1e-300), 1.0)
    d = d * rot[:, None]
    d[:, ref] = np.abs(d[:, ref])
    if np.any(flagged):
        d[flagged] = np.eye(x.shape[0])[ref]
    return SteeringVector(d, ref, flagged)


def cwmwf(s_wpe: Spectrogram, d: SteeringVector, phi_n_conv, taps: int, phi_s_psd,
          eps: float = LOADING) -> BeamformerWeights:
    """Rank-one convolutional multichannel Wiener filter.

    ``w = phi_s Phi^-1 d_bar / (1 + phi_s d_bar^H Phi^-1 d_bar)`` with
    ``d_bar = [d; 0; ...; 0]`` and ``Phi`` the tap-stacked noise covariance.
    With one tap and ``phi_s -> inf`` this is the MVDR filter.
    """
    pn = phi_n_conv.phi if isinstance(phi_n_conv, SpatialCovariance) else np.asarray(phi_n_conv)
    channels = s_wpe.num_channels
    dim = channels * taps
    if pn.shape[-1] != dim:
        raise ValueError(f"noise covariance of dimension {pn.shape[-1]} does not match "
                         f"{channels} channels x {taps} taps")
    dbar = np.zeros((pn.shape[0], dim), dtype=np.complex128)
    dbar[:, :channels] = d.d
    loaded = diagonal_load(pn, eps)
    flagged = np.zeros(pn.shape[0], dtype=bool)
    try:
        u = np.linalg.solve(loaded, dbar[..., None])[..., 0]
    except np.linalg.LinAlgError:
        u = np.empty_like(dbar)
        for f in range(pn.shape[0]):
            try:
                u[f] = np.linalg.solve(loaded[f], dbar[f])
            except np.linalg.LinAlgError:
                flagged[f] = True
                u[f] = np.linalg.lstsq(diagonal_load(pn[f][None], 1e-3)[0] + 1e-12 * np.eye(dim),
                                       dbar[f], rcond=None)[0]
    phi_s_psd = np.asarray(phi_s_psd, dtype=np.float64)
    gain = np.real(np.sum(dbar.conj() * u, axis=-1))
    w = (phi_s_psd / (1.0 + phi_s_psd * gain))[:, None] * u
    bad = ~np.all(np.isfinite(w), axis=-1)
    if np.any(bad):
        flagged |= bad
        w[bad] = 0.0
        w[bad, d.ref_channel] = 1.0
    return BeamformerWeights(w, d.ref_channel, taps, flagged)


def mask_postfilter(y: Spectrogram, m) -> Spectrogram:
    m = np.asarray(m)
    if m.shape != y.data.shape[1:]:
        raise ValueError(f"mask shape {m.shape} does not match spectrogram {y.data.shape[1:]}")
    return y.with_data(y.data * m[None])


def peak_normalize(w: Waveform) -> Waveform:
    """Scale down to unit peak when any sample exceeds magnitude one."""
    peak = np.max(np.abs(w.samples), initial=0.0)
    if peak > 1.0:
        return Waveform(w.samples / peak, w.sample_rate)
    return w


def masks_from_speech_estimates(mix: Spectrogram, est: Spectrogram):
    """Speech and noise ratio masks from per-channel speech estimates.

    Noise is the complex residual ``X - S``; per channel the speech mask is
    ``|S|^2 / (|S|^2 + |N|^2 + 1e-10)`` and the channel means are returned.
    The noise mask is the complement, so the two sum to one exactly.

    :return: ``(speech_mask, noise_mask)``, each ``(frame, bin)``
    """
    if mix.data.shape != est.data.shape:
        raise ValueError(f"estimate shape {est.data.shape} does not match mixture "
                         f"{mix.data.shape}")
    ps = np.abs(est.data) ** 2
    pn = np.abs(mix.data - est.data) ** 2
    speech = (ps / (ps + pn + 1e-10)).mean(axis=0)
    return speech, 1.0 - speech
