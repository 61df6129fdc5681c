"""Envelope-variance microphone ranking and top-k channel selection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio import MultichannelWaveform, StftConfig, stft


@dataclass(frozen=True)
class EvConfig:
    num_subbands: int = 40
    frame: int = 1024
    hop: int = 256
    keep_fraction: float = 0.8
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.num_subbands < 1:
            raise ValueError("num_subbands must be >= 1")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(num_bands: int, fft_size: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filters, shape ``(num_bands, fft_size // 2 + 1)``.

    Each filter is guaranteed at least one non-zero bin so narrow low bands
    never vanish at coarse FFT resolution.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    bins = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_bands + 2))
    fb = np.zeros((num_bands, bins.size))
    for b in range(num_bands):
        lo, mid, hi = edges[b:b + 3]
        up = (bins - lo) / max(mid - lo, 1e-12)
        down = (hi - bins) / max(hi - mid, 1e-12)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
        if not fb[b].any():
            fb[b, np.argmin(np.abs(bins - mid))] = 1.0
    return fb


def envelope_variance_scores(w: MultichannelWaveform, cfg: EvConfig = EvConfig()) -> np.ndarray:
    """Per-channel envelope-variance score; higher means less reverberant smearing.

    For every channel and mel subband the frame energy envelope is divided by
    its temporal mean, log-compressed and its variance taken.  Variances are
    normalised by the best channel in each subband and summed.
    """
    spec = stft(w, StftConfig(cfg.frame, cfg.hop, cfg.frame))
    power = np.abs(spec.data) ** 2
    fb = mel_filterbank(cfg.num_subbands, cfg.frame, w.sample_rate)
    env = power @ fb.T                                        # (channel, frame, band)
    mean = env.mean(axis=1, keepdims=True)
    silent = mean[:, 0, :] <= 0
    norm = np.divide(env, mean, out=np.zeros_like(env), where=mean > 0)
    var = np.log(np.maximum(norm, cfg.log_floor)).var(axis=1)
    var[silent] = 0.0
    best = var.max(axis=0)
    ratio = np.divide(var, best, out=np.zeros_like(var), where=best > 0)
    return ratio.sum(axis=1)


def select_channels(scores, keep_fraction: float = 0.8) -> list[int]:
    """Indices of the top ``max(1, floor(keep_fraction * I))`` channels, in original order.

    Ties go to the lower channel index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise ValueError("need at least one score")
    k = max(1, math.floor(keep_fraction * scores.size + 1e-9))
    order = sorted(range(scores.size), key=lambda i: (-scores[i], i))
    return sorted(order[:k])
