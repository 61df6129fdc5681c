"""Iterative multichannel weighted prediction error (WPE) dereverberation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Spectrogram


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 2
    iterations: int = 3
    psd_floor: float = 1e-10
    loading: float = 1e-8

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 1:
            raise ValueError("taps, delay and iterations must all be >= 1")
        if self.psd_floor <= 0:
            raise ValueError("psd_floor must be positive")


def stacked_history(x: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """Delayed tap stack ``[x(t-delay); ...; x(t-delay-taps+1)]``, zero before ``t = 0``.

    :param x: ``(..., channels, frames)``
    :return: ``(..., taps * channels, frames)``, tap-major
    """
    *lead, channels, frames = x.shape
    out = np.zeros((*lead, taps, channels, frames), dtype=x.dtype)
    for k in range(taps):
        shift = delay + k
        if shift < frames:
            out[..., k, :, shift:] = x[..., :frames - shift]
    return out.reshape(*lead, taps * channels, frames)


def _solve_loaded(r: np.ndarray, p: np.ndarray, loading: float, what: str):
    dim = r.shape[-1]
    tr = np.trace(r, axis1=-2, axis2=-1).real
    eye = np.eye(dim)
    r = r + (loading * tr / dim)[:, None, None] * eye
    out = np.zeros(p.shape, dtype=np.result_type(r, p))
    live = tr > 0
    if not np.any(live):
        return out
    try:
        out[live] = np.linalg.solve(r[live], p[live])
    except np.linalg.LinAlgError:
        for f in np.flatnonzero(live):
            try:
                out[f] = np.linalg.solve(r[f], p[f])
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    f"{what}: singular matrix at frequency bin {f} despite loading"
                ) from exc
    if not np.all(np.isfinite(out)):
        bad = np.flatnonzero(~np.isfinite(out).all(axis=tuple(range(1, out.ndim))))
        raise np.linalg.LinAlgError(f"{what}: non-finite solution at bins {bad.tolist()}")
    return out


def wpe_filter(x: np.ndarray, cfg: WpeConfig = WpeConfig(), power: np.ndarray | None = None):
    """One WPE estimate for ``x`` of shape ``(bins, channels, frames)``.

    :param power: per ``(bin, frame)`` PSD weights; computed from ``x`` when omitted
    :return: ``(dereverberated, filter)`` with filter shape ``(bins, taps*channels, channels)``
    """
    if power is None:
        power = np.mean(np.abs(x) ** 2, axis=1)
    inv = 1.0 / np.maximum(power, cfg.psd_floor)
    hist = stacked_history(x, cfg.taps, cfg.delay)
    weighted = hist * inv[:, None, :]
    r = weighted @ hist.conj().transpose(0, 2, 1)
    p = weighted @ x.conj().transpose(0, 2, 1)
    g = _solve_loaded(r, p, cfg.loading, "WPE correlation matrix")
    return x - g.conj().transpose(0, 2, 1) @ hist, g


def wpe(s: Spectrogram, cfg: WpeConfig = WpeConfig()) -> Spectrogram:
    """Dereverberate every channel of ``s``; frame and channel counts are preserved.

    Each round re-estimates the per-frame target PSD as the channel mean of the
    current estimate's power and refilters the original observation.
    """
    if s.num_frames <= cfg.taps + cfg.delay:
        raise ValueError(f"need more than taps + delay = {cfg.taps + cfg.delay} frames, "
                         f"got {s.num_frames}")
    x = s.data.transpose(2, 0, 1)                         # (bin, channel, frame)
    est = x
    for _ in range(cfg.iterations):
        power = np.mean(np.abs(est) ** 2, axis=1)
        est, _ = wpe_filter(x, cfg, power)
    return s.with_data(est.transpose(1, 2, 0))
