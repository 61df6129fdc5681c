"""Room simulation and multispeaker augmentation.

Shoebox room impulse responses come from the image-source method with
windowed-sinc fractional delays.  Mixing inserts a looped, silence-padded
background talker at a random SNR; optional G.711 companding (or an external
codec command) degrades the result.
"""
from __future__ import annotations

import logging
import shlex
import subprocess
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal

from .audio import Waveform, decode_wav, encode_wav, resample, resample_ratio

log = logging.getLogger(__name__)

WIDTH_RANGE = (1.5, 5.5)
LENGTH_RANGE = (2.5, 16.5)
HEIGHT_RANGE = (2.0, 9.5)
BETA_RANGE = (0.45, 0.95)
WALL_MARGIN = 0.1
SINC_TAPS = 81
SPEED_FACTORS = (0.9, 1.0, 1.1)
CODECS = ("g711_ulaw", "g711_alaw", "external")


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room; x spans the width, y the length and z the height.

    ``beta`` holds reflection coefficients of the walls at x=0, x=width,
    y=0, y=length, z=0 and z=height.
    """

    width: float
    length: float
    height: float
    beta: tuple
    source_pos: tuple
    mic_pos: tuple
    c: float = 343.0

    def __post_init__(self):
        beta = tuple(float(b) for b in np.broadcast_to(np.asarray(self.beta, float), (6,)))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "source_pos", tuple(float(v) for v in self.source_pos))
        object.__setattr__(self, "mic_pos", tuple(float(v) for v in self.mic_pos))
        if min(self.dims) <= 2 * WALL_MARGIN:
            raise ValueError(f"room dimensions {self.dims} too small")
        if not all(0.0 <= b < 1.0 for b in beta):
            raise ValueError(f"reflection coefficients must lie in [0, 1), got {beta}")
        for name in ("source_pos", "mic_pos"):
            pos = getattr(self, name)
            if len(pos) != 3:
                raise ValueError(f"{name} needs three coordinates")
            for v, dim in zip(pos, self.dims):
                if not WALL_MARGIN - 1e-12 <= v <= dim - WALL_MARGIN + 1e-12:
                    raise ValueError(f"{name} {pos} is closer than {WALL_MARGIN} m to a wall "
                                     f"of room {self.dims}")
        if self.c <= 0:
            raise ValueError("speed of sound must be positive")

    @property
    def dims(self) -> tuple:
        return (self.width, self.length, self.height)

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.source_pos, self.mic_pos)))


@dataclass(frozen=True)
class MixConfig:
    snr_db_range: tuple = (5.0, 12.0)
    pad_secs: float = 4.0
    codec_prob: float = 1.0 / 7.0
    seed: int | None = None

    def __post_init__(self):
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ValueError(f"snr range low {lo} exceeds high {hi}")
        if self.pad_secs < 0:
            raise ValueError("pad_secs must be >= 0")
        if not 0.0 <= self.codec_prob <= 1.0:
            raise ValueError("codec_prob must lie in [0, 1]")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_room(seed=None) -> RoomSpec:
    """Random room with uniform dimensions, wall reflections and placements."""
    rng = _rng(seed)
    width = rng.uniform(*WIDTH_RANGE)
    length = rng.uniform(*LENGTH_RANGE)
    height = rng.uniform(*HEIGHT_RANGE)
    beta = tuple(rng.uniform(*BETA_RANGE, size=6))
    dims = np.array([width, length, height])
    source = rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)
    mic = rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)
    return RoomSpec(width, length, height, beta, tuple(source), tuple(mic))


def _image_axis(n_max: int, src: float, mic: float, size: float, b_lo: float, b_hi: float):
    """Per-axis image offsets and reflection gains for orders ``-n_max..n_max`` and both parities."""
    n = np.arange(-n_max, n_max + 1)
    offsets, gains = [], []
    for q in (0, 1):
        offsets.append((1 - 2 * q) * src + 2 * n * size - mic)
        gains.append(b_lo ** np.abs(n - q) * b_hi ** np.abs(n))
    return np.concatenate(offsets), np.concatenate(gains)


def simulate_rir(room: RoomSpec, fs: int = 16000, rir_len: int = 8000, seed=None) -> Waveform:
    """Image-method impulse response from ``room.source_pos`` to ``room.mic_pos``.

    Every image whose kernel reaches ``[0, rir_len)`` is included, so a
    shorter response is an exact prefix of a longer one.  Each image adds
    ``prod(beta) / (4 pi dist)`` through an 81-tap Hann-windowed sinc centred
    on its fractional delay.  ``seed`` is accepted for interface symmetry;
    the standard image method is deterministic.
    """
    half = SINC_TAPS // 2
    direct = room.distance / room.c * fs
    if rir_len <= direct:
        raise ValueError(f"rir_len {rir_len} does not reach the direct path at {direct:.1f} samples")
    reach = (rir_len + half) * room.c / fs
    axes = [
        _image_axis(int(np.ceil(reach / (2 * size))) + 1, s, m, size, room.beta[2 * a],
                    room.beta[2 * a + 1])
        for a, (s, m, size) in enumerate(zip(room.source_pos, room.mic_pos, room.dims))
    ]
    (dx, gx), (dy, gy), (dz, gz) = axes
    keep_y = np.abs(dy) < reach
    keep_z = np.abs(dz) < reach
    dy, gy, dz, gz = dy[keep_y], gy[keep_y], dz[keep_z], gz[keep_z]
    taps = np.arange(-half, half + 1)
    window_len = SINC_TAPS + 1
    out = np.zeros(rir_len + 2 * half + 1)
    for x_off, x_gain in zip(dx, gx):
        if abs(x_off) >= reach or x_gain == 0.0:
            continue
        dist = np.sqrt(x_off ** 2 + dy[:, None] ** 2 + dz[None, :] ** 2)
        gain = x_gain * gy[:, None] * gz[None, :]
        sel = (dist < reach) & (gain != 0.0)
        if not np.any(sel):
            continue
        dist = dist[sel]
        amp = gain[sel] / (4 * np.pi * dist)
        delay = dist / room.c * fs
        centre = np.round(delay).astype(np.int64)
        frac = taps[None, :] + centre[:, None] - delay[:, None]
        kernel = (0.5 * (1 + np.cos(2 * np.pi * frac / window_len))) * np.sinc(frac)
        idx = centre[:, None] + taps[None, :] + half
        out += np.bincount(idx.ravel(), weights=(amp[:, None] * kernel).ravel(),
                           minlength=out.size)[:out.size]
    return Waveform(out[half:half + rir_len], fs)


def rir_energy_envelope(rir: Waveform, block_secs: float = 0.01) -> np.ndarray:
    """Block energies in dB, blocks starting at the direct-path peak."""
    h = rir.samples
    start = int(np.argmax(np.abs(h)))
    block = int(round(block_secs * rir.sample_rate))
    n = (len(h) - start) // block
    e = np.sum(h[start:start + n * block].reshape(n, block) ** 2, axis=1)
    return 10 * np.log10(np.maximum(e, 1e-30))


def _convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    return signal.fftconvolve(x, h)[: len(x)]


def _loop_from(x: np.ndarray, offset: int, length: int) -> np.ndarray:
    return np.take(x, np.arange(offset, offset + length), mode="wrap")


def _audible_offsets(padded: np.ndarray, length: int) -> np.ndarray:
    """Read offsets whose wrapped window of ``length`` samples holds any non-zero sample."""
    size = len(padded)
    nz = (padded != 0).astype(np.int64)
    if length >= size:
        return np.arange(size) if nz.any() else np.zeros(0, dtype=np.int64)
    cs = np.concatenate([[0], np.cumsum(np.concatenate([nz, nz[:length]]))])
    return np.flatnonzero(cs[length:length + size] - cs[:size] > 0)


def mix_background_speaker(primary: Waveform, background: Waveform, rir_p: Waveform,
                           rir_b: Waveform, cfg: MixConfig = MixConfig(), rng=None,
                           offset: int | None = None, snr_db: float | None = None,
                           return_components: bool = False):
    """Insert a reverberant background talker under ``primary``.

    The background is padded with ``cfg.pad_secs`` of silence on both sides,
    read from a random offset (wrapping around when it runs out), and both
    signals are reverberated.  Random offsets are drawn among those whose
    window reaches the talker, so the draw never lands in padding alone.  The background is then scaled so the mean-power
    ratio over the primary's duration equals an SNR drawn uniformly from
    ``cfg.snr_db_range``.

    :param rng: generator or seed; defaults to ``cfg.seed``
    :param offset: fixed read offset into the padded background
    :param snr_db: fixed SNR instead of a random draw
    :return: the mixture, or ``(mixture, primary_reverb, background_scaled, snr_db)``
    """
    if len({primary.sample_rate, background.sample_rate, rir_p.sample_rate,
            rir_b.sample_rate}) != 1:
        raise ValueError("primary, background and RIRs must share one sample rate")
    rng = _rng(cfg.seed if rng is None else rng)
    n = len(primary)
    pad = int(round(cfg.pad_secs * primary.sample_rate))
    padded = np.pad(background.samples, (pad, pad))
    if offset is None:
        valid = _audible_offsets(padded, n)
        if valid.size == 0:
            raise ValueError("cannot set an SNR against a silent primary or background")
        offset = int(valid[rng.integers(valid.size)])
    if snr_db is None:
        snr_db = float(rng.uniform(*cfg.snr_db_range))
    bg = _loop_from(padded, offset, n)
    p_rev = _convolve(primary.samples, rir_p.samples)
    b_rev = _convolve(bg, rir_b.samples)
    p_pow = np.mean(p_rev ** 2)
    b_pow = np.mean(b_rev ** 2)
    if p_pow <= 0 or b_pow <= 0:
        raise ValueError("cannot set an SNR against a silent primary or background")
    b_rev = b_rev * np.sqrt(p_pow / (b_pow * 10 ** (snr_db / 10)))
    mix = Waveform(p_rev + b_rev, primary.sample_rate)
    if return_components:
        return mix, p_rev, b_rev, snr_db
    return mix


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Resampling speed change: tempo and pitch scale by ``factor``, length by ``1/factor``."""
    if factor <= 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    if factor == 1:
        return w
    ratio = Fraction(1 / factor).limit_denominator(1000)
    return Waveform(resample_ratio(w.samples, ratio, int(round(len(w) / factor))), w.sample_rate)


# --------------------------------------------------------------------------
# G.711
# --------------------------------------------------------------------------

_ULAW_SEG_END = np.array([0x3F, 0x7F, 0xFF, 0x1FF, 0x3FF, 0x7FF, 0xFFF, 0x1FFF])
_ALAW_SEG_END = np.array([0x1F, 0x3F, 0x7F, 0xFF, 0x1FF, 0x3FF, 0x7FF, 0xFFF])
_ULAW_BIAS = 0x84
_ULAW_CLIP = 8159


def ulaw_encode(pcm: np.ndarray) -> np.ndarray:
    """16-bit linear PCM to 8-bit mu-law codes."""
    pcm = np.asarray(pcm, dtype=np.int32) >> 2
    mask = np.where(pcm < 0, 0x7F, 0xFF)
    mag = np.minimum(np.abs(pcm), _ULAW_CLIP) + (_ULAW_BIAS >> 2)
    seg = np.searchsorted(_ULAW_SEG_END, mag, side="left")
    code = np.where(seg >= 8, 0x7F,
                    (np.minimum(seg, 7) << 4) | ((mag >> (np.minimum(seg, 7) + 1)) & 0xF))
    return ((code ^ mask) & 0xFF).astype(np.uint8)


def ulaw_decode(code: np.ndarray) -> np.ndarray:
    u = (~np.asarray(code, dtype=np.int32)) & 0xFF
    t = (((u & 0x0F) << 3) + _ULAW_BIAS) << ((u & 0x70) >> 4)
    return np.where(u & 0x80, _ULAW_BIAS - t, t - _ULAW_BIAS).astype(np.int16)


def alaw_encode(pcm: np.ndarray) -> np.ndarray:
    """16-bit linear PCM to 8-bit A-law codes."""
    pcm = np.asarray(pcm, dtype=np.int32) >> 3
    mask = np.where(pcm >= 0, 0xD5, 0x55)
    mag = np.where(pcm >= 0, pcm, -pcm - 1)
    seg = np.searchsorted(_ALAW_SEG_END, mag, side="left")
    s = np.minimum(seg, 7)
    quant = np.where(s < 2, mag >> 1, mag >> np.maximum(s, 1)) & 0x0F
    code = np.where(seg >= 8, 0x7F, (s << 4) | quant)
    return ((code ^ mask) & 0xFF).astype(np.uint8)


def alaw_decode(code: np.ndarray) -> np.ndarray:
    a = np.asarray(code, dtype=np.int32) ^ 0x55
    t = (a & 0x0F) << 4
    seg = (a & 0x70) >> 4
    t = np.where(seg == 0, t + 8, t + 0x108)
    t = np.where(seg > 1, t << np.maximum(seg - 1, 0), t)
    return np.where(a & 0x80, t, -t).astype(np.int16)


def g711_roundtrip(w: Waveform, law: str = "ulaw") -> Waveform:
    """Encode and decode through G.711 at 8 kHz, returning audio at the original rate."""
    narrow = resample(w, 8000)
    pcm = np.clip(np.round(narrow.samples * 32768.0), -32768, 32767).astype(np.int32)
    if law == "ulaw":
        dec = ulaw_decode(ulaw_encode(pcm))
    elif law == "alaw":
        dec = alaw_decode(alaw_encode(pcm))
    else:
        raise ValueError(f"unknown G.711 law {law!r}")
    back = resample(Waveform(dec / 32768.0, 8000), w.sample_rate)
    samples = back.samples[: len(w)]
    if len(samples) < len(w):
        samples = np.pad(samples, (0, len(w) - len(samples)))
    return Waveform(samples, w.sample_rate)


def run_external_codec(w: Waveform, command: str, timeout: float = 60.0) -> Waveform:
    """Pipe ``w`` as 16-bit WAV through ``command`` and read WAV back from its stdout.

    Any failure returns the input unchanged with a warning.
    """
    try:
        proc = subprocess.run(shlex.split(command), input=encode_wav(w, 16),
                              capture_output=True, timeout=timeout, check=True)
        out = decode_wav(proc.stdout, command)
    except (OSError, subprocess.SubprocessError, ValueError) as exc:
        warnings.warn(f"external codec {command!r} failed ({exc}); keeping original audio",
                      stacklevel=2)
        return w
    samples = out.data[0]
    if out.sample_rate != w.sample_rate:
        samples = resample(Waveform(samples, out.sample_rate), w.sample_rate).samples
    samples = samples[: len(w)]
    return Waveform(np.pad(samples, (0, len(w) - len(samples))), w.sample_rate)


def apply_codec(w: Waveform, codec: str = "g711_ulaw", cfg: MixConfig | None = None,
                rng=None, command: str | None = None) -> Waveform:
    """Codec degradation, applied with probability ``cfg.codec_prob`` when ``cfg`` is given.

    ``external`` runs ``command`` (WAV on stdin and stdout) for codecs
    without a built-in implementation.
    """
    if codec not in CODECS:
        raise ValueError(f"unknown codec {codec!r}; choose from {CODECS}")
    if cfg is not None:
        rng = _rng(cfg.seed if rng is None else rng)
        if not rng.random() < cfg.codec_prob:
            return w
    if codec == "g711_ulaw":
        return g711_roundtrip(w, "ulaw")
    if codec == "g711_alaw":
        return g711_roundtrip(w, "alaw")
    if not command:
        raise ValueError("codec 'external' needs a command")
    return run_external_codec(w, command)


def augment_utterance(primary: Waveform, background: Waveform, rir_p: Waveform,
                      rir_b: Waveform, cfg: MixConfig = MixConfig(), codec: str = "g711_ulaw",
                      command: str | None = None, rng=None) -> Waveform:
    """Background-speaker mixing followed by random codec degradation, from one generator."""
    rng = _rng(cfg.seed if rng is None else rng)
    mix = mix_background_speaker(primary, background, rir_p, rir_b, cfg, rng)
    return apply_codec(mix, codec, cfg, rng, command)


def room_with_mic(room: RoomSpec, mic_pos) -> RoomSpec:
    return replace(room, mic_pos=tuple(mic_pos))
