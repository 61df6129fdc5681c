"""Audio containers, RIFF/WAVE I/O, STFT analysis/synthesis and resampling.

Spectrogram tensors are laid out as ``(channel, frame, bin)``.  Frames are
centred: frame ``t`` covers original samples
``[t * hop - window_length // 2, t * hop + window_length // 2)`` after
reflective half-window padding, so the frame count depends only on the
signal length and hop.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

DEFAULT_SAMPLE_RATE = 16000

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Base class for malformed or unsupported WAV input."""


class UnsupportedWavError(WavError):
    """Codec or bit depth outside PCM16, PCM24 and float32."""


class TruncatedWavError(WavError):
    """A chunk announces more bytes than the file holds."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected 1-D samples, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains NaN or Inf")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MultichannelWaveform:
    """Equal-length channels stored as a ``(channels, samples)`` array."""

    data: np.ndarray
    sample_rate: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None]
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError(f"expected (channels, samples) data, got shape {data.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(data)):
            raise ValueError("waveform contains NaN or Inf")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @classmethod
    def from_channels(cls, channels) -> "MultichannelWaveform":
        channels = list(channels)
        if not channels:
            raise ValueError("need at least one channel")
        rates = {c.sample_rate for c in channels}
        lengths = {len(c) for c in channels}
        if len(rates) != 1 or len(lengths) != 1:
            raise ValueError("channels differ in sample rate or length")
        return cls(np.stack([c.samples for c in channels]), rates.pop())

    @property
    def channels(self) -> list[Waveform]:
        return [Waveform(row, self.sample_rate) for row in self.data]

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    def __len__(self):
        return self.data.shape[1]

    def select(self, indices) -> "MultichannelWaveform":
        return MultichannelWaveform(self.data[list(indices)], self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 1024
    hop: int = 256
    fft_size: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.window_length <= self.fft_size:
            raise ValueError(
                "need 0 < hop <= window_length <= fft_size, got "
                f"{self.hop}, {self.window_length}, {self.fft_size}"
            )

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def analysis_window(self) -> np.ndarray:
        # periodic taper; hann/hop=N/4 gives a constant squared-window sum of 1.5
        return signal.get_window(self.window, self.window_length, fftbins=True)

    def num_frames(self, num_samples: int) -> int:
        return 1 + num_samples // self.hop


@dataclass(frozen=True)
class Spectrogram:
    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"expected (channel, frame, bin) data, got shape {data.shape}")
        if data.shape[2] != self.config.num_bins:
            raise ValueError(
                f"{data.shape[2]} bins does not match fft_size {self.config.fft_size}"
            )
        object.__setattr__(self, "data", data.astype(np.complex128, copy=False))

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]

    def with_data(self, data) -> "Spectrogram":
        return Spectrogram(data, self.config, self.sample_rate)


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------

def _parse_chunks(raw: bytes, path):
    if len(raw) < 12:
        raise TruncatedWavError(f"{path}: file too short for a RIFF header")
    riff, _, wave = struct.unpack("<4sI4s", raw[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise UnsupportedWavError(f"{path}: not a RIFF/WAVE file")
    chunks = {}
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack("<4sI", raw[pos:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise TruncatedWavError(
                f"{path}: chunk {cid.decode('latin-1')!r} declares {size} bytes, "
                f"only {len(body)} present"
            )
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def _parse_format(fmt: bytes, path):
    if len(fmt) < 16:
        raise TruncatedWavError(f"{path}: fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise TruncatedWavError(f"{path}: extensible fmt chunk too short")
        tag = struct.unpack("<H", fmt[24:26])[0]
    if (tag, bits) not in ((_WAVE_FORMAT_PCM, 16), (_WAVE_FORMAT_PCM, 24),
                           (_WAVE_FORMAT_IEEE_FLOAT, 32)):
        raise UnsupportedWavError(
            f"{path}: unsupported encoding (format tag {tag:#06x}, {bits} bits); "
            "expected PCM16, PCM24 or float32"
        )
    if channels < 1 or rate < 1:
        raise UnsupportedWavError(f"{path}: {channels} channels at {rate} Hz")
    return tag, channels, rate, bits


def _decode_samples(body: bytes, tag: int, bits: int, channels: int) -> np.ndarray:
    width = bits // 8
    frames = len(body) // (width * channels)
    body = body[:frames * width * channels]
    if tag == _WAVE_FORMAT_IEEE_FLOAT:
        data = np.frombuffer(body, dtype="<f4").astype(np.float64)
    elif bits == 16:
        data = np.frombuffer(body, dtype="<i2") / 32768.0
    else:
        b = np.frombuffer(body, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        data = ints / float(1 << 23)
    return data.reshape(frames, channels).T


def wav_info(path) -> tuple[int, int, int]:
    """Return ``(channels, sample_rate, frames)`` without decoding samples."""
    path = Path(path)
    chunks = _parse_chunks(path.read_bytes(), path)
    if b"fmt " not in chunks or b"data" not in chunks:
        raise TruncatedWavError(f"{path}: missing fmt or data chunk")
    _, channels, rate, bits = _parse_format(chunks[b"fmt "], path)
    return channels, rate, len(chunks[b"data"]) // (channels * bits // 8)


def decode_wav(raw: bytes, name="<bytes>") -> MultichannelWaveform:
    """Decode an in-memory RIFF/WAVE image; see :func:`read_wav`."""
    chunks = _parse_chunks(raw, name)
    if b"fmt " not in chunks:
        raise TruncatedWavError(f"{name}: missing fmt chunk")
    tag, channels, rate, bits = _parse_format(chunks[b"fmt "], name)
    if b"data" not in chunks:
        raise TruncatedWavError(f"{name}: missing data chunk")
    return MultichannelWaveform(_decode_samples(chunks[b"data"], tag, bits, channels), rate)


def read_wav(path) -> MultichannelWaveform:
    """Read a PCM16, PCM24 or float32 RIFF/WAVE file.

    Integer PCM is scaled by ``2**(bits-1)``, so the 16-bit code 32767 maps to
    ``32767/32768``.

    :raises FileNotFoundError: missing file
    :raises UnsupportedWavError: codec or bit depth not supported
    :raises TruncatedWavError: header or chunk cut short
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    return decode_wav(path.read_bytes(), path)


def encode_wav(w, bit_depth: int = 16) -> bytes:
    """Serialise a Waveform or MultichannelWaveform to RIFF/WAVE bytes.

    Integer formats saturate samples outside the representable range and warn.
    """
    if isinstance(w, Waveform):
        w = MultichannelWaveform(w.samples[None], w.sample_rate)
    data = np.asarray(w.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("refusing to write NaN/Inf samples")
    interleaved = data.T
    if bit_depth == 32:
        tag, payload = _WAVE_FORMAT_IEEE_FLOAT, interleaved.astype("<f4").tobytes()
    elif bit_depth in (16, 24):
        tag = _WAVE_FORMAT_PCM
        scale = float(1 << (bit_depth - 1))
        ints = np.round(interleaved * scale)
        lo, hi = -scale, scale - 1
        clipped = (ints > hi) | (ints < lo)
        if np.any(clipped):
            warnings.warn(f"clipping {np.count_nonzero(clipped)} samples to the "
                          f"{bit_depth}-bit range", stacklevel=3)
            ints = np.clip(ints, lo, hi)
        ints = ints.astype(np.int32)
        if bit_depth == 16:
            payload = ints.astype("<i2").tobytes()
        else:
            u = np.ascontiguousarray(ints, dtype="<i4").view(np.uint8).reshape(-1, 4)[:, :3]
            payload = np.ascontiguousarray(u).tobytes()
    else:
        raise UnsupportedWavError(f"unsupported bit depth {bit_depth}; use 16, 24 or 32")
    channels = data.shape[0]
    block = channels * bit_depth // 8
    fmt = struct.pack("<HHIIHH", tag, channels, w.sample_rate,
                      w.sample_rate * block, block, bit_depth)
    pad = b"\x00" if len(payload) & 1 else b""
    return b"".join([
        struct.pack("<4sI4s", b"RIFF", 4 + 8 + len(fmt) + 8 + len(payload) + len(pad), b"WAVE"),
        struct.pack("<4sI", b"fmt ", len(fmt)), fmt,
        struct.pack("<4sI", b"data", len(payload)), payload, pad,
    ])


def write_wav(path, w, bit_depth: int = 16) -> None:
    """Write ``w`` as PCM16, PCM24 or float32 (``bit_depth`` 16, 24 or 32)."""
    payload = encode_wav(w, bit_depth)
    with open(path, "wb") as fh:
        fh.write(payload)


# --------------------------------------------------------------------------
# STFT
# --------------------------------------------------------------------------

def _as_2d(w) -> tuple[np.ndarray, int]:
    if isinstance(w, Waveform):
        return w.samples[None], w.sample_rate
    return w.data, w.sample_rate


def stft(w, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Centred STFT of every channel; returns a ``(channel, frame, bin)`` spectrogram."""
    x, rate = _as_2d(w)
    n = x.shape[1]
    if n < cfg.window_length:
        raise ValueError(f"signal of {n} samples is shorter than one window "
                         f"({cfg.window_length})")
    half = cfg.window_length // 2
    padded = np.pad(x, ((0, 0), (half, half)), mode="reflect")
    frames = cfg.num_frames(n)
    starts = np.arange(frames) * cfg.hop
    idx = starts[:, None] + np.arange(cfg.window_length)[None, :]
    segments = padded[:, idx] * cfg.analysis_window()
    data = np.fft.rfft(segments, n=cfg.fft_size, axis=-1)
    return Spectrogram(data, cfg, rate)


def istft(s: Spectrogram, cfg: StftConfig | None = None, out_length: int | None = None
          ) -> MultichannelWaveform:
    """Weighted overlap-add inverse of :func:`stft`.

    The overlapped squared window is divided out sample by sample, which is
    exact everywhere the window sum is non-zero, edges included.
    """
    cfg = s.config if cfg is None else cfg
    if cfg != s.config:
        raise ValueError(f"synthesis config {cfg} differs from analysis config {s.config}")
    frames = s.num_frames
    win = cfg.analysis_window()
    seg = np.fft.irfft(s.data, n=cfg.fft_size, axis=-1)[..., :cfg.window_length] * win
    half = cfg.window_length // 2
    total = (frames - 1) * cfg.hop + cfg.window_length
    out = np.zeros((s.num_channels, total))
    norm = np.zeros(total)
    for t in range(frames):
        sl = slice(t * cfg.hop, t * cfg.hop + cfg.window_length)
        out[:, sl] += seg[:, t]
        norm[sl] += win ** 2
    nz = norm > 1e-10
    out[:, nz] /= norm[nz]
    out = out[:, half:]
    if out_length is None:
        out_length = (frames - 1) * cfg.hop
    if out.shape[1] >= out_length:
        out = out[:, :out_length]
    else:
        out = np.pad(out, ((0, 0), (0, out_length - out.shape[1])))
    return MultichannelWaveform(out, s.sample_rate)


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

def resample_ratio(x: np.ndarray, ratio: Fraction, out_length: int) -> np.ndarray:
    """Band-limited polyphase resampling of the last axis by ``ratio``, fixed to ``out_length``."""
    ratio = Fraction(ratio)
    if ratio <= 0:
        raise ValueError("resampling ratio must be positive")
    x = np.asarray(x, dtype=np.float64)
    if ratio == 1:
        y = x
    else:
        y = signal.resample_poly(x, ratio.numerator, ratio.denominator, axis=-1)
    n = y.shape[-1]
    if n >= out_length:
        return y[..., :out_length]
    pad = [(0, 0)] * (y.ndim - 1) + [(0, out_length - n)]
    return np.pad(y, pad)


def resample(w, target_rate: int):
    """Resample a Waveform or MultichannelWaveform to ``target_rate`` Hz.

    Output length is ``round(len * target_rate / sample_rate)``.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w
    ratio = Fraction(target_rate, w.sample_rate)
    out_length = int(round(len(w) * target_rate / w.sample_rate))
    if isinstance(w, Waveform):
        return Waveform(resample_ratio(w.samples, ratio, out_length), target_rate)
    return MultichannelWaveform(resample_ratio(w.data, ratio, out_length), target_rate)


def ensure_rate(w, rate: int = DEFAULT_SAMPLE_RATE):
    return resample(w, rate) if w.sample_rate != rate else w


def frame_energy(s: Spectrogram) -> np.ndarray:
    """Per (channel, frame) energy of the windowed frame, recovered from the half spectrum."""
    weights = np.full(s.num_bins, 2.0)
    weights[0] = 1.0
    if s.config.fft_size % 2 == 0:
        weights[-1] = 1.0
    return (np.abs(s.data) ** 2 @ weights) / s.config.fft_size


