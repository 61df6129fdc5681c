"""Simulated two-talker array recordings with oracle segmentation.

Scenes are assembled from the augmentation primitives only: a sampled room,
image-method responses to every microphone of a four-element linear array, and the
background-speaker mixer applied per microphone with a shared read offset
and SNR.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .audio import MultichannelWaveform, Waveform
from .augment import (WALL_MARGIN, MixConfig, mix_background_speaker, room_with_mic,
                      sample_room, simulate_rir, speed_perturb)
from .manifest import SegmentAnnotation, SessionManifest

EARLY_SECS = 0.05


@dataclass(frozen=True)
class Scene:
    """A simulated session; ``early`` holds the target's direct-plus-early image per microphone."""

    audio: MultichannelWaveform
    manifest: SessionManifest
    target_utt: str
    early: np.ndarray
    snr_db: float


# four-element linear array of a consumer depth camera, offsets in metres
KINECT_OFFSETS = (-0.113, 0.036, 0.076, 0.113)


def linear_array(centre, dims, offsets=KINECT_OFFSETS) -> np.ndarray:
    """Microphones along the width axis around ``centre``, shifted inside the wall margin."""
    offsets = np.asarray(offsets, dtype=np.float64)
    lo = np.array([WALL_MARGIN - offsets.min(), WALL_MARGIN, WALL_MARGIN])
    hi = np.asarray(dims) - np.array([WALL_MARGIN + offsets.max(), WALL_MARGIN, WALL_MARGIN])
    c = np.clip(np.asarray(centre, float), lo, hi)
    return c + np.stack([offsets, np.zeros_like(offsets), np.zeros_like(offsets)], 1)


def _intervals(active: np.ndarray):
    edges = np.diff(np.concatenate([[0], active.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def two_speaker_scene(target: Waveform, interferer: Waveform, seed: int,
                      lead_secs: float = 4.0, snr_db_range=(0.0, 0.0), rir_len: int = 8000,
                      noise_db: float = -30.0) -> Scene:
    """Target talker in the middle of a session, a looped background talker under it.

    The target segment is ``[lead_secs, lead_secs + len(target))`` of a
    session padded by ``lead_secs`` on both sides.  The background talker
    gets the mixer's silence padding and looping, so its activity is derived
    from where the read position falls inside the unpadded recording.  The
    read offset is drawn so the background talker covers 25 to 75 % of the
    target, leading or trailing it, as in conversational overlap.

    :param snr_db_range: target-to-background ratio range at each microphone
    :param noise_db: white sensor noise relative to the target power
    """
    rng = np.random.default_rng(seed)
    fs = target.sample_rate
    room = sample_room(rng)
    # second talker somewhere else in the same room
    dims = np.array(room.dims)
    bg_pos = rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)
    mics = linear_array(room.mic_pos, dims)
    lead = int(round(lead_secs * fs))
    primary = Waveform(np.pad(target.samples, (lead, lead)), fs)
    cfg = MixConfig(snr_db_range=tuple(snr_db_range), pad_secs=4.0)
    pad = int(round(cfg.pad_secs * fs))
    # partial overlap: the background starts inside the target or ends inside it
    frac = rng.uniform(0.25, 0.75)
    if rng.random() < 0.5:
        start = lead + int(frac * len(target))
    else:
        start = lead - int(frac * len(interferer))
    offset = (pad - start) % (len(interferer) + 2 * pad)
    snr = float(rng.uniform(*cfg.snr_db_range))
    chans, early = [], []
    for pos in mics:
        rp = simulate_rir(room_with_mic(room, pos), fs, rir_len)
        rb = simulate_rir(replace(room, source_pos=tuple(bg_pos), mic_pos=tuple(pos)), fs,
                          rir_len)
        mix, p_rev, _, _ = mix_background_speaker(primary, interferer, rp, rb, cfg, rng,
                                                  offset=offset, snr_db=snr,
                                                  return_components=True)
        cut = int(np.argmax(np.abs(rp.samples))) + int(EARLY_SECS * fs)
        h_early = np.where(np.arange(rir_len) < cut, rp.samples, 0.0)
        early.append(np.convolve(primary.samples, h_early)[: len(primary)])
        chans.append(mix.samples)
    data = np.stack(chans)
    power = np.mean(np.stack(early) ** 2)
    data = data + rng.standard_normal(data.shape) * np.sqrt(power * 10 ** (noise_db / 10))
    peak = np.max(np.abs(data))
    scale = 0.9 / peak if peak > 0.9 else 1.0
    audio = MultichannelWaveform(data * scale, fs)
    n = len(primary)
    read = (offset + np.arange(n)) % (len(interferer) + 2 * pad)
    bg_active = (read >= pad) & (read < pad + len(interferer))
    segments = [SegmentAnnotation("tgt", "spk_t", lead / fs, (lead + len(target)) / fs)]
    for k, (s, e) in enumerate(_intervals(bg_active)):
        segments.append(SegmentAnnotation(f"bg{k}", "spk_b", s / fs, e / fs))
    manifest = SessionManifest(f"scene{seed}", (), tuple(segments))
    return Scene(audio, manifest, "tgt", np.stack(early) * scale, snr)


def interferer_from(clip: Waveform, seed: int) -> Waveform:
    """A second talker from one clip: time-reversed and speed-perturbed by 0.9 or 1.1."""
    factor = (0.9, 1.1)[seed % 2]
    return speed_perturb(Waveform(clip.samples[::-1].copy(), clip.sample_rate), factor)
