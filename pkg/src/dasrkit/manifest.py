"""Session manifests, oracle-diarization activity grids and duration-balanced subsets."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import (DEFAULT_SAMPLE_RATE, MultichannelWaveform, StftConfig, ensure_rate,
                    read_wav, wav_info)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentAnnotation:
    utt_id: str
    speaker_id: str
    start: float
    end: float
    group_key: str = ""

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ManifestError(
                f"segment {self.utt_id!r}: need 0 <= start < end, got "
                f"start={self.start}, end={self.end}"
            )

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class SessionManifest:
    session_id: str
    channel_paths: tuple
    segments: tuple

    def segment(self, utt_id: str) -> SegmentAnnotation:
        for seg in self.segments:
            if seg.utt_id == utt_id:
                return seg
        raise KeyError(f"unknown utt_id {utt_id!r} in session {self.session_id!r}")

    def load_audio(self, rate: int = DEFAULT_SAMPLE_RATE) -> MultichannelWaveform:
        """Read every channel file, resample to ``rate`` and stack the channels."""
        parts = [ensure_rate(read_wav(p), rate) for p in self.channel_paths]
        n = min(len(p) for p in parts)
        return MultichannelWaveform(np.concatenate([p.data[:, :n] for p in parts]), rate)


@dataclass(frozen=True)
class ActivityGrid:
    """Binary speaker-by-frame activity on the frame grid of ``stft_config``."""

    speakers: tuple
    activity: np.ndarray
    stft_config: StftConfig = StftConfig()
    target_speaker: str | None = None

    def __post_init__(self):
        act = np.asarray(self.activity)
        if act.ndim != 2 or act.shape[0] != len(self.speakers):
            raise ValueError(f"activity shape {act.shape} does not match "
                             f"{len(self.speakers)} speakers")
        if not np.all((act == 0) | (act == 1)):
            raise ValueError("activity entries must be 0 or 1")
        object.__setattr__(self, "activity", act.astype(bool))
        object.__setattr__(self, "speakers", tuple(self.speakers))

    @property
    def num_frames(self) -> int:
        return self.activity.shape[1]

    @property
    def target_index(self) -> int:
        if self.target_speaker is None:
            raise ValueError("activity grid has no target speaker")
        return self.speakers.index(self.target_speaker)


@dataclass(frozen=True)
class CoreRegion:
    """Sample and frame span of the annotated segment inside its context-padded cut."""

    start_sample: int
    end_sample: int
    start_frame: int
    end_frame: int

    @property
    def num_samples(self) -> int:
        return self.end_sample - self.start_sample

    def frame_mask(self, num_frames: int) -> np.ndarray:
        m = np.zeros(num_frames, dtype=bool)
        m[self.start_frame:self.end_frame] = True
        return m


_REQUIRED_SEGMENT_FIELDS = {"utt_id": str, "speaker": str, "start": (int, float),
                            "end": (int, float)}


def _parse_segment(raw, i):
    if not isinstance(raw, dict):
        raise ManifestError(f"segments[{i}]: expected an object")
    for key, typ in _REQUIRED_SEGMENT_FIELDS.items():
        if key not in raw:
            raise ManifestError(f"segments[{i}].{key}: missing")
        if not isinstance(raw[key], typ) or isinstance(raw[key], bool):
            raise ManifestError(f"segments[{i}].{key}: wrong type {type(raw[key]).__name__}")
    group = raw.get("group", "")
    if not isinstance(group, str):
        raise ManifestError(f"segments[{i}].group: expected a string")
    return SegmentAnnotation(raw["utt_id"], raw["speaker"], float(raw["start"]),
                             float(raw["end"]), group)


def load_session_manifest(path, check_audio: bool = True) -> SessionManifest:
    """Parse and validate a session manifest JSON file.

    Relative channel paths resolve against the manifest's directory.  With
    ``check_audio`` each channel file must exist and every segment must end
    within the shortest channel.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: top level must be an object")
    session_id = raw.get("session_id")
    if not isinstance(session_id, str) or not session_id:
        raise ManifestError("session_id: missing or not a non-empty string")
    channels = raw.get("channels")
    if not isinstance(channels, list) or not channels:
        raise ManifestError("channels: expected a non-empty list of paths")
    if not all(isinstance(c, str) for c in channels):
        raise ManifestError("channels: every entry must be a string path")
    segments_raw = raw.get("segments", [])
    if not isinstance(segments_raw, list):
        raise ManifestError("segments: expected a list")
    paths = tuple(str((path.parent / c) if not Path(c).is_absolute() else Path(c))
                  for c in channels)
    segments = tuple(_parse_segment(s, i) for i, s in enumerate(segments_raw))
    ids = [s.utt_id for s in segments]
    if len(set(ids)) != len(ids):
        dup = sorted({u for u in ids if ids.count(u) > 1})
        raise ManifestError(f"segments: duplicate utt_id {dup}")

    if check_audio:
        durations = []
        for p in paths:
            if not Path(p).is_file():
                raise FileNotFoundError(f"channel file missing: {p}")
            _, rate, frames = wav_info(p)
            durations.append(frames / rate)
        total = min(durations)
        for seg in segments:
            if seg.end > total + 1e-6:
                raise ManifestError(f"segment {seg.utt_id!r} ends at {seg.end} s, "
                                    f"past the recording end {total:.3f} s")
    return SessionManifest(session_id, paths, segments)


def frames_overlapping(start: int, end: int, num_frames: int, hop: int) -> np.ndarray:
    """Frames whose hop cell ``[t*hop - hop/2, t*hop + hop/2)`` is at least half inside ``[start, end)``."""
    centres = np.arange(num_frames) * hop
    lo = np.maximum(centres - hop / 2, start)
    hi = np.minimum(centres + hop / 2, end)
    return (hi - lo) >= hop / 2


def activity_to_intervals(row: np.ndarray, hop: int) -> list[tuple[int, int]]:
    """Inverse rasterisation: runs of active frames to sample intervals of their hop cells."""
    row = np.asarray(row, dtype=bool)
    edges = np.diff(np.concatenate([[0], row.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(int(s * hop - hop // 2), int((e - 1) * hop + hop // 2)) for s, e in zip(starts, ends)]


def build_activity_grid(segments, window_start: int, num_samples: int, rate: int,
                        stft_config: StftConfig, target_speaker=None) -> ActivityGrid:
    """Rasterise the segments intersecting ``[window_start, window_start + num_samples)``."""
    num_frames = stft_config.num_frames(num_samples)
    rows = defaultdict(lambda: np.zeros(num_frames, dtype=bool))
    for seg in segments:
        s = int(round(seg.start * rate)) - window_start
        e = int(round(seg.end * rate)) - window_start
        if e <= 0 or s >= num_samples:
            continue
        rows[seg.speaker_id] |= frames_overlapping(s, e, num_frames, stft_config.hop)
    if target_speaker is not None:
        rows[target_speaker]
    speakers = sorted(rows)
    act = np.stack([rows[s] for s in speakers]) if speakers else np.zeros((0, num_frames), bool)
    return ActivityGrid(tuple(speakers), act, stft_config, target_speaker)


def cut_segment_with_context(m: SessionManifest, utt_id: str, context_secs: float,
                             audio: MultichannelWaveform | None = None,
                             stft_config: StftConfig = StftConfig()):
    """Cut ``utt_id`` with ``context_secs`` of context on each side, clamped to the recording.

    :param audio: the session audio if already loaded (avoids re-reading the files)
    :return: ``(audio, activity_grid, core_region)``
    """
    if context_secs < 0:
        raise ValueError(f"context_secs must be >= 0, got {context_secs}")
    seg = m.segment(utt_id)
    if audio is None:
        audio = m.load_audio()
    rate = audio.sample_rate
    total = len(audio)
    s = int(round(seg.start * rate))
    e = min(int(round(seg.end * rate)), total)
    ctx = int(round(context_secs * rate))
    lo = max(0, s - ctx)
    hi = min(total, e + ctx)
    cut = MultichannelWaveform(audio.data[:, lo:hi], rate)
    grid = build_activity_grid(m.segments, lo, hi - lo, rate, stft_config, seg.speaker_id)
    core_frames = np.flatnonzero(frames_overlapping(s - lo, e - lo, grid.num_frames,
                                                    stft_config.hop))
    if core_frames.size == 0:
        # segment shorter than half a hop: keep the frame nearest its centre
        core_frames = np.array([int(round(((s + e) / 2 - lo) / stft_config.hop))])
    core = CoreRegion(s - lo, e - lo, int(core_frames[0]), int(core_frames[-1]) + 1)
    t = grid.target_index
    if not grid.activity[t, core.start_frame:core.end_frame].any():
        act = grid.activity.copy()
        act[t, core.start_frame:core.end_frame] = True
        grid = ActivityGrid(grid.speakers, act, stft_config, grid.target_speaker)
    return cut, grid, core


def subset_by_hours(entries, target_hours, seed: int = 0) -> list[SegmentAnnotation]:
    """Randomly pick utterances per ``group_key`` until each group first reaches its target.

    ``target_hours`` is a single number applied to every group or a mapping
    from group key to hours; groups missing from the mapping are kept whole.
    Groups below target are returned whole.  Output preserves input order.
    """
    by_group = defaultdict(list)
    for i, e in enumerate(entries):
        by_group[e.group_key].append(i)
    rng = np.random.default_rng(seed)
    keep = set()
    for group in sorted(by_group):
        idx = by_group[group]
        hours = target_hours.get(group) if isinstance(target_hours, dict) else target_hours
        if hours is None:
            keep.update(idx)
            continue
        if hours <= 0:
            raise ValueError(f"target hours for {group!r} must be positive")
        target = hours * 3600.0
        acc = 0.0
        for j in rng.permutation(len(idx)):
            if acc >= target:
                break
            keep.add(idx[j])
            acc += entries[idx[j]].duration
    return [e for i, e in enumerate(entries) if i in keep]


def total_hours(entries) -> float:
    return math.fsum(e.duration for e in entries) / 3600.0
