"""Guided source separation enhancement chain and its batch driver.

Per segment: envelope-variance channel selection, STFT, WPE, guided cACGMM
masks, mask-based MVDR with automatic reference choice, then an optional
mask post-filter or a convolutional Wiener filter with CBAN gain.  WPE and
the mixture model see the context-extended cut; beamformer statistics use
core frames only, and the output is trimmed to the core segment.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import MultichannelWaveform, Spectrogram, StftConfig, Waveform, istft, stft, write_wav
from .beamform import (BeamformerWeights, apply_beamformer, ban_gain, cwmwf, mask_postfilter,
                       masks_from_speech_estimates, mvdr_souden, peak_normalize, scm_from_mask,
                       select_reference_channel, stack_taps, steering_from_beamformed)
from .cacgmm import CacgmmConfig, fit_guided_cacgmm
from .channel_select import EvConfig, envelope_variance_scores, select_channels
from .dereverb import WpeConfig, wpe
from .manifest import ActivityGrid, CoreRegion, SessionManifest, cut_segment_with_context

log = logging.getLogger(__name__)

VARIANTS = ("gss", "gss_postfilter", "cwmwf_cban")
DEFAULT_CONTEXT = {"gss": 15.0, "gss_postfilter": 15.0, "cwmwf_cban": 1.0}


class EnhancementError(RuntimeError):
    """A module failure inside one segment; ``utt_id`` names the segment."""

    def __init__(self, utt_id, message):
        super().__init__(f"segment {utt_id!r}: {message}")
        self.utt_id = utt_id


def normalize_variant(name: str) -> str:
    v = name.replace("-", "_")
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return v


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "gss"
    context_secs: float | None = None
    keep_fraction: float = 0.8
    stft: StftConfig = StftConfig()
    wpe: WpeConfig = WpeConfig()
    cacgmm: CacgmmConfig = CacgmmConfig()
    taps: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.context_secs is None:
            object.__setattr__(self, "context_secs", DEFAULT_CONTEXT[self.variant])
        if self.context_secs < 0:
            raise ValueError(f"context_secs must be >= 0, got {self.context_secs}")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must lie in (0, 1], got {self.keep_fraction}")
        if self.taps < 1:
            raise ValueError("taps must be >= 1")


@dataclass(frozen=True)
class EnhanceResult:
    """Output and intermediates of one segment.

    ``spectrum`` is the single-channel output over core frames before
    synthesis; ``target_mask`` covers the whole cut.
    """

    waveform: Waveform
    spectrum: np.ndarray
    channels: tuple
    ref_channel: int
    target_mask: np.ndarray
    flags: dict = field(default_factory=dict)


def _frames(s: Spectrogram, idx) -> Spectrogram:
    return s.with_data(s.data[:, idx])


def _flag_count(*arrays) -> int:
    return int(sum(np.count_nonzero(a) for a in arrays if a is not None))


def _select(audio: MultichannelWaveform, cfg: PipelineConfig):
    if audio.num_channels == 1:
        return audio, (0,)
    ev = EvConfig(frame=cfg.stft.window_length, hop=cfg.stft.hop,
                  keep_fraction=cfg.keep_fraction)
    chosen = tuple(select_channels(envelope_variance_scores(audio, ev), cfg.keep_fraction))
    return audio.select(list(chosen)), chosen


def _beamform(s_wpe: Spectrogram, speech_mask, noise_mask, core_idx, cfg: PipelineConfig,
              postfilter_mask=None):
    """Beamformer stage shared by the cACGMM and speech-estimate mask paths."""
    flags = {}
    core = _frames(s_wpe, core_idx)
    if s_wpe.num_channels == 1:
        wts = BeamformerWeights(np.ones((s_wpe.num_bins, 1), dtype=np.complex128))
        ref = 0
    else:
        phi_s = scm_from_mask(core, speech_mask[core_idx])
        phi_n = scm_from_mask(core, noise_mask[core_idx])
        ref = select_reference_channel(phi_s, phi_n)
        wts = mvdr_souden(phi_s, phi_n, ref)
        flags["scm_flagged_bins"] = _flag_count(phi_s.flagged, phi_n.flagged)
        flags["mvdr_flagged_bins"] = _flag_count(wts.flagged)
    y = apply_beamformer(wts, s_wpe)
    if cfg.variant == "gss_postfilter":
        m = speech_mask if postfilter_mask is None else postfilter_mask
        y = mask_postfilter(y, m)
    elif cfg.variant == "cwmwf_cban":
        d = steering_from_beamformed(s_wpe, y, ref, frames=core_idx)
        stacked = s_wpe.with_data(stack_taps(s_wpe.data, cfg.taps))
        phi_nc = scm_from_mask(_frames(stacked, core_idx), noise_mask[core_idx])
        phi_s_psd = np.mean(np.abs(y.data[0, core_idx]) ** 2, axis=0)
        w_conv = cwmwf(s_wpe, d, phi_nc, cfg.taps, phi_s_psd)
        gain, gain_flags = ban_gain(w_conv, phi_nc)
        y = apply_beamformer(w_conv, s_wpe)
        y = y.with_data(y.data * gain[None, None, :])
        flags["steering_flagged_bins"] = _flag_count(d.flagged)
        flags["cwmwf_flagged_bins"] = _flag_count(w_conv.flagged, phi_nc.flagged)
        flags["cban_flagged_bins"] = _flag_count(gain_flags)
    return y, ref, flags


def _finish(y: Spectrogram, num_samples: int, core: CoreRegion, cfg: PipelineConfig):
    full = istft(y, cfg.stft, out_length=num_samples)
    out = Waveform(full.data[0, core.start_sample:core.end_sample], full.sample_rate)
    return peak_normalize(out)


def _check_core(act: ActivityGrid, core: CoreRegion, num_frames: int):
    if act.num_frames != num_frames:
        raise ValueError(f"activity grid has {act.num_frames} frames, audio gives {num_frames}")
    if not act.activity[act.target_index, core.start_frame:core.end_frame].any():
        raise ValueError(f"target speaker {act.target_speaker!r} is not active in the core region")


def enhance_segment_detailed(audio: MultichannelWaveform, act: ActivityGrid, core: CoreRegion,
                             cfg: PipelineConfig = PipelineConfig(), utt_id: str = "<segment>",
                             postfilter_mask=None) -> EnhanceResult:
    """Run the chain on a context-extended cut and keep the intermediates.

    :param postfilter_mask: replaces the cACGMM target mask in the post-filter only
    """
    try:
        num_frames = cfg.stft.num_frames(len(audio))
        _check_core(act, core, num_frames)
        audio_sel, chosen = _select(audio, cfg)
        s = stft(audio_sel, cfg.stft)
        s_wpe = wpe(s, cfg.wpe)
        target = act.target_index
        if s_wpe.num_channels > 1:
            masks = fit_guided_cacgmm(s_wpe, act, cfg.cacgmm)
            speech = masks.target
        else:
            # no spatial model with one microphone: the activity prior is the mask
            speech = np.repeat(act.activity[target].astype(np.float64)[:, None],
                               s_wpe.num_bins, axis=1)
        noise = 1.0 - speech
        core_idx = np.arange(core.start_frame, core.end_frame)
        y, ref, flags = _beamform(s_wpe, speech, noise, core_idx, cfg, postfilter_mask)
        out = _finish(y, len(audio), core, cfg)
    except EnhancementError:
        raise
    except (ValueError, np.linalg.LinAlgError, KeyError) as exc:
        raise EnhancementError(utt_id, str(exc)) from exc
    return EnhanceResult(out, y.data[0, core_idx], chosen, chosen[ref], speech, flags)


def enhance_segment(audio: MultichannelWaveform, act: ActivityGrid, core: CoreRegion,
                    cfg: PipelineConfig = PipelineConfig(), utt_id: str = "<segment>") -> Waveform:
    """Enhanced target speech for the core region; length equals the core duration in samples."""
    return enhance_segment_detailed(audio, act, core, cfg, utt_id).waveform


def enhance_with_speech_estimates(audio: MultichannelWaveform, estimate: MultichannelWaveform,
                                  core: CoreRegion, cfg: PipelineConfig = PipelineConfig(),
                                  utt_id: str = "<segment>") -> Waveform:
    """Beamform with masks derived from per-channel speech estimates (e.g. a neural extractor).

    ``estimate`` must be time-aligned with ``audio``; no channel selection,
    WPE or mixture model is run.
    """
    try:
        if estimate.data.shape != audio.data.shape:
            raise ValueError(f"estimate shape {estimate.data.shape} does not match mixture "
                             f"{audio.data.shape}")
        s = stft(audio, cfg.stft)
        speech, noise = masks_from_speech_estimates(s, stft(estimate, cfg.stft))
        core_idx = np.arange(core.start_frame, core.end_frame)
        y, _, _ = _beamform(s, speech, noise, core_idx, cfg)
        return _finish(y, len(audio), core, cfg)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise EnhancementError(utt_id, str(exc)) from exc


@dataclass
class RunReport:
    entries: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(e["status"] == "ok" for e in self.entries)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


def _run_one(job):
    manifest, utt_id, cfg, out_path = job
    t0 = time.perf_counter()
    entry = {"session_id": manifest.session_id, "utt_id": utt_id, "variant": cfg.variant,
             "seed": cfg.seed}
    try:
        audio = manifest.load_audio()
        cut, grid, core = cut_segment_with_context(manifest, utt_id, cfg.context_secs, audio,
                                                   cfg.stft)
        res = enhance_segment_detailed(cut, grid, core, cfg, utt_id)
        write_wav(out_path, res.waveform)
        entry.update(status="ok", output=str(out_path), channels=list(res.channels),
                     ref_channel=res.ref_channel, flags=res.flags,
                     num_samples=len(res.waveform))
    except (EnhancementError, OSError, ValueError, KeyError) as exc:
        log.warning("segment %s failed: %s", utt_id, exc)
        entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    entry["seconds"] = round(time.perf_counter() - t0, 3)
    return entry


def enhance_manifest(m: SessionManifest, cfg: PipelineConfig, out_dir, workers: int = 1,
                     report_name: str = "report.jsonl") -> RunReport:
    """Enhance every segment to ``out_dir/<session>/<utt_id>.wav`` and write a JSON-lines report.

    Failures are recorded in the report and do not stop the run.
    """
    out_dir = Path(out_dir)
    session_dir = out_dir / m.session_id
    session_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(m, seg.utt_id, cfg, session_dir / f"{seg.utt_id}.wav") for seg in m.segments]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_run_one, jobs))
    else:
        entries = [_run_one(j) for j in jobs]
    report = RunReport(entries)
    report.write(out_dir / report_name)
    return report


def with_variant(cfg: PipelineConfig, variant: str) -> PipelineConfig:
    """Same settings under another variant, with that variant's default context."""
    return replace(cfg, variant=normalize_variant(variant), context_secs=None)
