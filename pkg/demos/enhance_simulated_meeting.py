"""
Enhancing a simulated two-talker recording
==========================================

A short utterance is placed in a random room, a second talker is mixed
under it, and every pipeline variant is run on the resulting four-channel
recording.  SI-SDR is measured against the target's direct path plus the
first 50 ms of reflections.
"""
from pathlib import Path

import numpy as np

from dasrkit.audio import read_wav
from dasrkit.manifest import cut_segment_with_context
from dasrkit.metrics import si_sdr
from dasrkit.pipeline import PipelineConfig, enhance_segment_detailed
from dasrkit.scenes import interferer_from, two_speaker_scene

clip = read_wav(Path(__file__).parent.parent / "tests" / "data" / "arctic_a0007.wav").channels[0]

# the second talker is the same clip reversed and sped up, so it is not the target
scene = two_speaker_scene(clip, interferer_from(clip, 1), seed=1)
for seg in scene.manifest.segments:
    print(f"{seg.utt_id:4s} {seg.speaker_id}  {seg.start:6.2f} - {seg.end:6.2f} s")

# the oracle segmentation drives the mixture model
fs = scene.audio.sample_rate
start = int(round(scene.manifest.segment("tgt").start * fs))

for variant in ("gss", "gss_postfilter", "cwmwf_cban"):
    cfg = PipelineConfig(variant)
    audio, grid, core = cut_segment_with_context(scene.manifest, "tgt", cfg.context_secs,
                                                 scene.audio)
    lo = start - core.start_sample
    span = slice(lo + core.start_sample, lo + core.end_sample)
    ref = scene.early[:, span]
    best_in = max(si_sdr(x, r) for x, r in zip(scene.audio.data[:, span], ref))
    res = enhance_segment_detailed(audio, grid, core, cfg)
    out = si_sdr(res.waveform.samples, ref[res.ref_channel])
    print(f"{variant:15s} channels {res.channels} ref {res.ref_channel}  "
          f"SI-SDR {best_in:5.1f} -> {out:5.1f} dB")

# the post-filter only ever removes energy
gss = enhance_segment_detailed(*cut_segment_with_context(scene.manifest, "tgt", 15.0, scene.audio))
pf = enhance_segment_detailed(*cut_segment_with_context(scene.manifest, "tgt", 15.0, scene.audio),
                              PipelineConfig("gss_postfilter"))
print("post-filter magnitude bound holds:", bool(np.all(np.abs(pf.spectrum) <= np.abs(gss.spectrum))))
