"""
Synthetic rooms and background talkers
======================================

Rooms are drawn from the augmentation ranges, impulse responses come from
the image method, and a reverberant second talker is inserted at a random
SNR.  A fraction of utterances also passes through a G.711 codec.
"""
from pathlib import Path

import numpy as np

from dasrkit.audio import Waveform, read_wav, resample
from dasrkit.augment import (MixConfig, apply_codec, mix_background_speaker, rir_energy_envelope,
                             sample_room, simulate_rir, speed_perturb)

rng = np.random.default_rng(7)
room = sample_room(rng)
print("room", np.round(room.dims, 2), "walls", np.round(room.beta, 2))
print("source-mic distance %.2f m" % room.distance)

rir = simulate_rir(room, 16000, 8000)
env = rir_energy_envelope(rir)
print("direct path at sample", int(np.argmax(np.abs(rir.samples))))
print("energy in 10 ms blocks (dB):", np.round(env[:12], 1))

# a slope of the block envelope gives a rough reverberation time
slope = np.polyfit(np.arange(2, env.size), env[2:], 1)[0]
print("approximate T60 %.2f s" % (-60 / slope * 0.01))

clip = read_wav(Path(__file__).parent.parent / "tests" / "data" / "arctic_a0007.wav").channels[0]
background = speed_perturb(Waveform(clip.samples[::-1].copy(), clip.sample_rate), 1.1)

cfg = MixConfig(seed=3)
rir_b = simulate_rir(sample_room(rng), 16000, 8000)
mix, p, b, snr = mix_background_speaker(clip, background, rir, rir_b, cfg, rng,
                                        return_components=True)
print("drawn SNR %.2f dB, measured %.2f dB" % (snr, 10 * np.log10(np.mean(p ** 2) / np.mean(b ** 2))))

# codecs are applied with probability 1/7; force one here to hear the effect
coded = apply_codec(mix, "g711_ulaw")
narrow = resample(resample(mix, 8000), 16000)
for name, ref in (("wideband", mix), ("8 kHz band", narrow)):
    err = coded.samples - ref.samples
    print("mu-law error vs %-10s %.1f dB below the signal"
          % (name, 10 * np.log10(np.mean(ref.samples ** 2) / np.mean(err ** 2))))
