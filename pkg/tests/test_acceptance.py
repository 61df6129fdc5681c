"""Release criteria, one test each; every test prints a PASS or FAIL line."""
import math
import time

import numpy as np
import pytest

from dasrkit.audio import MultichannelWaveform, Spectrogram, StftConfig, Waveform, frame_energy, istft, stft
from dasrkit.augment import (MixConfig, RoomSpec, mix_background_speaker, rir_energy_envelope,
                             sample_room, simulate_rir)
from dasrkit.beamform import mvdr_souden
from dasrkit.cacgmm import CacgmmConfig, fit_guided_cacgmm
from dasrkit.cli import build_parser
from dasrkit.dereverb import wpe
from dasrkit.fusion import RoverConfig, hystoc_confusion_network, rover
from dasrkit.manifest import ActivityGrid, SegmentAnnotation, cut_segment_with_context, subset_by_hours, total_hours
from dasrkit.metrics import si_sdr
from dasrkit.pipeline import PipelineConfig, enhance_segment_detailed
from dasrkit.scenes import interferer_from, two_speaker_scene


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def _cplx(r, *shape):
    return r.standard_normal(shape) + 1j * r.standard_normal(shape)


def test_01_three_hypothesis_confidences(verdict):
    t0 = time.perf_counter()
    cn = hystoc_confusion_network([list("ABC"), list("AB"), list("AC")], [0.7, 0.2, 0.1])
    elapsed = time.perf_counter() - t0
    want = [{"A": 1.0}, {"B": 0.9, "<eps>": 0.1}, {"C": 0.8, "<eps>": 0.2}]
    ok = len(cn.slots) == 3 and all(
        set(s) == set(w) and all(abs(s[k] - w[k]) <= 1e-12 for k in w)
        for s, w in zip(cn.slots, want))
    verdict(1, ok and elapsed < 1.0, f"slots {cn.slots}, {elapsed * 1000:.1f} ms")


def test_02_rover_defaults_and_hand_example(verdict):
    args = build_parser().parse_args(["fuse", "rover", "x.ctm"])
    out = rover([[("a", 1.0), ("b", 1.0)], [("a", 1.0), ("c", 1.0)], [("a", 1.0)]],
                RoverConfig(args.alpha, args.null_conf))
    ok = (args.alpha, args.null_conf) == (0.8, 0.4) and [w for w, _ in out] == ["a", "b"]
    verdict(2, ok, f"alpha={args.alpha} null_conf={args.null_conf} output={out}")


def test_03_stft_round_trip_and_parseval(verdict):
    r = np.random.default_rng(3)
    cfg = StftConfig()
    worst_rt, worst_pv = 0.0, 0.0
    for _ in range(100):
        n = int(r.integers(2000, 40000))
        x = r.standard_normal((1, n))
        s = stft(MultichannelWaveform(x, 16000), cfg)
        y = istft(s, out_length=n).data
        worst_rt = max(worst_rt, np.linalg.norm(y - x) / np.linalg.norm(x))
        padded = np.pad(x, ((0, 0), (512, 512)), mode="reflect")
        t = np.arange(s.num_frames)
        frames = padded[:, t[:, None] * cfg.hop + np.arange(1024)] * cfg.analysis_window()
        direct = np.sum(frames ** 2, axis=-1)
        worst_pv = max(worst_pv, np.max(np.abs(frame_energy(s) - direct) / direct))
    verdict(3, worst_rt < 1e-6 and worst_pv < 1e-6,
            f"max round-trip error {worst_rt:.2e}, max Parseval error {worst_pv:.2e}")


def test_04_mixture_model(verdict):
    cfg = StftConfig(16, 4, 16)
    worst_step, worst_norm, zero_ok = math.inf, 0.0, True
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = _cplx(r, 3, 80, 9)
        act = r.random((2, 80)) < 0.6
        act[0, :5] = True
        m = fit_guided_cacgmm(Spectrogram(x, cfg), ActivityGrid(("A", "B"), act, cfg, "A"),
                              CacgmmConfig(iterations=20))
        worst_step = min(worst_step, float(np.min(np.diff(m.log_likelihood))))
        worst_norm = max(worst_norm, float(np.max(np.abs(m.gamma.sum(axis=0) - 1))))
        zero_ok &= all(np.all(m.gamma[k][~act[k]] == 0.0) for k in range(2))
    # two sources on orthogonal channels, each active for half the frames
    r = np.random.default_rng(0)
    x = np.zeros((2, 200, 9), complex)
    s = _cplx(r, 200, 9)
    x[0, :100], x[1, 100:] = s[:100], s[100:]
    x += 0.01 * _cplx(r, *x.shape)
    act = np.zeros((2, 200), bool)
    act[0, :100], act[1, 100:] = True, True
    m = fit_guided_cacgmm(Spectrogram(x, cfg), ActivityGrid(("A", "B"), act, cfg, "A"))
    acc = min(m.gamma[0, :100].mean(), m.gamma[1, 100:].mean())
    ok = worst_step >= -1e-6 and zero_ok and worst_norm <= 1e-6 and acc >= 0.9
    verdict(4, ok, f"smallest objective step {worst_step:.2e}, guided zeros {zero_ok}, "
                   f"normalisation error {worst_norm:.1e}, orthogonal accuracy {acc:.3f}")


def test_05_mvdr_distortionless(verdict):
    worst = 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        dim = 2 + seed % 5
        ref = seed % dim
        d = _cplx(r, 8, dim)
        a = _cplx(r, 8, dim, dim)
        phi_n = a @ a.conj().swapaxes(-1, -2) + 0.1 * np.eye(dim)
        w = mvdr_souden(np.einsum("fi,fj->fij", d, d.conj()), phi_n, ref).w
        resp = np.sum(w.conj() * d / d[:, ref:ref + 1], axis=-1)
        worst = max(worst, float(np.max(np.abs(resp - 1))))
    hand = mvdr_souden(np.ones((1, 2, 2)), np.eye(2)[None], 0).w[0]
    ok = worst <= 1e-6 and np.allclose(hand, [0.5, 0.5], atol=1e-12)
    verdict(5, ok, f"max |w^H d/d_ref - 1| = {worst:.1e}, hand example w = {np.round(hand, 12)}")


def _delay(a, d):
    out = np.zeros_like(a)
    out[d:] = a[:-d]
    return out


def test_06_wpe(verdict, speech):
    r = np.random.default_rng(6)
    ratios = []
    for _ in range(10):
        x = _cplx(r, 2, 400, 33)
        y = wpe(Spectrogram(x, StftConfig(64, 16, 64))).data
        ratios.append(10 * np.log10(np.sum(np.abs(y) ** 2) / np.sum(np.abs(x) ** 2)))
    # speech plus a copy three frames (delay + 1) later at -6 dB
    s = stft(speech).data[0]
    late = _delay(s, 3)
    out = wpe(Spectrogram((s + 0.5 * late)[None])).data[0]
    den = np.sum(np.abs(late) ** 2, axis=0)
    g = np.sum(out * late.conj(), axis=0) / np.maximum(den, 1e-30)
    echo_db = 10 * np.log10(np.sum(0.25 * den) / np.sum(np.abs(g) ** 2 * den))
    big = _cplx(r, 4, 626, 513)
    t0 = time.perf_counter()
    wpe(Spectrogram(big))
    elapsed = time.perf_counter() - t0
    ok = max(map(abs, ratios)) < 1.0 and echo_db >= 10.0 and elapsed < 30.0
    verdict(6, ok, f"white-noise change max {max(map(abs, ratios)):.2f} dB, echo reduction "
                   f"{echo_db:.1f} dB (need 10), 4 ch x 10 s runtime {elapsed:.1f} s")


def test_07_image_method(verdict):
    anechoic = RoomSpec(5.0, 6.0, 3.0, (0.0,) * 6, (1.0, 1.0, 1.5), (2.715, 1.0, 1.5))
    h = simulate_rir(anechoic, 16000, 400).samples
    single = np.count_nonzero(np.abs(h) > 1e-12) == 1
    peak = int(np.argmax(np.abs(h)))
    worst_rise, slopes = -np.inf, []
    for seed in range(50):
        env = rir_energy_envelope(simulate_rir(sample_room(seed), 16000, 8000))
        running = np.maximum.accumulate(env)
        worst_rise = max(worst_rise, float(np.max(env[2:] - running[1:-1])))
        tail = env[2:]
        slopes.append(np.polyfit(np.arange(tail.size), tail, 1)[0])
    ok = single and abs(peak - 80) <= 1 and worst_rise <= 1.0 and max(slopes) < 0
    verdict(7, ok, f"direct-only {single}, peak at {peak}, worst rise over running peak "
                   f"{worst_rise:.2f} dB, steepest-to-flattest tail slope "
                   f"{min(slopes):.2f}..{max(slopes):.2f} dB/block")


def test_08_mixer(verdict, speech):
    r = np.random.default_rng(8)
    bg = Waveform(speech.samples[::-1].copy(), 16000)
    rooms = [simulate_rir(sample_room(k), 16000, 4000) for k in range(4)]
    cfg = MixConfig((5.0, 12.0), pad_secs=4.0)
    worst = 0.0
    for k in range(100):
        _, p, b, snr = mix_background_speaker(speech, bg, rooms[k % 4], rooms[(k + 1) % 4], cfg,
                                              r, return_components=True)
        measured = 10 * np.log10(np.mean(p ** 2) / np.mean(b ** 2))
        worst = max(worst, abs(measured - snr))
    # padding and looping: a constant background of 5 samples padded to 25
    fs = 10
    _, _, b, _ = mix_background_speaker(Waveform(np.ones(60), fs), Waveform(np.ones(5), fs),
                                        Waveform([1.0], fs), Waveform([1.0], fs),
                                        MixConfig((0.0, 0.0), pad_secs=1.0), r, offset=0,
                                        return_components=True)
    pattern = (b > 0).astype(int)
    expected = ((np.arange(60) % 25 >= 10) & (np.arange(60) % 25 < 15)).astype(int)
    ok = worst <= 0.1 and np.array_equal(pattern, expected)
    verdict(8, ok, f"max SNR deviation {worst:.2e} dB over 100 draws, "
                   f"pad/loop pattern {'matches' if np.array_equal(pattern, expected) else 'differs'}")


def test_09_end_to_end(verdict, speech):
    t0 = time.perf_counter()
    gains, pf_ok = [], True
    for seed in range(10):
        sc = two_speaker_scene(speech, interferer_from(speech, seed), seed)
        cut, grid, core = cut_segment_with_context(sc.manifest, "tgt", 15.0, sc.audio)
        lo = int(round(sc.manifest.segment("tgt").start * 16000)) - core.start_sample
        span = slice(lo + core.start_sample, lo + core.end_sample)
        ref = sc.early[:, span]
        mix = sc.audio.data[:, span]
        best_in = max(si_sdr(m, e) for m, e in zip(mix, ref))
        gss = enhance_segment_detailed(cut, grid, core, PipelineConfig("gss"))
        pf = enhance_segment_detailed(cut, grid, core, PipelineConfig("gss_postfilter"))
        pf_ok &= bool(np.all(np.abs(pf.spectrum) <= np.abs(gss.spectrum) + 1e-12))
        gains.append(si_sdr(gss.waveform.samples, ref[gss.ref_channel]) - best_in)
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(gains))
    ok = mean >= 5.0 and pf_ok and elapsed < 600
    verdict(9, ok, f"mean SI-SDR gain {mean:.2f} dB (need 5; per scene "
                   f"{', '.join(f'{g:.1f}' for g in gains)}), post-filter bound {pf_ok}, "
                   f"{elapsed:.0f} s")


def test_10_determinism(verdict, speech):
    room = sample_room(10)
    rir_same = np.array_equal(simulate_rir(room, 16000, 4000).samples,
                              simulate_rir(sample_room(10), 16000, 4000).samples)
    cfg = MixConfig(seed=10)
    h = simulate_rir(room, 16000, 2000)
    bg = Waveform(speech.samples[::-1].copy(), 16000)
    mix_same = np.array_equal(mix_background_speaker(speech, bg, h, h, cfg).samples,
                              mix_background_speaker(speech, bg, h, h, cfg).samples)
    entries = [SegmentAnnotation(f"u{k}", "s", 0.0, 3600.0 * (1 + k % 3), "g") for k in range(60)]
    sub_same = subset_by_hours(entries, 40, seed=10) == subset_by_hours(entries, 40, seed=10)
    sc = two_speaker_scene(speech, interferer_from(speech, 1), 4, lead_secs=1.0, rir_len=2000)
    cut, grid, core = cut_segment_with_context(sc.manifest, "tgt", 1.0, sc.audio)
    outs = [enhance_segment_detailed(cut, grid, core, PipelineConfig(v)).waveform.samples
            for v in ("gss", "gss", "cwmwf_cban", "cwmwf_cban")]
    enh_same = np.array_equal(outs[0], outs[1]) and np.array_equal(outs[2], outs[3])
    ok = rir_same and mix_same and sub_same and enh_same
    verdict(10, ok, f"RIR {rir_same}, mixture {mix_same}, subset {sub_same}, enhancement {enh_same}")


def test_11_subset_by_hours(verdict):
    r = np.random.default_rng(11)
    entries = []
    for g in ("chime6/mdm", "chime6/sdm", "dipco", "mixer6"):
        acc, k = 0.0, 0
        while acc < 120 * 3600:
            d = float(r.uniform(1.0, 20.0))
            entries.append(SegmentAnnotation(f"{g}-{k}", "spk", 0.0, d, g))
            acc += d
            k += 1
    chosen = subset_by_hours(entries, 80, seed=11)
    worst = 0.0
    ok = True
    for g in {e.group_key for e in entries}:
        hours = total_hours([e for e in chosen if e.group_key == g])
        longest = max(e.duration for e in entries if e.group_key == g) / 3600
        ok &= 80.0 <= hours < 80.0 + longest
        worst = max(worst, (hours - 80.0) * 3600)
    verdict(11, ok, f"every group within [80 h, 80 h + one utterance), max overshoot {worst:.1f} s")
