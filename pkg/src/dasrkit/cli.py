"""Command-line entry points: enhancement, RIR simulation, mixing, fusion and scoring."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment, fusion
from .audio import Waveform, ensure_rate, read_wav, write_wav
from .manifest import load_session_manifest
from .pipeline import PipelineConfig, enhance_manifest


def _cmd_enhance(args) -> int:
    m = load_session_manifest(args.manifest)
    cfg = PipelineConfig(variant=args.variant, context_secs=args.context_secs,
                         keep_fraction=args.keep_fraction, taps=args.taps, seed=args.seed)
    report = enhance_manifest(m, cfg, args.out, workers=args.workers)
    failed = [e["utt_id"] for e in report.entries if e["status"] != "ok"]
    print(f"{len(report.entries) - len(failed)} of {len(report.entries)} segments enhanced; "
          f"report in {Path(args.out) / 'report.jsonl'}")
    if failed:
        print(f"failed: {' '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def _cmd_simulate_rir(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rir_len = int(round(args.len_ms * args.fs / 1000))
    with open(out / "rooms.jsonl", "w", encoding="utf-8") as fh:
        for k in range(args.count):
            room = augment.sample_room(np.random.default_rng([args.seed, k]))
            rir = augment.simulate_rir(room, args.fs, rir_len)
            name = f"rir_{k:05d}.wav"
            write_wav(out / name, rir, bit_depth=32)
            fh.write(json.dumps({"file": name, "dims": room.dims, "beta": room.beta,
                                 "source_pos": room.source_pos, "mic_pos": room.mic_pos}) + "\n")
    print(f"wrote {args.count} impulse responses to {out}")
    return 0


def _mono(path, rate=None) -> Waveform:
    w = read_wav(path)
    w = ensure_rate(w, rate) if rate else w
    return Waveform(w.data.mean(axis=0), w.sample_rate)


def _cmd_augment_mix(args) -> int:
    rng = np.random.default_rng(args.seed)
    primary = _mono(args.primary)
    fs = primary.sample_rate
    background = _mono(args.background, fs)
    rir_len = int(round(args.rir_ms * fs / 1000))
    rirs = []
    for given in (args.rir_primary, args.rir_background):
        if given:
            rirs.append(_mono(given, fs))
        else:
            rirs.append(augment.simulate_rir(augment.sample_room(rng), fs, rir_len))
    cfg = augment.MixConfig((args.snr_low, args.snr_high), args.pad_secs, args.codec_prob,
                            args.seed)
    mix, _, _, snr = augment.mix_background_speaker(primary, background, rirs[0], rirs[1], cfg,
                                                    rng, return_components=True)
    codec = "external" if args.codec_cmd else args.codec
    mix = augment.apply_codec(mix, codec, cfg, rng, args.codec_cmd)
    peak = np.max(np.abs(mix.samples))
    if peak > 1:
        mix = Waveform(mix.samples / peak, fs)
    write_wav(args.out, mix)
    print(f"mixed at {snr:.2f} dB SNR -> {args.out}")
    return 0


def _cmd_fuse_hystoc(args) -> int:
    records = []
    for nb in fusion.read_nbest(args.nbest):
        post = fusion.posteriors_from_scores(nb, args.temperature, args.scores_are_probs)
        cn = fusion.hystoc_confusion_network(nb.tokens, post)
        records.extend(fusion.cn_to_ctm(cn, nb.utt_id))
    _emit(fusion.format_ctm(records), args.out)
    return 0


def _cmd_fuse_rover(args) -> int:
    cfg = fusion.RoverConfig(args.alpha, args.null_conf)
    systems = [fusion.read_ctm(p) for p in args.ctm]
    utts = []
    for s in systems:
        utts.extend(u for u in s if u not in utts)
    records = []
    for utt in utts:
        inputs = [[(r.token, r.confidence) for r in s.get(utt, [])] for s in systems]
        for k, (tok, conf) in enumerate(fusion.rover(inputs, cfg)):
            records.append(fusion.CtmRecord(utt, k, tok, conf))
    _emit(fusion.format_ctm(records), args.out)
    return 0


def _cmd_score(args) -> int:
    ref = fusion.read_trn(args.ref)
    hyp = fusion.read_trn(args.hyp)
    total = fusion.score_transcripts(ref, hyp).total()
    print(f"WER {100 * total.wer:.2f}% [ {total.errors} / {total.ref_length}, "
          f"{total.insertions} ins, {total.deletions} del, {total.substitutions} sub ]")
    return 0


def _emit(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dasrkit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("enhance", help="enhance every segment of a session manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--variant", default="gss", choices=["gss", "gss-postfilter", "cwmwf-cban"])
    e.add_argument("--context-secs", type=float, default=None,
                   help="context on each side (default 15, or 1 for cwmwf-cban)")
    e.add_argument("--keep-fraction", type=float, default=0.8)
    e.add_argument("--taps", type=int, default=5)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_enhance)

    r = sub.add_parser("simulate-rir", help="impulse responses of randomly sampled rooms")
    r.add_argument("--count", type=int, required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--fs", type=int, default=16000)
    r.add_argument("--len-ms", type=float, default=500.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_simulate_rir)

    a = sub.add_parser("augment", help="data augmentation")
    asub = a.add_subparsers(dest="augment_command", required=True)
    mix = asub.add_parser("mix", help="insert a reverberant background speaker")
    mix.add_argument("--primary", required=True)
    mix.add_argument("--background", required=True)
    mix.add_argument("--snr-low", type=float, default=5.0)
    mix.add_argument("--snr-high", type=float, default=12.0)
    mix.add_argument("--pad-secs", type=float, default=4.0)
    mix.add_argument("--codec-prob", type=float, default=1 / 7)
    mix.add_argument("--codec", default="g711_ulaw", choices=["g711_ulaw", "g711_alaw"])
    mix.add_argument("--codec-cmd", default=None,
                     help="external codec command reading and writing WAV on stdin/stdout")
    mix.add_argument("--rir-primary", default=None)
    mix.add_argument("--rir-background", default=None)
    mix.add_argument("--rir-ms", type=float, default=500.0,
                     help="length of simulated RIRs when none are given")
    mix.add_argument("--seed", type=int, default=0)
    mix.add_argument("--out", required=True)
    mix.set_defaults(func=_cmd_augment_mix)

    f = sub.add_parser("fuse", help="hypothesis fusion")
    fsub = f.add_subparsers(dest="fuse_command", required=True)
    h = fsub.add_parser("hystoc", help="N-best list to CTM with confusion-network confidences")
    h.add_argument("--nbest", required=True)
    h.add_argument("--temperature", type=float, default=1.0)
    h.add_argument("--scores-are-probs", action="store_true")
    h.add_argument("--out", default="-")
    h.set_defaults(func=_cmd_fuse_hystoc)
    rv = fsub.add_parser("rover", help="combine CTMs by voting")
    rv.add_argument("--alpha", type=float, default=0.8)
    rv.add_argument("--null-conf", type=float, default=0.4)
    rv.add_argument("ctm", nargs="+")
    rv.add_argument("--out", default="-")
    rv.set_defaults(func=_cmd_fuse_rover)

    s = sub.add_parser("score", help="word error rate of TRN transcripts")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.set_defaults(func=_cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"dasrkit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
