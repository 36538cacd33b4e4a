"""Command-line entry points: corpus generation, training, decoding, scoring,
and the noise-robustness sweep."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .checkpoint import load_lm, load_model, save_lm, save_model
from .decoder import BeamConfig, write_decode_records
from .features import (
    NOISE_KINDS,
    CorpusConfig,
    generate_corpus,
    make_noise,
    mix_at_snr,
    read_manifest,
    synthesize_utterance,
    write_manifest,
)
from .harness import (
    ErrorReport,
    SweepSystems,
    cer_report,
    decode_late_fusion,
    decode_utterance,
    noise_sweep,
    wer_report,
    write_sweep_csv,
)
from .lm_corpus import build_lm_corpus, train_lm
from .models import LmConfig, ModelConfig, build_model
from .numerics import child_seed, seeded_rng
from .training import CLEAN, TrainConfig, TrainingError, train


def _parse_snr(text: str) -> float:
    return CLEAN if text == "clean" else float(text)


def _parse_snr_list(text: str) -> tuple[float, ...]:
    return tuple(_parse_snr(v) for v in text.split(",") if v)


def _corpus_config(args) -> CorpusConfig:
    return CorpusConfig(min_len=args.min_len, max_len=args.max_len)


def _add_corpus_flags(p):
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=8)


def _add_beam_flags(p):
    p.add_argument("--ctc-weight", type=float, default=0.1, help="decoding CTC weight")
    p.add_argument("--lm-weight", type=float, default=0.0, help="shallow-fusion LM weight")
    p.add_argument("--beam", type=int, default=20, help="beam width")
    p.add_argument("--fusion", choices=("early", "late", "late-rescore"), default="early")
    p.add_argument("--gamma", type=float, default=0.85, help="audio weight in late fusion")


def cmd_gen_corpus(args) -> int:
    config = _corpus_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_records = generate_corpus(config, args.n_train, args.seed, prefix="train")
    test_records = generate_corpus(config, args.n_test, child_seed(args.seed, 1), prefix="test")
    write_manifest(out / "train.tsv", train_records)
    write_manifest(out / "test.tsv", test_records)
    print(f"wrote {len(train_records)} train / {len(test_records)} test utterances to {out}")
    return 0


def cmd_train(args) -> int:
    config = _corpus_config(args)
    records = read_manifest(args.manifest)
    val_records = read_manifest(args.val_manifest) if args.val_manifest else []
    model_cfg = ModelConfig(
        kind=args.kind, input_dim=80, visual_dim=config.visual_dim,
        enc_hidden=args.enc_hidden, enc_layers=args.enc_layers,
    )
    model = build_model(config.alphabet, model_cfg, args.seed)
    cfg = TrainConfig(
        ctc_alpha=args.ctc_weight_train,
        label_smoothing=args.label_smoothing,
        epochs=args.epochs,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        learning_rate=args.learning_rate,
        augment_snrs=_parse_snr_list(args.augment_snrs),
        seed=args.seed,
    )
    train(records, val_records, model, cfg, config, metrics_path=args.metrics, log=print)
    save_model(args.model_out, model)
    print(f"saved model to {args.model_out}")
    return 0


def cmd_train_lm(args) -> int:
    config = _corpus_config(args)
    corpus = build_lm_corpus(
        args.manifest, config.alphabet, seed=args.seed, val_fraction=args.val_fraction
    )
    lm_cfg = LmConfig(hidden=args.hidden, embed_dim=args.embed_dim)
    result = train_lm(
        corpus, config.alphabet, lm_cfg, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed,
        learning_rate=args.learning_rate, log=print,
    )
    save_lm(args.lm_out, result.lm, lm_cfg)
    print(f"saved language model to {args.lm_out}")
    return 0


def _corrupt(wav, args, i):
    if args.noise is None or args.snr is None or math.isinf(args.snr):
        return wav
    rng = seeded_rng(child_seed(args.seed, NOISE_KINDS.index(args.noise), i))
    noise = make_noise(args.noise, len(wav.samples), wav.sample_rate, rng)
    return mix_at_snr(wav, noise, args.snr)


def cmd_decode(args) -> int:
    config = _corpus_config(args)
    model = load_model(args.model)
    lm = load_lm(args.lm) if args.lm else None
    cfg = BeamConfig(ctc_weight=args.ctc_weight, lm_weight=args.lm_weight, beam_width=args.beam)
    records = read_manifest(args.manifest)
    visual_model = load_model(args.visual_model) if args.visual_model else None
    if args.fusion in ("late", "late-rescore") and visual_model is None:
        raise ValueError(f"--fusion {args.fusion} requires --visual-model")
    rows = []
    wer = ErrorReport(0, 0, 0, 0)
    cer = ErrorReport(0, 0, 0, 0)
    for i, record in enumerate(records):
        wav, vis = synthesize_utterance(record.labels, config, record.seed)
        wav = _corrupt(wav, args, i)
        if args.fusion in ("late", "late-rescore"):
            res = decode_late_fusion(
                model, visual_model, wav, vis, config, cfg, cfg, args.gamma, lm,
                rescore=args.fusion == "late-rescore",
            )
        else:
            res = decode_utterance(model, wav, vis, config, cfg, lm)
        text = res.text(model.alphabet)
        rows.append((record.utt_id, text, res))
        wer = wer + wer_report(record.labels, text)
        cer = cer + cer_report(record.labels, text)
    if args.out:
        write_decode_records(args.out, rows)
    else:
        for utt_id, text, res in rows:
            print(f"{utt_id}\t{text}\t{res.score:.6f}")
    print(f"WER {wer.rate:.4f} CER {cer.rate:.4f} over {len(records)} utterances")
    return 0


def _read_transcripts(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" in line:
                utt_id, text = line.split("\t", 1)
            else:
                utt_id, text = str(i), line
            pairs.append((utt_id, text))
    return pairs


def cmd_eval(args) -> int:
    refs = dict(_read_transcripts(args.ref))
    hyps = dict(_read_transcripts(args.hyp))
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise ValueError(f"hypotheses missing for {len(missing)} utterances, e.g. {missing[0]!r}")
    wer = ErrorReport(0, 0, 0, 0)
    cer = ErrorReport(0, 0, 0, 0)
    for utt_id, ref in refs.items():
        wer = wer + wer_report(ref, hyps[utt_id])
        cer = cer + cer_report(ref, hyps[utt_id])
    print(f"WER {wer.rate:.4f} CER {cer.rate:.4f} over {len(refs)} utterances")
    return 0


def cmd_sweep(args) -> int:
    config = _corpus_config(args)
    systems = SweepSystems(
        audio=load_model(args.audio_model) if args.audio_model else None,
        visual=load_model(args.visual_model) if args.visual_model else None,
        av_early=load_model(args.av_model) if args.av_model else None,
        lm=load_lm(args.lm) if args.lm else None,
    )
    records = read_manifest(args.manifest)
    cfg_a = BeamConfig(ctc_weight=args.ctc_weight, lm_weight=args.lm_weight, beam_width=args.beam)
    cfg_v = BeamConfig(
        ctc_weight=args.ctc_weight, lm_weight=args.lm_weight_visual, beam_width=args.beam
    )
    which = tuple(s for s in args.systems.split(",") if s)
    kinds = tuple(k for k in args.noise.split(",") if k)
    rows = noise_sweep(
        systems, records, config, cfg_a, cfg_v,
        snrs=_parse_snr_list(args.snr), noise_kinds=kinds,
        sweep_seed=args.seed, which=which,
    )
    write_sweep_csv(args.out, rows)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avasr", description="Audio-visual speech recognition toolkit (toy scale)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus and write manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a recognition model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--model-out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--kind", choices=("audio", "visual", "av-early"), default="audio")
    p.add_argument("--ctc-weight-train", type=float, default=0.2,
                   help="multi-task CTC weight during training")
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--optimizer", choices=("adadelta", "sgd"), default="adadelta")
    p.add_argument("--learning-rate", type=float, default=1.0)
    p.add_argument("--augment-snrs", default="0,5,10,clean",
                   help="comma-separated SNR options; 'clean' keeps the audio unchanged")
    p.add_argument("--enc-hidden", type=int, default=32)
    p.add_argument("--enc-layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-lm", help="train the character language model")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--lm-out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("decode", help="decode a manifest with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--visual-model", help="second stream for late fusion")
    p.add_argument("--lm")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--snr", type=_parse_snr, help="corrupt audio at this SNR (dB)")
    p.add_argument("--noise", choices=NOISE_KINDS)
    p.add_argument("--seed", type=int, default=0)
    _add_beam_flags(p)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score hypothesis transcripts against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="noise-robustness WER/CER grid")
    p.add_argument("--audio-model")
    p.add_argument("--visual-model")
    p.add_argument("--av-model")
    p.add_argument("--lm")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--systems", default="A,V,AV-early")
    p.add_argument("--snr", default="-5,0,5,10,15,20", help="comma-separated SNR levels (dB)")
    p.add_argument("--noise", default=",".join(NOISE_KINDS), help="comma-separated noise kinds")
    p.add_argument("--lm-weight-visual", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=303)
    _add_beam_flags(p)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, TrainingError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
