"""Error-rate scoring and the noise-sweep experiment.

WER tokenizes hypotheses on single spaces; CER scores characters with spaces
excluded from the reference length. The alignment tie-break prefers
substitution over deletion over insertion, which makes reports deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import decoder as dec
from .ctc import LogProbLattice
from .features import (
    NOISE_KINDS,
    CorpusConfig,
    UtteranceRecord,
    log_mel,
    make_noise,
    measured_snr_db,
    mix_at_snr,
    normalize_per_utterance,
    resample_frames,
    synthesize_utterance,
)
from .models import RecognitionModel, CharRnnLm
from .numerics import child_seed, seeded_rng


@dataclass(frozen=True)
class ErrorReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        return self.errors / self.ref_len

    def __add__(self, other: "ErrorReport") -> "ErrorReport":
        return ErrorReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_len + other.ref_len,
        )


def edit_distance_report(reference: list, hypothesis: list) -> ErrorReport:
    """Minimal S+D+I alignment via dynamic programming.

    On cost ties the backtrace prefers substitution, then deletion, then
    insertion, so the S/D/I split is deterministic.
    """
    n, m = len(reference), len(hypothesis)
    if n == 0:
        raise ValueError("empty reference")
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (
            reference[i - 1] != hypothesis[j - 1]
        ):
            s += reference[i - 1] != hypothesis[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorReport(s, d, ins, n)


def wer_report(reference: str, hypothesis: str) -> ErrorReport:
    return edit_distance_report(reference.split(" "), hypothesis.split(" ") if hypothesis else [])


def cer_report(reference: str, hypothesis: str) -> ErrorReport:
    """Character-level alignment over all symbols; spaces excluded from the
    reference length (errors on spaces still count)."""
    rep = edit_distance_report(list(reference), list(hypothesis))
    ref_len = len(reference.replace(" ", ""))
    return ErrorReport(rep.substitutions, rep.deletions, rep.insertions, max(ref_len, 1))


# ---------------------------------------------------------------------------
# decoding pipelines


def max_output_len(num_frames: int, fps: float, config: CorpusConfig) -> int:
    """Length cap: 1.5x the frame budget divided by the shortest symbol duration."""
    min_frames = max(config.symbol_duration_s * (1.0 - config.duration_jitter) * fps, 1.0)
    return max(int(math.ceil(1.5 * num_frames / min_frames)), 1)


def audio_features(wav, fps: float = 100.0):
    feats = normalize_per_utterance(log_mel(wav))
    if fps != 100.0:
        feats = resample_frames(feats, fps)
    return feats


def visual_features(vis, fps: float = 50.0):
    return resample_frames(vis, fps)


def prepare_streams(model: RecognitionModel, wav, vis, config: CorpusConfig):
    """Feature extraction matched to the model kind; fusion runs at 50 fps."""
    kind = model.config.kind
    if kind == "audio":
        return audio_features(wav, 100.0), None
    if kind == "visual":
        return None, visual_features(vis, 50.0)
    audio = audio_features(wav, 50.0)
    visual = visual_features(vis, 50.0)
    # window/hop rounding can leave the streams a frame apart; align them
    t = min(audio.num_frames, visual.num_frames)
    audio = replace(audio, frames=audio.frames[:t])
    visual = replace(visual, frames=visual.frames[:t])
    return audio, visual


def decode_utterance(
    model: RecognitionModel,
    wav,
    vis,
    config: CorpusConfig,
    cfg: dec.BeamConfig,
    lm: CharRnnLm | None = None,
) -> dec.DecodeResult:
    audio, visual = prepare_streams(model, wav, vis, config)
    enc = model.encode(audio, visual)
    lattice = LogProbLattice(model.lattice_log_probs(enc).detach().numpy(), enc.fps)
    stream = audio if audio is not None else visual
    cap = min(max_output_len(stream.num_frames, stream.fps, config), lattice.num_frames)
    results = dec.beam_search(enc, lattice, model.decoder, replace(cfg, max_output_len=cap), lm)
    return results[0]


def decode_late_fusion(
    model_a: RecognitionModel,
    model_v: RecognitionModel,
    wav,
    vis,
    config: CorpusConfig,
    cfg_a: dec.BeamConfig,
    cfg_v: dec.BeamConfig,
    gamma: float,
    lm: CharRnnLm | None = None,
    rescore: bool = False,
) -> dec.DecodeResult:
    audio = audio_features(wav, 100.0)
    visual = visual_features(vis, 50.0)
    enc_a = model_a.encode(audio, None)
    enc_v = model_v.encode(None, visual)
    lat_a = LogProbLattice(model_a.lattice_log_probs(enc_a).detach().numpy(), enc_a.fps)
    lat_v = LogProbLattice(model_v.lattice_log_probs(enc_v).detach().numpy(), enc_v.fps)
    cap_a = min(max_output_len(audio.num_frames, audio.fps, config), lat_a.num_frames)
    cap_v = min(max_output_len(visual.num_frames, visual.fps, config), lat_v.num_frames)
    cfg_a = replace(cfg_a, max_output_len=cap_a)
    cfg_v = replace(cfg_v, max_output_len=cap_v)
    search = dec.late_rescore if rescore else dec.late_fusion_search
    results = search(
        (enc_a, lat_a), (enc_v, lat_v), model_a.decoder, model_v.decoder,
        cfg_a, cfg_v, gamma, lm, lm,
    )
    return results[0]


# ---------------------------------------------------------------------------
# noise sweep


@dataclass(frozen=True)
class SweepResult:
    noise_kind: str
    snr_db: float
    system: str  # "A" | "V" | "AV-early" | "AV-late"
    wer: float
    cer: float
    measured_snr_db: float


@dataclass(frozen=True)
class SweepSystems:
    audio: RecognitionModel | None = None
    visual: RecognitionModel | None = None
    av_early: RecognitionModel | None = None
    lm: CharRnnLm | None = None


def evaluate_system(
    system: str,
    systems: SweepSystems,
    utterances,
    config: CorpusConfig,
    cfg_audio: dec.BeamConfig,
    cfg_visual: dec.BeamConfig,
    gamma: float = 0.85,
) -> tuple[ErrorReport, ErrorReport]:
    """Aggregate (WER, CER) of one system over (record, wav, vis) triples."""
    wer = ErrorReport(0, 0, 0, 0)
    cer = ErrorReport(0, 0, 0, 0)
    for record, wav, vis in utterances:
        if system == "A":
            res = decode_utterance(systems.audio, wav, vis, config, cfg_audio, systems.lm)
            hyp = res.text(systems.audio.alphabet)
        elif system == "V":
            res = decode_utterance(systems.visual, wav, vis, config, cfg_visual, systems.lm)
            hyp = res.text(systems.visual.alphabet)
        elif system == "AV-early":
            res = decode_utterance(systems.av_early, wav, vis, config, cfg_audio, systems.lm)
            hyp = res.text(systems.av_early.alphabet)
        elif system == "AV-late":
            res = decode_late_fusion(
                systems.audio, systems.visual, wav, vis, config, cfg_audio, cfg_visual,
                gamma, systems.lm,
            )
            hyp = res.text(systems.audio.alphabet)
        else:
            raise ValueError(f"unknown system {system!r}")
        wer = wer + wer_report(record.labels, hyp)
        cer = cer + cer_report(record.labels, hyp)
    return wer, cer


def noise_sweep(
    systems: SweepSystems,
    records: list[UtteranceRecord],
    config: CorpusConfig,
    cfg_audio: dec.BeamConfig,
    cfg_visual: dec.BeamConfig,
    snrs: tuple[float, ...] = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0),
    noise_kinds: tuple[str, ...] = ("white", "pink", "babble", "tonal"),
    sweep_seed: int = 303,
    which: tuple[str, ...] = ("A", "V", "AV-early"),
) -> list[SweepResult]:
    """Fig.-3-style grid: corrupt test audio per (kind, snr), decode each system.

    The visual stream never sees audio noise, so V rows are computed once per
    kind and replicated across SNRs (constant by construction).
    """
    for name, model in (("A", systems.audio), ("V", systems.visual), ("AV-early", systems.av_early)):
        if name in which and model is None:
            raise ValueError(f"missing checkpoint for system {name}")
    if "AV-late" in which and (systems.audio is None or systems.visual is None):
        raise ValueError("AV-late needs both A and V checkpoints")
    clean = [
        (r, *synthesize_utterance(r.labels, config, r.seed)) for r in records
    ]
    rows: list[SweepResult] = []
    for kind in noise_kinds:
        v_row = None
        if "V" in which:
            wer, cer = evaluate_system("V", systems, clean, config, cfg_audio, cfg_visual)
            v_row = (wer.rate, cer.rate)
        # one noise realization per (kind, utterance), rescaled to every SNR:
        # paired comparisons keep the WER-vs-SNR curves from inverting on
        # sampling noise alone
        noises = []
        for i, (r, wav, vis) in enumerate(clean):
            rng = seeded_rng(child_seed(sweep_seed, NOISE_KINDS.index(kind), i))
            noises.append(make_noise(kind, len(wav.samples), wav.sample_rate, rng, config))
        for snr in snrs:
            corrupted = []
            measured = []
            for (r, wav, vis), noise in zip(clean, noises):
                mixed = mix_at_snr(wav, noise, snr)
                measured.append(measured_snr_db(wav, mixed))
                corrupted.append((r, mixed, vis))
            snr_meas = float(np.mean(measured))
            for system in which:
                if system == "V":
                    rows.append(SweepResult(kind, snr, "V", v_row[0], v_row[1], snr_meas))
                    continue
                wer, cer = evaluate_system(system, systems, corrupted, config, cfg_audio, cfg_visual)
                rows.append(SweepResult(kind, snr, system, wer.rate, cer.rate, snr_meas))
    rows.sort(key=lambda r: (r.noise_kind, r.snr_db, r.system))
    return rows


def write_sweep_csv(path, rows: list[SweepResult]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["noise", "snr_db", "system", "wer", "cer"])
        for r in rows:
            w.writerow([r.noise_kind, r.snr_db, r.system, f"{r.wer:.6f}", f"{r.cer:.6f}"])
