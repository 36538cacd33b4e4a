"""Joint CTC/attention beam search with shallow LM fusion and late audio-visual fusion.

The beam is label-synchronous: every live hypothesis is extended by every
label and eos each step; extensions are ranked by the joint score
lambda*logp_ctc + (1-lambda)*logp_att + beta*logp_lm. CTC scores partial
hypotheses by their exact prefix probability; eos is scored by the CTC
prefix-termination probability, so premature sentence ends are penalized
without an explicit coverage term. Ties break by lexicographic prefix order
for determinism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .alphabet import Alphabet
from .ctc import (
    CtcPrefixState,
    LogProbLattice,
    ctc_loss,
    ctc_prefix_extend_all,
    ctc_prefix_init,
    ctc_termination_score,
)
from .models import AttentionDecoder, AttentionState, CharRnnLm, EncoderStates, LmState

NEG_INF = -math.inf


@dataclass(frozen=True)
class BeamConfig:
    ctc_weight: float = 0.1  # lambda
    lm_weight: float = 0.0  # beta
    beam_width: int = 20
    max_output_len: int | None = None  # default: lattice length

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must be in [0, 1]")
        if self.lm_weight < 0.0:
            raise ValueError("lm_weight must be >= 0")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "early"  # "early" | "late" | "late-rescore"
    gamma: float = 0.85

    def __post_init__(self):
        if self.mode not in ("early", "late", "late-rescore"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")


@dataclass
class Hypothesis:
    prefix: tuple[int, ...]
    logp_ctc: float
    logp_att: float
    logp_lm: float
    ctc_state: CtcPrefixState
    att_state: AttentionState
    lm_state: LmState | None


def joint_score(h: Hypothesis, cfg: BeamConfig) -> float:
    """lambda*ctc + (1-lambda)*att + beta*lm; zero-weight terms are dropped
    so a -inf component under weight 0 cannot poison the score."""
    score = 0.0
    if cfg.ctc_weight > 0.0:
        score += cfg.ctc_weight * h.logp_ctc
    if cfg.ctc_weight < 1.0:
        score += (1.0 - cfg.ctc_weight) * h.logp_att
    if cfg.lm_weight > 0.0:
        score += cfg.lm_weight * h.logp_lm
    return score


@dataclass(frozen=True)
class DecodeResult:
    labels: tuple[int, ...]
    score: float
    breakdown: dict[str, float] = field(compare=False)

    def text(self, alphabet: Alphabet) -> str:
        return alphabet.decode(self.labels)


def _root_hypothesis(
    lattice: LogProbLattice, decoder: AttentionDecoder, enc: EncoderStates, lm: CharRnnLm | None
) -> Hypothesis:
    return Hypothesis(
        prefix=(),
        logp_ctc=0.0,
        logp_att=0.0,
        logp_lm=0.0,
        ctc_state=ctc_prefix_init(lattice),
        att_state=decoder.init_state(enc),
        lm_state=lm.init_state() if lm is not None else None,
    )


def _step_models(
    live: list[Hypothesis],
    enc: EncoderStates,
    decoder: AttentionDecoder,
    lm: CharRnnLm | None,
    alphabet: Alphabet,
):
    """Advance decoder and LM one step for every live hypothesis (batched)."""
    prev = [h.prefix[-1] if h.prefix else alphabet.sos_id for h in live]
    att_batch = AttentionState(
        torch.stack([h.att_state.alignment for h in live]),
        torch.stack([h.att_state.hidden for h in live]),
        torch.stack([h.att_state.cell for h in live]),
    )
    with torch.no_grad():
        att_new, att_logp = decoder.step_batch(att_batch, prev, enc)
        if lm is not None:
            lm_batch = LmState(
                torch.stack([h.lm_state.hidden for h in live]),
                torch.stack([h.lm_state.cell for h in live]),
            )
            lm_new, lm_logp = lm.step_batch(lm_batch, prev)
        else:
            lm_new, lm_logp = None, None
    return att_new, att_logp.numpy(), lm_new, lm_logp.numpy() if lm_logp is not None else None


def _extend(
    live: list[Hypothesis],
    enc: EncoderStates,
    lattice: LogProbLattice,
    decoder: AttentionDecoder,
    lm: CharRnnLm | None,
    alphabet: Alphabet,
) -> tuple[list[Hypothesis], list[Hypothesis]]:
    """All one-label extensions of the live set, plus eos-terminated hypotheses."""
    att_new, att_logp, lm_new, lm_logp = _step_models(live, enc, decoder, lm, alphabet)
    v = alphabet.num_labels
    eos_slot = alphabet.decoder_eos_slot
    extensions: list[Hypothesis] = []
    finished: list[Hypothesis] = []
    for i, h in enumerate(live):
        scores, r_nb, r_b = ctc_prefix_extend_all(h.ctc_state, lattice)
        att_state = AttentionState(att_new.alignment[i], att_new.hidden[i], att_new.cell[i])
        lm_state = LmState(lm_new.hidden[i], lm_new.cell[i]) if lm_new is not None else None
        for c in range(v):
            extensions.append(
                Hypothesis(
                    prefix=h.prefix + (c,),
                    logp_ctc=float(scores[c]),
                    logp_att=h.logp_att + float(att_logp[i, c]),
                    logp_lm=h.logp_lm + float(lm_logp[i, c]) if lm_logp is not None else 0.0,
                    ctc_state=CtcPrefixState(r_nb[:, c], r_b[:, c], c, float(scores[c])),
                    att_state=att_state,
                    lm_state=lm_state,
                )
            )
        finished.append(
            Hypothesis(
                prefix=h.prefix,
                logp_ctc=ctc_termination_score(h.ctc_state),
                logp_att=h.logp_att + float(att_logp[i, eos_slot]),
                logp_lm=h.logp_lm + float(lm_logp[i, eos_slot]) if lm_logp is not None else 0.0,
                ctc_state=h.ctc_state,
                att_state=att_state,
                lm_state=lm_state,
            )
        )
    return extensions, finished


def _result(h: Hypothesis, score: float, prefix_keys: dict[str, float] | None = None) -> DecodeResult:
    breakdown = {"ctc": h.logp_ctc, "att": h.logp_att, "lm": h.logp_lm}
    if prefix_keys:
        breakdown.update(prefix_keys)
    return DecodeResult(h.prefix, score, breakdown)


def beam_search(
    enc: EncoderStates,
    lattice: LogProbLattice,
    decoder: AttentionDecoder,
    cfg: BeamConfig,
    lm: CharRnnLm | None = None,
) -> list[DecodeResult]:
    """Label-synchronous joint beam search over one stream.

    Returns finished hypotheses sorted by joint score (descending), ties by
    lexicographic label order; at most beam_width results.
    """
    if enc.num_frames == 0:
        raise ValueError("empty encoder output")
    if cfg.lm_weight > 0.0 and lm is None:
        raise ValueError("lm_weight > 0 but no language model given")
    alphabet = decoder.alphabet
    max_len = cfg.max_output_len if cfg.max_output_len is not None else lattice.num_frames
    use_lm = lm if cfg.lm_weight > 0 else None
    live = [_root_hypothesis(lattice, decoder, enc, use_lm)]
    pool: list[tuple[float, tuple[int, ...], Hypothesis]] = []
    for step in range(max_len + 1):
        extensions, finished = _extend(live, enc, lattice, decoder, use_lm, alphabet)
        fin_scored = [(joint_score(f, cfg), f) for f in finished]
        if step == max_len:
            # length cap reached: only eos was allowed
            pool.extend((s, f.prefix, f) for s, f in fin_scored if s > NEG_INF)
            break
        # eos candidates compete with label extensions for beam slots, so
        # width=1 reduces exactly to a greedy argmax chain until eos
        candidates = [(s, h, True) for s, h in fin_scored]
        candidates += [(joint_score(h, cfg), h, False) for h in extensions]
        candidates = [c for c in candidates if c[0] > NEG_INF]
        candidates.sort(key=lambda c: (-c[0], c[1].prefix))
        live = []
        for s, h, is_finished in candidates[: cfg.beam_width]:
            if is_finished:
                pool.append((s, h.prefix, h))
            else:
                live.append(h)
        if not live:
            break
        best_finished = max((s for s, _, _ in pool), default=NEG_INF)
        if max(joint_score(h, cfg) for h in live) <= best_finished:
            break
    pool.sort(key=lambda e: (-e[0], e[1]))
    return [_result(h, s) for s, _, h in pool[: cfg.beam_width]]


# ---------------------------------------------------------------------------
# late fusion


@dataclass
class _LateHypothesis:
    audio: Hypothesis
    visual: Hypothesis

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.audio.prefix


def _late_score(h: _LateHypothesis, cfg_a: BeamConfig, cfg_v: BeamConfig, gamma: float) -> float:
    score = 0.0
    if gamma > 0.0:
        score += gamma * joint_score(h.audio, cfg_a)
    if gamma < 1.0:
        score += (1.0 - gamma) * joint_score(h.visual, cfg_v)
    return score


def _late_result(h: _LateHypothesis, score: float, cfg_a: BeamConfig, cfg_v: BeamConfig) -> DecodeResult:
    breakdown = {
        "audio_ctc": h.audio.logp_ctc,
        "audio_att": h.audio.logp_att,
        "audio_lm": h.audio.logp_lm,
        "audio_joint": joint_score(h.audio, cfg_a),
        "visual_ctc": h.visual.logp_ctc,
        "visual_att": h.visual.logp_att,
        "visual_lm": h.visual.logp_lm,
        "visual_joint": joint_score(h.visual, cfg_v),
    }
    return DecodeResult(h.audio.prefix, score, breakdown)


def late_fusion_search(
    audio: tuple[EncoderStates, LogProbLattice],
    visual: tuple[EncoderStates, LogProbLattice],
    decoder_a: AttentionDecoder,
    decoder_v: AttentionDecoder,
    cfg_a: BeamConfig,
    cfg_v: BeamConfig,
    gamma: float = 0.85,
    lm_a: CharRnnLm | None = None,
    lm_v: CharRnnLm | None = None,
) -> list[DecodeResult]:
    """One synchronized beam over gamma*joint_audio + (1-gamma)*joint_visual.

    Both streams keep their own CTC/attention/LM state; every candidate label
    is scored under both and combined per step.
    """
    if decoder_a.alphabet.labels != decoder_v.alphabet.labels:
        raise ValueError("audio and visual models use different alphabets")
    alphabet = decoder_a.alphabet
    enc_a, lat_a = audio
    enc_v, lat_v = visual
    if enc_a.num_frames == 0 or enc_v.num_frames == 0:
        raise ValueError("empty encoder output")
    use_lm_a = lm_a if cfg_a.lm_weight > 0 else None
    use_lm_v = lm_v if cfg_v.lm_weight > 0 else None
    max_len = min(
        cfg_a.max_output_len if cfg_a.max_output_len is not None else lat_a.num_frames,
        cfg_v.max_output_len if cfg_v.max_output_len is not None else lat_v.num_frames,
    )
    width = cfg_a.beam_width
    live = [
        _LateHypothesis(
            _root_hypothesis(lat_a, decoder_a, enc_a, use_lm_a),
            _root_hypothesis(lat_v, decoder_v, enc_v, use_lm_v),
        )
    ]
    pool: list[tuple[float, tuple[int, ...], _LateHypothesis]] = []
    for step in range(max_len + 1):
        ext_a, fin_a = _extend(
            [h.audio for h in live], enc_a, lat_a, decoder_a, use_lm_a, alphabet
        )
        ext_v, fin_v = _extend(
            [h.visual for h in live], enc_v, lat_v, decoder_v, use_lm_v, alphabet
        )
        fin = [_LateHypothesis(fa, fv) for fa, fv in zip(fin_a, fin_v)]
        fin_scored = [(_late_score(h, cfg_a, cfg_v, gamma), h) for h in fin]
        if step == max_len:
            pool.extend((s, h.prefix, h) for s, h in fin_scored if s > NEG_INF)
            break
        candidates = [(s, h, True) for s, h in fin_scored]
        candidates += [
            (_late_score(h, cfg_a, cfg_v, gamma), h, False)
            for h in (_LateHypothesis(a, v) for a, v in zip(ext_a, ext_v))
        ]
        candidates = [c for c in candidates if c[0] > NEG_INF]
        candidates.sort(key=lambda c: (-c[0], c[1].prefix))
        live = []
        for s, h, is_finished in candidates[:width]:
            if is_finished:
                pool.append((s, h.prefix, h))
            else:
                live.append(h)
        if not live:
            break
        best_finished = max((s for s, _, _ in pool), default=NEG_INF)
        if max(_late_score(h, cfg_a, cfg_v, gamma) for h in live) <= best_finished:
            break
    pool.sort(key=lambda e: (-e[0], e[1]))
    return [_late_result(h, s, cfg_a, cfg_v) for s, _, h in pool[:width]]


def force_score(
    enc: EncoderStates,
    lattice: LogProbLattice,
    decoder: AttentionDecoder,
    labels: tuple[int, ...],
    cfg: BeamConfig,
    lm: CharRnnLm | None = None,
) -> Hypothesis:
    """Score a complete label sequence under one stream (teacher-forced)."""
    alphabet = decoder.alphabet
    att_state = decoder.init_state(enc)
    lm_state = lm.init_state() if lm is not None and cfg.lm_weight > 0 else None
    logp_att = 0.0
    logp_lm = 0.0
    seq = list(labels) + [alphabet.eos_id]
    prev = alphabet.sos_id
    with torch.no_grad():
        for c in seq:
            slot = alphabet.decoder_eos_slot if c == alphabet.eos_id else c
            batched = AttentionState(
                att_state.alignment.unsqueeze(0),
                att_state.hidden.unsqueeze(0),
                att_state.cell.unsqueeze(0),
            )
            new, logp = decoder.step_batch(batched, [prev], enc)
            att_state = AttentionState(new.alignment[0], new.hidden[0], new.cell[0])
            logp_att += float(logp[0, slot])
            if lm_state is not None:
                lb = LmState(lm_state.hidden.unsqueeze(0), lm_state.cell.unsqueeze(0))
                lm_new, lm_logp = lm.step_batch(lb, [prev])
                lm_state = LmState(lm_new.hidden[0], lm_new.cell[0])
                logp_lm += float(lm_logp[0, slot])
            prev = c if c != alphabet.eos_id else prev
    logp_ctc = ctc_loss(lattice, list(labels)).log_prob if labels else ctc_termination_score(
        ctc_prefix_init(lattice)
    )
    return Hypothesis(tuple(labels), logp_ctc, logp_att, logp_lm, None, None, None)


def late_rescore(
    audio: tuple[EncoderStates, LogProbLattice],
    visual: tuple[EncoderStates, LogProbLattice],
    decoder_a: AttentionDecoder,
    decoder_v: AttentionDecoder,
    cfg_a: BeamConfig,
    cfg_v: BeamConfig,
    gamma: float = 0.85,
    lm_a: CharRnnLm | None = None,
    lm_v: CharRnnLm | None = None,
) -> list[DecodeResult]:
    """n-best alternative to per-step late fusion: decode each stream alone,
    then rescore the union of candidate sequences under both streams."""
    nbest_a = beam_search(audio[0], audio[1], decoder_a, cfg_a, lm_a)
    nbest_v = beam_search(visual[0], visual[1], decoder_v, cfg_v, lm_v)
    candidates = sorted({r.labels for r in nbest_a} | {r.labels for r in nbest_v})
    results = []
    for labels in candidates:
        ha = force_score(audio[0], audio[1], decoder_a, labels, cfg_a, lm_a)
        hv = force_score(visual[0], visual[1], decoder_v, labels, cfg_v, lm_v)
        h = _LateHypothesis(ha, hv)
        score = _late_score(h, cfg_a, cfg_v, gamma)
        results.append(_late_result(h, score, cfg_a, cfg_v))
    results.sort(key=lambda r: (-r.score, r.labels))
    return results[: cfg_a.beam_width]


def write_decode_records(path, rows: list[tuple[str, str, DecodeResult]]) -> None:
    """Tab-separated decode output: utt id, hypothesis text, joint score, then
    the component scores in sorted key order (documented in the header line)."""
    if not rows:
        raise ValueError("no decode rows to write")
    keys = sorted(rows[0][2].breakdown)
    with open(path, "w") as f:
        f.write("\t".join(["utt_id", "text", "score", *keys]) + "\n")
        for utt_id, text, res in rows:
            vals = "\t".join(f"{res.breakdown[k]:.6f}" for k in keys)
            f.write(f"{utt_id}\t{text}\t{res.score:.6f}\t{vals}\n")
