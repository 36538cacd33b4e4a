"""Toy-scale neural components: BLSTM encoders, location-aware attention
decoder, character-level recurrent LM, and the early-fusion encoder topology.

All modules run in float64 so analytic gradients can be checked against
central finite differences at 1e-4 relative error. Forward passes are pure
and deterministic given parameters and input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .alphabet import Alphabet
from .features import FeatureSequence

DTYPE = torch.float64


def to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=DTYPE)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one recognition model (audio-only, visual-only or AV-early)."""

    kind: str  # "audio" | "visual" | "av-early"
    input_dim: int
    visual_dim: int = 0  # second-branch width, av-early only
    enc_hidden: int = 32
    enc_layers: int = 2
    dec_hidden: int = 32
    att_dim: int = 32
    att_channels: int = 4
    att_kernel: int = 7
    embed_dim: int = 16

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class LmConfig:
    hidden: int = 64
    embed_dim: int = 16

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class EncoderStates:
    """Frame-wise encoder outputs: concatenated forward/backward hidden states."""

    h: torch.Tensor  # (T, 2 * enc_hidden)
    fps: float

    @property
    def num_frames(self) -> int:
        return self.h.shape[0]


@dataclass
class AttentionState:
    alignment: torch.Tensor  # (T,) or (B, T); non-negative, sums to 1
    hidden: torch.Tensor  # decoder LSTM cell h
    cell: torch.Tensor  # decoder LSTM cell c


def init_parameters(module: nn.Module, seed: int) -> None:
    """uniform(-0.1, 0.1) from a seeded stream, then +1 on LSTM forget-gate biases."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.uniform_(-0.1, 0.1, generator=gen)
        for name, p in module.named_parameters():
            if "bias_ih" in name or "bias_hh" in name:
                h = p.shape[0] // 4
                p[h : 2 * h] += 0.5


class BlstmEncoder(nn.Module):
    """Stack of bidirectional LSTMs; outputs (T, 2*hidden), no subsampling."""

    def __init__(self, input_dim: int, hidden: int, layers: int):
        super().__init__()
        self.lstm = nn.LSTM(input_dim, hidden, layers, bidirectional=True, dtype=DTYPE)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[1] != self.lstm.input_size:
            raise ValueError(
                f"feature dim {frames.shape[1]} != encoder input {self.lstm.input_size}"
            )
        out, _ = self.lstm(frames.unsqueeze(1))
        return out.squeeze(1)


class EarlyFusionEncoder(nn.Module):
    """Two independent branch BLSTMs (audio, visual), concatenated per frame,
    followed by a trunk BLSTM. Both inputs must share frame count and fps."""

    def __init__(self, audio_dim: int, visual_dim: int, hidden: int, layers: int = 2):
        super().__init__()
        self.audio_branch = BlstmEncoder(audio_dim, hidden, layers)
        self.visual_branch = BlstmEncoder(visual_dim, hidden, layers)
        self.trunk = BlstmEncoder(4 * hidden, hidden, layers)

    def forward(self, audio: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        if audio.shape[0] != visual.shape[0]:
            raise ValueError("audio/visual frame counts differ")
        a = self.audio_branch(audio)
        v = self.visual_branch(visual)
        return self.trunk(torch.cat([a, v], dim=1))


def blstm_encode(x: FeatureSequence, encoder: nn.Module) -> EncoderStates:
    return EncoderStates(encoder(to_tensor(x.frames)), x.fps)


def early_fusion_encode(
    audio: FeatureSequence, visual: FeatureSequence, encoder: EarlyFusionEncoder
) -> EncoderStates:
    if audio.fps != visual.fps:
        raise ValueError("audio/visual fps differ; resample before fusion")
    if audio.num_frames != visual.num_frames:
        raise ValueError("audio/visual frame counts differ")
    return EncoderStates(encoder(to_tensor(audio.frames), to_tensor(visual.frames)), audio.fps)


class LocationAttention(nn.Module):
    """Additive (content + location) attention; the location feature is a 1-D
    convolution over the previous alignment."""

    def __init__(self, enc_dim: int, dec_hidden: int, att_dim: int, channels: int, kernel: int):
        super().__init__()
        self.w_state = nn.Linear(dec_hidden, att_dim, bias=False, dtype=DTYPE)
        self.w_enc = nn.Linear(enc_dim, att_dim, bias=True, dtype=DTYPE)
        self.w_loc = nn.Linear(channels, att_dim, bias=False, dtype=DTYPE)
        self.conv = nn.Conv1d(1, channels, kernel, padding=kernel // 2, bias=False, dtype=DTYPE)
        self.score = nn.Linear(att_dim, 1, bias=False, dtype=DTYPE)

    def forward(
        self, dec_hidden: torch.Tensor, enc: torch.Tensor, prev_alignment: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """dec_hidden (B, dh), enc (T, 2h), prev_alignment (B, T)
        -> context (B, 2h), alignment (B, T)."""
        loc = self.conv(prev_alignment.unsqueeze(1)).transpose(1, 2)  # (B, T, C)
        e = self.score(
            torch.tanh(
                self.w_state(dec_hidden).unsqueeze(1) + self.w_enc(enc).unsqueeze(0) + self.w_loc(loc)
            )
        ).squeeze(-1)
        alignment = torch.softmax(e, dim=-1)
        context = alignment @ enc
        return context, alignment


def attention_step(
    state: AttentionState, enc_states: EncoderStates, attention: LocationAttention
) -> tuple[torch.Tensor, AttentionState]:
    """One attention read for a single hypothesis; returns (context, new state)."""
    align = state.alignment.unsqueeze(0) if state.alignment.dim() == 1 else state.alignment
    hidden = state.hidden.unsqueeze(0) if state.hidden.dim() == 1 else state.hidden
    context, new_align = attention(hidden, enc_states.h, align)
    return context.squeeze(0), AttentionState(new_align.squeeze(0), state.hidden, state.cell)


class AttentionDecoder(nn.Module):
    """One-layer recurrent decoder over labels + eos with location attention.

    Emission order per step: attend with the previous decoder state, then
    advance the LSTM cell on [embed(prev label); context], then emit a
    normalized log-distribution from [new state; context].
    """

    def __init__(self, alphabet: Alphabet, cfg: ModelConfig):
        super().__init__()
        self.alphabet = alphabet
        enc_dim = 2 * cfg.enc_hidden
        self.embed = nn.Embedding(alphabet.num_labels + 1, cfg.embed_dim, dtype=DTYPE)  # + sos
        self.attention = LocationAttention(
            enc_dim, cfg.dec_hidden, cfg.att_dim, cfg.att_channels, cfg.att_kernel
        )
        self.cell = nn.LSTMCell(cfg.embed_dim + enc_dim, cfg.dec_hidden, dtype=DTYPE)
        self.out = nn.Linear(cfg.dec_hidden + enc_dim, alphabet.num_labels + 1, dtype=DTYPE)  # + eos

    def _embed_id(self, label: int) -> int:
        # sos shares the slot after the real labels
        if label == self.alphabet.sos_id:
            return self.alphabet.num_labels
        if 0 <= label < self.alphabet.num_labels:
            return label
        raise ValueError(f"invalid previous label {label} (blank/eos cannot condition the decoder)")

    def init_state(self, enc_states: EncoderStates, batch: int | None = None) -> AttentionState:
        t = enc_states.num_frames
        dh = self.cell.hidden_size
        if batch is None:
            return AttentionState(
                torch.full((t,), 1.0 / t, dtype=DTYPE),
                torch.zeros(dh, dtype=DTYPE),
                torch.zeros(dh, dtype=DTYPE),
            )
        return AttentionState(
            torch.full((batch, t), 1.0 / t, dtype=DTYPE),
            torch.zeros(batch, dh, dtype=DTYPE),
            torch.zeros(batch, dh, dtype=DTYPE),
        )

    def step_batch(
        self, state: AttentionState, prev_labels: list[int], enc_states: EncoderStates
    ) -> tuple[AttentionState, torch.Tensor]:
        """Advance B hypotheses against a shared encoder output.

        state fields are batched (B, ...); returns (new state, (B, V+1) log-probs).
        """
        ids = torch.tensor([self._embed_id(p) for p in prev_labels])
        context, alignment = self.attention(state.hidden, enc_states.h, state.alignment)
        inp = torch.cat([self.embed(ids), context], dim=1)
        h, c = self.cell(inp, (state.hidden, state.cell))
        logits = self.out(torch.cat([h, context], dim=1))
        return AttentionState(alignment, h, c), torch.log_softmax(logits, dim=-1)


def decoder_step(
    state: AttentionState, prev_label: int, enc_states: EncoderStates, decoder: AttentionDecoder
) -> tuple[AttentionState, torch.Tensor]:
    """Single-hypothesis decoder step; output log-distribution over labels + eos."""
    batched = AttentionState(
        state.alignment.unsqueeze(0), state.hidden.unsqueeze(0), state.cell.unsqueeze(0)
    )
    new, logp = decoder.step_batch(batched, [prev_label], enc_states)
    return AttentionState(new.alignment[0], new.hidden[0], new.cell[0]), logp[0]


@dataclass
class LmState:
    hidden: torch.Tensor
    cell: torch.Tensor


class CharRnnLm(nn.Module):
    """Character-level recurrent LM over labels + eos; sos conditions the start."""

    def __init__(self, alphabet: Alphabet, cfg: LmConfig):
        super().__init__()
        self.alphabet = alphabet
        self.embed = nn.Embedding(alphabet.num_labels + 1, cfg.embed_dim, dtype=DTYPE)
        self.cell = nn.LSTMCell(cfg.embed_dim, cfg.hidden, dtype=DTYPE)
        self.out = nn.Linear(cfg.hidden, alphabet.num_labels + 1, dtype=DTYPE)

    def _embed_id(self, label: int) -> int:
        if label == self.alphabet.sos_id:
            return self.alphabet.num_labels
        if 0 <= label < self.alphabet.num_labels:
            return label
        raise ValueError(f"invalid previous label {label}")

    def init_state(self, batch: int | None = None) -> LmState:
        h = self.cell.hidden_size
        if batch is None:
            return LmState(torch.zeros(h, dtype=DTYPE), torch.zeros(h, dtype=DTYPE))
        return LmState(torch.zeros(batch, h, dtype=DTYPE), torch.zeros(batch, h, dtype=DTYPE))

    def step_batch(self, state: LmState, labels: list[int]) -> tuple[LmState, torch.Tensor]:
        ids = torch.tensor([self._embed_id(p) for p in labels])
        h, c = self.cell(self.embed(ids), (state.hidden, state.cell))
        return LmState(h, c), torch.log_softmax(self.out(h), dim=-1)


def lm_step(state: LmState, label: int, lm: CharRnnLm) -> tuple[LmState, torch.Tensor]:
    batched = LmState(state.hidden.unsqueeze(0), state.cell.unsqueeze(0))
    new, logp = lm.step_batch(batched, [label])
    return LmState(new.hidden[0], new.cell[0]), logp[0]


class CtcHead(nn.Module):
    """Linear + log-softmax over labels + blank, applied to encoder states."""

    def __init__(self, enc_hidden: int, num_labels: int):
        super().__init__()
        self.out = nn.Linear(2 * enc_hidden, num_labels + 1, dtype=DTYPE)

    def forward(self, enc: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.out(enc), dim=-1)


class RecognitionModel(nn.Module):
    """Encoder shared by the CTC head and the attention decoder (multi-task)."""

    def __init__(self, alphabet: Alphabet, cfg: ModelConfig):
        super().__init__()
        self.alphabet = alphabet
        self.config = cfg
        if cfg.kind == "av-early":
            self.encoder: nn.Module = EarlyFusionEncoder(
                cfg.input_dim, cfg.visual_dim, cfg.enc_hidden, cfg.enc_layers
            )
        elif cfg.kind == "visual":
            self.encoder = BlstmEncoder(cfg.visual_dim, cfg.enc_hidden, cfg.enc_layers)
        else:
            self.encoder = BlstmEncoder(cfg.input_dim, cfg.enc_hidden, cfg.enc_layers)
        self.ctc_head = CtcHead(cfg.enc_hidden, alphabet.num_labels)
        self.decoder = AttentionDecoder(alphabet, cfg)

    def encode(self, audio: FeatureSequence | None, visual: FeatureSequence | None) -> EncoderStates:
        if self.config.kind == "audio":
            return blstm_encode(audio, self.encoder)
        if self.config.kind == "visual":
            return blstm_encode(visual, self.encoder)
        return early_fusion_encode(audio, visual, self.encoder)

    def lattice_log_probs(self, enc_states: EncoderStates) -> torch.Tensor:
        return self.ctc_head(enc_states.h)


def build_model(alphabet: Alphabet, cfg: ModelConfig, seed: int) -> RecognitionModel:
    model = RecognitionModel(alphabet, cfg)
    init_parameters(model, seed)
    return model


def build_lm(alphabet: Alphabet, cfg: LmConfig, seed: int) -> CharRnnLm:
    lm = CharRnnLm(alphabet, cfg)
    init_parameters(lm, seed)
    return lm
