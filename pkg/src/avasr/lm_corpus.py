"""Character-level LM training data preparation and LM training.

The LM vocabulary is the recognition alphabet's labels plus eos; sos
conditions the first prediction, so shallow fusion can add an LM score for
every decoded character including the sentence end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .alphabet import Alphabet
from .features import UtteranceRecord, read_manifest
from .models import CharRnnLm, LmConfig, build_lm
from .numerics import seeded_rng


@dataclass(frozen=True)
class TextCorpus:
    train: tuple[str, ...]
    val: tuple[str, ...]


def build_lm_corpus(
    manifests: list, alphabet: Alphabet, seed: int = 0, val_fraction: float = 0.1
) -> TextCorpus:
    """Concatenate manifest transcripts, shuffle with the seed, split off a
    validation tail. Duplicate lines are preserved. Manifest entries may be
    paths or already-parsed record lists."""
    transcripts: list[str] = []
    for m in manifests:
        records = m if isinstance(m, list) else read_manifest(m)
        for r in records:
            if not isinstance(r, UtteranceRecord):
                raise ValueError("manifest entries must be utterance records")
            for ch in r.labels:
                if ch not in alphabet.labels:
                    raise ValueError(f"symbol {ch!r} not in the recognition alphabet")
            transcripts.append(r.labels)
    rng = seeded_rng(seed)
    order = rng.permutation(len(transcripts))
    shuffled = [transcripts[i] for i in order]
    n_val = int(round(val_fraction * len(shuffled)))
    split = len(shuffled) - n_val
    return TextCorpus(tuple(shuffled[:split]), tuple(shuffled[split:]))


def sequence_nll(lm: CharRnnLm, text: str) -> tuple[torch.Tensor, int]:
    """Summed next-character NLL of text + eos, conditioned on sos."""
    alphabet = lm.alphabet
    ids = alphabet.encode(text)
    state = lm.init_state(batch=1)
    prev = alphabet.sos_id
    nll = torch.zeros((), dtype=torch.float64)
    for slot in ids + [alphabet.decoder_eos_slot]:
        state, logp = lm.step_batch(state, [prev])
        nll = nll - logp[0, slot]
        prev = slot if slot != alphabet.decoder_eos_slot else prev
    return nll, len(ids) + 1


def perplexity(lm: CharRnnLm, texts) -> float:
    total = 0.0
    tokens = 0
    with torch.no_grad():
        for text in texts:
            nll, n = sequence_nll(lm, text)
            total += float(nll)
            tokens += n
    return math.exp(total / max(tokens, 1))


@dataclass
class LmTrainResult:
    lm: CharRnnLm
    val_perplexity: list[float]
    diverged: bool = False


def train_lm(
    corpus: TextCorpus,
    alphabet: Alphabet,
    cfg: LmConfig | None = None,
    epochs: int = 5,
    batch_size: int = 10,
    seed: int = 0,
    learning_rate: float = 1e-2,
    log=None,
) -> LmTrainResult:
    """Minimize next-character NLL with Adam; logs validation perplexity per
    epoch. Divergence aborts with the last finite-epoch parameters."""
    if not corpus.train:
        raise ValueError("empty LM corpus")
    cfg = cfg or LmConfig()
    lm = build_lm(alphabet, cfg, seed)
    optimizer = torch.optim.Adam(lm.parameters(), lr=learning_rate)
    order_rng = seeded_rng(seed)
    history: list[float] = []
    last_good = {k: v.clone() for k, v in lm.state_dict().items()}
    diverged = False
    for epoch in range(1, epochs + 1):
        order = order_rng.permutation(len(corpus.train))
        for start in range(0, len(order), batch_size):
            optimizer.zero_grad()
            terms = []
            for j in order[start : start + batch_size]:
                nll, n = sequence_nll(lm, corpus.train[int(j)])
                terms.append(nll / n)
            loss = torch.stack(terms).mean()
            if not torch.isfinite(loss):
                diverged = True
                break
            loss.backward()
            optimizer.step()
        if diverged:
            lm.load_state_dict(last_good)
            break
        last_good = {k: v.clone() for k, v in lm.state_dict().items()}
        ppl = perplexity(lm, corpus.val or corpus.train)
        history.append(ppl)
        if log:
            log(f"lm epoch {epoch}: val perplexity {ppl:.4f}")
    return LmTrainResult(lm, history, diverged)
