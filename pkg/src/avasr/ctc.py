"""CTC negative log-likelihood with analytic gradient, plus incremental prefix scoring.

Everything is computed in the natural-log domain on a per-frame lattice of
label log-posteriors (blank in the last column). The loss side uses the
standard forward-backward recursion over the blank-interleaved target; the
decoding side maintains, per hypothesis prefix, the probability of all
alignments ending in blank vs. non-blank at every frame (see
docs/ctc_prefix_scoring.md for the derivation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import LOG_ZERO, log_sum_exp

NEG_INF = LOG_ZERO


@dataclass(frozen=True)
class LogProbLattice:
    """Per-frame label log-posteriors, shape (T, num_labels + 1); blank last."""

    log_probs: np.ndarray
    fps: float = 100.0

    def __post_init__(self):
        if self.log_probs.ndim != 2:
            raise ValueError("lattice must be (T, V+1)")
        rows = np.array([log_sum_exp(r) for r in self.log_probs])
        if np.any(np.abs(rows) > 1e-9):
            raise ValueError("lattice rows are not normalized")

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def num_labels(self) -> int:
        return self.log_probs.shape[1] - 1

    @property
    def blank(self) -> int:
        return self.log_probs.shape[1] - 1


def lattice_from_logits(logits: np.ndarray, fps: float = 100.0) -> LogProbLattice:
    """Row-wise log-softmax of raw scores."""
    m = logits.max(axis=1, keepdims=True)
    z = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return LogProbLattice(logits - z, fps)


@dataclass(frozen=True)
class CtcLossResult:
    log_prob: float  # log p(y | x); -inf when the target is infeasible
    grad: np.ndarray  # d(-log p)/d(lattice log-probs), shape (T, V+1)
    feasible: bool


def _expand_target(y: list[int], blank: int) -> np.ndarray:
    out = np.full(2 * len(y) + 1, blank, dtype=np.int64)
    out[1::2] = y
    return out


def ctc_loss(lattice: LogProbLattice, y: list[int]) -> CtcLossResult:
    """log p(y|x) marginalized over all blank-augmented monotonic alignments.

    Returns the log-probability together with the analytic gradient of the
    negative log-likelihood with respect to every lattice entry. Infeasible
    targets (|y'| too long for T after accounting for repeats) yield -inf
    with a zero gradient rather than raising, so random batches never crash.
    """
    if len(y) == 0:
        raise ValueError("target must be non-empty")
    blank = lattice.blank
    if any(not 0 <= c < lattice.num_labels for c in y):
        raise ValueError("target contains non-label symbols")
    lp = lattice.log_probs
    t_max = lattice.num_frames
    yp = _expand_target(list(y), blank)
    s_max = len(yp)

    min_frames = len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)
    if t_max < min_frames:
        return CtcLossResult(NEG_INF, np.zeros_like(lp), False)

    # alpha[t, s]: log-prob of all prefixes of alignments ending in state s at t
    alpha = np.full((t_max, s_max), NEG_INF)
    alpha[0, 0] = lp[0, blank]
    alpha[0, 1] = lp[0, yp[1]]
    # same-label transition s-2 -> s is forbidden (needs a separating blank)
    can_skip = np.zeros(s_max, dtype=bool)
    can_skip[2:] = (yp[2:] != blank) & (yp[2:] != yp[:-2])
    for t in range(1, t_max):
        stay = alpha[t - 1]
        prev = np.concatenate(([NEG_INF], alpha[t - 1, :-1]))
        skip = np.concatenate(([NEG_INF, NEG_INF], alpha[t - 1, :-2]))
        skip = np.where(can_skip, skip, NEG_INF)
        acc = np.logaddexp(np.logaddexp(stay, prev), skip)
        alpha[t] = acc + lp[t, yp]

    log_p = np.logaddexp(alpha[t_max - 1, s_max - 1], alpha[t_max - 1, s_max - 2])
    if log_p == NEG_INF:
        return CtcLossResult(NEG_INF, np.zeros_like(lp), False)

    # beta[t, s]: log-prob of alignment suffixes from t+1 on, given state s at t
    beta = np.full((t_max, s_max), NEG_INF)
    beta[t_max - 1, s_max - 1] = 0.0
    beta[t_max - 1, s_max - 2] = 0.0
    for t in range(t_max - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, yp]
        stay = nxt
        succ = np.concatenate((nxt[1:], [NEG_INF]))
        skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
        skip = np.where(np.concatenate((can_skip[2:], [False, False])), skip, NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(stay, succ), skip)

    # d log p / d lp[t, k] = sum over states with label k of exp(alpha+beta-logp)
    occ = alpha + beta - log_p
    grad = np.zeros_like(lp)
    contrib = np.exp(occ)
    for s, lab in enumerate(yp):
        grad[:, lab] += contrib[:, s]
    return CtcLossResult(float(log_p), -grad, True)


def all_label_sequences(num_labels: int, max_len: int):
    """Every label sequence of length 0..max_len; enumeration helper for oracles."""
    yield []
    stack = [[c] for c in range(num_labels)]
    while stack:
        seq = stack.pop(0)
        yield seq
        if len(seq) < max_len:
            stack.extend(seq + [c] for c in range(num_labels))


# ---------------------------------------------------------------------------
# prefix scoring for label-synchronous decoding


@dataclass(frozen=True)
class CtcPrefixState:
    """Per-frame log-probabilities of the current prefix, split by how the
    alignment ends at each frame: in blank (log_r_blank) or in the prefix's
    final non-blank label (log_r_nonblank)."""

    log_r_nonblank: np.ndarray  # (T,)
    log_r_blank: np.ndarray  # (T,)
    last_label: int | None  # None for the empty prefix
    prefix_log_prob: float  # log of total mass of alignments starting with this prefix


def ctc_prefix_init(lattice: LogProbLattice) -> CtcPrefixState:
    """State of the empty prefix: cumulative blank products; non-blank part -inf."""
    blanks = np.cumsum(lattice.log_probs[:, lattice.blank])
    return CtcPrefixState(
        log_r_nonblank=np.full(lattice.num_frames, NEG_INF),
        log_r_blank=blanks,
        last_label=None,
        prefix_log_prob=0.0,
    )


def ctc_prefix_extend_all(
    state: CtcPrefixState, lattice: LogProbLattice
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Extend a prefix by every label at once.

    Returns (scores, r_nonblank, r_blank) with scores shape (V,) holding the
    prefix log-probability of prefix+c for each label c, and the two r arrays
    shaped (V, T). A single pass over time serves all labels.
    """
    lp = lattice.log_probs
    t_max = lattice.num_frames
    v = lattice.num_labels
    blank = lattice.blank

    # phi[t, c]: mass of prefix alignments ending at frame t after which a
    # fresh emission of c starts a new label (repeats need a blank in between).
    phi = np.broadcast_to(
        np.logaddexp(state.log_r_blank, state.log_r_nonblank)[:, None], (t_max, v)
    ).copy()
    if state.last_label is not None:
        phi[:, state.last_label] = state.log_r_blank

    # only the empty prefix leaves room for a first emission at frame 0
    first = 0.0 if state.last_label is None else NEG_INF
    r_nb = np.full((t_max, v), NEG_INF)
    r_b = np.full((t_max, v), NEG_INF)
    r_nb[0] = lp[0, :v] + first
    scores = r_nb[0].copy()
    for t in range(1, t_max):
        new_mass = phi[t - 1] + lp[t, :v]
        r_nb[t] = np.logaddexp(new_mass, r_nb[t - 1] + lp[t, :v])
        r_b[t] = np.logaddexp(r_b[t - 1], r_nb[t - 1]) + lp[t, blank]
        scores = np.logaddexp(scores, new_mass)
    return scores, r_nb, r_b


def ctc_prefix_extend(
    state: CtcPrefixState, c: int, lattice: LogProbLattice
) -> tuple[CtcPrefixState, float]:
    """Extend a prefix by one real label; returns the new state and the
    prefix log-probability of all complete alignments starting with prefix+c."""
    if not 0 <= c < lattice.num_labels:
        raise ValueError(f"label {c} out of range")
    scores, r_nb, r_b = ctc_prefix_extend_all(state, lattice)
    new = CtcPrefixState(
        log_r_nonblank=r_nb[:, c].copy(),
        log_r_blank=r_b[:, c].copy(),
        last_label=c,
        prefix_log_prob=float(scores[c]),
    )
    return new, float(scores[c])


def ctc_termination_score(state: CtcPrefixState) -> float:
    """log-probability that the emitted sequence equals the prefix exactly."""
    t = len(state.log_r_blank)
    return float(np.logaddexp(state.log_r_blank[t - 1], state.log_r_nonblank[t - 1]))
