"""Multi-task training: alpha * CTC + (1 - alpha) * attention, with label
smoothing on the attention branch and uniform SNR noise augmentation on the
raw audio before feature extraction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .ctc import LogProbLattice, ctc_loss
from .features import (
    CorpusConfig,
    UtteranceRecord,
    Waveform,
    babble_noise,
    mix_at_snr,
    synthesize_utterance,
)
from .harness import ErrorReport, cer_report, prepare_streams
from .models import RecognitionModel, to_tensor
from .numerics import child_seed, seeded_rng

CLEAN = math.inf


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    ctc_alpha: float = 0.2
    label_smoothing: float = 0.1
    epochs: int = 20
    batch_size: int = 10
    optimizer: str = "adadelta"  # or "sgd"
    learning_rate: float = 1.0
    rho: float = 0.95
    eps: float = 1e-8
    momentum: float = 0.9  # sgd only
    augment_snrs: tuple[float, ...] = (0.0, 5.0, 10.0, CLEAN)
    seed: int = 0
    patience: int | None = None  # early stopping on val loss; off by default

    def __post_init__(self):
        if not 0.0 <= self.ctc_alpha <= 1.0:
            raise ValueError("ctc_alpha must be in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")


def write_train_config(path, cfg: TrainConfig) -> None:
    """Flat key=value text; 'clean' stands for the infinite-SNR option."""
    with open(path, "w") as f:
        for key, value in cfg.__dict__.items():
            if key == "augment_snrs":
                value = ",".join("clean" if math.isinf(s) else repr(s) for s in value)
            f.write(f"{key}={value}\n")


def read_train_config(path) -> TrainConfig:
    fields = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            if key == "augment_snrs":
                fields[key] = tuple(
                    CLEAN if v == "clean" else float(v) for v in value.split(",") if v
                )
            elif key == "optimizer":
                fields[key] = value
            elif key == "patience":
                fields[key] = None if value == "None" else int(value)
            elif key in ("epochs", "batch_size", "seed"):
                fields[key] = int(value)
            else:
                fields[key] = float(value)
    return TrainConfig(**fields)


def label_smooth(one_hot: np.ndarray, eps: float) -> np.ndarray:
    """(1 - eps) * one-hot + eps / V uniform; rows keep summing to 1."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must be in [0, 1)")
    v = one_hot.shape[-1]
    return (1.0 - eps) * one_hot + eps / v


class _CtcNll(torch.autograd.Function):
    """Bridges the numpy forward-backward CTC loss into torch autograd; the
    backward pass uses the analytic lattice gradient."""

    @staticmethod
    def forward(ctx, lattice: torch.Tensor, targets: tuple[int, ...], fps: float):
        res = ctc_loss(LogProbLattice(lattice.detach().numpy(), fps), list(targets))
        ctx.save_for_backward(torch.as_tensor(res.grad, dtype=lattice.dtype))
        ctx.feasible = res.feasible
        return torch.tensor(-res.log_prob, dtype=lattice.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad_output * grad, None, None


def ctc_nll(lattice: torch.Tensor, targets: list[int], fps: float = 100.0) -> torch.Tensor:
    return _CtcNll.apply(lattice, tuple(targets), fps)


def attention_nll(
    model: RecognitionModel, enc, targets: list[int], smoothing: float
) -> torch.Tensor:
    """Teacher-forced NLL of targets + eos under smoothed one-hot distributions."""
    alphabet = model.alphabet
    v = alphabet.num_labels + 1
    decoder = model.decoder
    state = decoder.init_state(enc, batch=1)
    prev = alphabet.sos_id
    loss = torch.zeros((), dtype=torch.float64)
    seq = list(targets) + [alphabet.decoder_eos_slot]
    for slot in seq:
        state, logp = decoder.step_batch(state, [prev], enc)
        target = label_smooth(np.eye(v)[slot], smoothing)
        loss = loss - (to_tensor(target) * logp[0]).sum()
        prev = slot if slot != alphabet.decoder_eos_slot else prev
    return loss


@dataclass
class BatchItem:
    audio: object  # FeatureSequence | None
    visual: object  # FeatureSequence | None
    targets: list[int]


def multitask_loss(
    batch: list[BatchItem], model: RecognitionModel, alpha: float, smoothing: float = 0.0
) -> tuple[torch.Tensor, dict]:
    """Mean over the batch of alpha * CTC NLL + (1 - alpha) * attention NLL.

    The two branch means are combined linearly at the end, so the loss is
    exactly linear in alpha. Infeasible CTC targets are skipped and counted;
    a batch where every target is infeasible raises TrainingError.
    """
    ctc_terms = []
    att_terms = []
    infeasible = 0
    for item in batch:
        enc = model.encode(item.audio, item.visual)
        att_terms.append(attention_nll(model, enc, item.targets, smoothing))
        lattice = model.lattice_log_probs(enc)
        nll = ctc_nll(lattice, item.targets, enc.fps)
        if torch.isinf(nll):
            infeasible += 1
        else:
            ctc_terms.append(nll)
    if not ctc_terms and alpha > 0.0:
        raise TrainingError(
            f"all {len(batch)} targets are CTC-infeasible (sequences too long for the frames)"
        )
    att_mean = torch.stack(att_terms).mean()
    ctc_mean = torch.stack(ctc_terms).mean() if ctc_terms else torch.zeros((), dtype=torch.float64)
    loss = alpha * ctc_mean + (1.0 - alpha) * att_mean
    stats = {
        "ctc": float(ctc_mean.detach()),
        "att": float(att_mean.detach()),
        "infeasible": infeasible,
    }
    return loss, stats


def pick_augment_snr(cfg: TrainConfig, rng: np.random.Generator) -> float:
    """Uniform draw over the configured SNR options (inf means clean)."""
    if not cfg.augment_snrs:
        raise ValueError("augment_snrs must be non-empty")
    return cfg.augment_snrs[int(rng.integers(0, len(cfg.augment_snrs)))]


def augment(wav: Waveform, cfg: TrainConfig, rng: np.random.Generator,
            corpus: CorpusConfig | None = None) -> Waveform:
    """Uniformly pick clean or one of the configured SNRs; non-clean picks mix
    babble-like noise at that level."""
    snr = pick_augment_snr(cfg, rng)
    if math.isinf(snr):
        return wav
    noise = babble_noise(len(wav.samples), wav.sample_rate, rng, corpus)
    return mix_at_snr(wav, noise, snr)


def _make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adadelta":
        return torch.optim.Adadelta(
            model.parameters(), lr=cfg.learning_rate, rho=cfg.rho, eps=cfg.eps
        )
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_cer: float


@dataclass
class TrainResult:
    model: RecognitionModel
    metrics: list[EpochMetrics]
    diverged: bool = False
    infeasible_count: int = 0


def write_metrics_csv(path, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss", "val_cer"])
        for m in metrics:
            w.writerow([m.epoch, f"{m.train_loss:.6f}", f"{m.val_loss:.6f}", f"{m.val_cer:.6f}"])


def _greedy_ctc_text(model: RecognitionModel, item: BatchItem) -> str:
    """Cheap per-epoch validation decode: per-frame argmax, CTC collapse."""
    with torch.no_grad():
        enc = model.encode(item.audio, item.visual)
        lattice = model.lattice_log_probs(enc).numpy()
    blank = model.alphabet.num_labels
    path = lattice.argmax(axis=1)
    out = []
    prev = -1
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = int(p)
    return model.alphabet.decode(out)


def _prepare_item(
    model: RecognitionModel,
    record: UtteranceRecord,
    corpus: CorpusConfig,
    cfg: TrainConfig | None,
    rng: np.random.Generator | None,
) -> BatchItem:
    wav, vis = synthesize_utterance(record.labels, corpus, record.seed)
    if cfg is not None and rng is not None and model.config.kind != "visual":
        wav = augment(wav, cfg, rng, corpus)
    audio, visual = prepare_streams(model, wav, vis, corpus)
    return BatchItem(audio, visual, corpus.alphabet.encode(record.labels))


def train(
    train_records: list[UtteranceRecord],
    val_records: list[UtteranceRecord],
    model: RecognitionModel,
    cfg: TrainConfig,
    corpus: CorpusConfig,
    metrics_path=None,
    log=None,
) -> TrainResult:
    """Epochs of shuffled mini-batches under the configured optimizer.

    Deterministic given cfg.seed. Non-finite losses abort training and the
    parameters roll back to the end of the last finite epoch.
    """
    if not train_records:
        raise TrainingError("empty training corpus")
    train_ids = {r.utt_id for r in train_records}
    if any(r.utt_id in train_ids for r in val_records):
        raise TrainingError("validation split overlaps the training split")
    optimizer = _make_optimizer(model, cfg)
    order_rng = seeded_rng(child_seed(cfg.seed, 1))
    metrics: list[EpochMetrics] = []
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    diverged = False
    infeasible_total = 0
    val_items = [_prepare_item(model, r, corpus, None, None) for r in val_records]
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train_records))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = []
            for j in idx:
                rng = seeded_rng(child_seed(cfg.seed, 2, epoch, int(j)))
                batch.append(_prepare_item(model, train_records[int(j)], corpus, cfg, rng))
            optimizer.zero_grad()
            loss, stats = multitask_loss(batch, model, cfg.ctc_alpha, cfg.label_smoothing)
            infeasible_total += stats["infeasible"]
            if not torch.isfinite(loss):
                diverged = True
                break
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        if diverged:
            model.load_state_dict(last_good)
            break
        last_good = {k: v.clone() for k, v in model.state_dict().items()}
        with torch.no_grad():
            val_losses = []
            for start in range(0, len(val_items), cfg.batch_size):
                vl, _ = multitask_loss(
                    val_items[start : start + cfg.batch_size], model, cfg.ctc_alpha,
                    cfg.label_smoothing,
                )
                val_losses.append(float(vl))
        cer = ErrorReport(0, 0, 0, 0)
        for r, item in zip(val_records, val_items):
            cer = cer + cer_report(r.labels, _greedy_ctc_text(model, item))
        m = EpochMetrics(epoch, epoch_loss / max(n_batches, 1),
                         float(np.mean(val_losses)) if val_losses else math.nan,
                         cer.rate if cer.ref_len else math.nan)
        metrics.append(m)
        if log:
            log(f"epoch {m.epoch}: train {m.train_loss:.4f} val {m.val_loss:.4f} "
                f"cer {m.val_cer:.4f}")
        if cfg.patience is not None and len(metrics) > cfg.patience:
            best = min(x.val_loss for x in metrics[: -cfg.patience])
            if all(x.val_loss >= best for x in metrics[-cfg.patience :]):
                break
    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
    return TrainResult(model, metrics, diverged, infeasible_total)
