"""Synthetic utterances, log-mel features, SNR-controlled noise mixing, resampling.

The corpus is fully synthetic: each symbol of the alphabet has a distinct
two-tone audio signature and a correlated low-dimensional visual trajectory,
so recognition is learnable at desk scale without any real recordings.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .alphabet import Alphabet, default_alphabet
from .numerics import child_seed, seeded_rng

LOG_FLOOR = 1e-10

NOISE_KINDS = ("white", "pink", "babble", "tonal")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float64
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def power(self) -> float:
        return float(np.mean(self.samples**2))


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray  # (T, D) float64
    fps: float
    stream_kind: str  # "audio" | "visual"

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.frames.ndim != 2:
            raise ValueError("frames must be (T, D)")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    snr_db: float  # math.inf means clean

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @property
    def clean(self) -> bool:
        return math.isinf(self.snr_db)


@dataclass(frozen=True)
class CorpusConfig:
    """Defines the synthetic symbol inventory; same config -> same signatures."""

    alphabet: Alphabet = field(default_factory=default_alphabet)
    sample_rate: int = 16000
    symbol_duration_s: float = 0.12
    duration_jitter: float = 0.1  # fraction of symbol_duration_s, uniform
    visual_dim: int = 16
    visual_fps: float = 25.0
    visual_noise_std: float = 0.3
    signature_seed: int = 1234
    min_len: int = 3
    max_len: int = 8


def symbol_frequencies(config: CorpusConfig, label_id: int) -> tuple[float, float]:
    """Two tone frequencies for a symbol, spread log-uniformly over 300-3400 Hz."""
    n = config.alphabet.num_labels
    lo, hi = 300.0, 3400.0
    f1 = lo * (hi / lo) ** (label_id / max(n - 1, 1))
    f2 = min(f1 * 1.37, hi)
    return f1, f2


def symbol_signature(config: CorpusConfig, label_id: int, duration_s: float | None = None) -> np.ndarray:
    """Template waveform for one symbol: two tones under a raised-cosine envelope."""
    if duration_s is None:
        duration_s = config.symbol_duration_s
    n = int(round(duration_s * config.sample_rate))
    t = np.arange(n) / config.sample_rate
    f1, f2 = symbol_frequencies(config, label_id)
    env = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / max(n - 1, 1)))
    return env * (0.30 * np.sin(2 * np.pi * f1 * t) + 0.20 * np.sin(2 * np.pi * f2 * t))


def symbol_anchor(config: CorpusConfig, label_id: int) -> np.ndarray:
    """Per-symbol visual anchor vector, fixed by the corpus config."""
    rng = seeded_rng(child_seed(config.signature_seed, 7, label_id))
    return rng.normal(0.0, 1.0, size=config.visual_dim)


def synthesize_utterance(
    labels: str, config: CorpusConfig, seed: int
) -> tuple[Waveform, FeatureSequence]:
    """Render an utterance: audio waveform plus a correlated visual stream at 25 fps.

    Each symbol contributes a duration-jittered copy of its tone signature;
    the visual stream interpolates smoothly between the per-symbol anchor
    vectors and adds Gaussian observation noise. Same seed, same output.
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    ids = config.alphabet.encode(labels)
    rng = seeded_rng(seed)

    segments = []
    durations = []
    for lid in ids:
        jitter = config.duration_jitter * rng.uniform(-1.0, 1.0)
        dur = config.symbol_duration_s * (1.0 + jitter)
        seg = symbol_signature(config, lid, dur)
        segments.append(seg)
        durations.append(len(seg))
    samples = np.concatenate(segments)
    wav = Waveform(samples, config.sample_rate)

    # Visual trajectory: cosine interpolation between segment-midpoint anchors.
    total = len(samples)
    mids = np.cumsum(durations) - np.asarray(durations) / 2.0  # sample index of each midpoint
    anchors = np.stack([symbol_anchor(config, lid) for lid in ids])
    n_frames = max(int(math.floor(total / config.sample_rate * config.visual_fps)), 1)
    times = (np.arange(n_frames) + 0.5) / config.visual_fps * config.sample_rate
    frames = np.empty((n_frames, config.visual_dim))
    for i, s in enumerate(times):
        j = int(np.searchsorted(mids, s))
        if j == 0:
            frames[i] = anchors[0]
        elif j >= len(mids):
            frames[i] = anchors[-1]
        else:
            u = (s - mids[j - 1]) / (mids[j] - mids[j - 1])
            w = 0.5 * (1.0 - math.cos(math.pi * u))
            frames[i] = (1.0 - w) * anchors[j - 1] + w * anchors[j]
    frames += rng.normal(0.0, config.visual_noise_std, size=frames.shape)
    vis = FeatureSequence(frames, config.visual_fps, "visual")
    return wav, vis


# ---------------------------------------------------------------------------
# log-mel front end


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the mel scale, (n_mels, n_fft//2 + 1)."""
    f_max = sample_rate / 2.0
    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        left, center, right = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - left) / max(center - left, 1e-12)
        down = (right - freqs) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel(
    w: Waveform, n_mels: int = 80, window_s: float = 0.025, hop_s: float = 0.010
) -> FeatureSequence:
    """80-dim log-mel features: 25 ms Hamming window, 10 ms hop, 100 fps."""
    win = int(round(window_s * w.sample_rate))
    hop = int(round(hop_s * w.sample_rate))
    if len(w.samples) < win:
        raise ValueError("waveform shorter than one analysis window")
    n_frames = (len(w.samples) - win) // hop + 1
    n_fft = 1 << (win - 1).bit_length()
    window = np.hamming(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * window
    spec = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    fb = mel_filterbank(n_mels, n_fft, w.sample_rate)
    mel = spec @ fb.T
    feats = np.log(np.maximum(mel, LOG_FLOOR))
    return FeatureSequence(feats, w.sample_rate / hop, "audio")


def normalize_per_utterance(seq: FeatureSequence) -> FeatureSequence:
    """Per-utterance, per-dimension mean/variance normalization."""
    mu = seq.frames.mean(axis=0)
    sd = seq.frames.std(axis=0)
    return replace(seq, frames=(seq.frames - mu) / np.maximum(sd, 1e-8))


# ---------------------------------------------------------------------------
# noise


def mix_at_snr(signal: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """signal + k*noise with k chosen so the mix hits snr_db exactly; inf = clean."""
    if math.isinf(snr_db) and snr_db > 0:
        return signal
    if signal.sample_rate != noise.sample_rate:
        raise ValueError("sample rates differ")
    n = len(signal.samples)
    reps = -(-n // len(noise.samples))
    noise_samples = np.tile(noise.samples, reps)[:n]
    p_sig = float(np.mean(signal.samples**2))
    p_noise = float(np.mean(noise_samples**2))
    if p_sig <= 0.0 or p_noise <= 0.0:
        raise FloatingPointError("zero-power signal or noise")
    k = math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(signal.samples + k * noise_samples, signal.sample_rate)


def measured_snr_db(signal: Waveform, mixed: Waveform) -> float:
    resid = mixed.samples - signal.samples
    p_resid = float(np.mean(resid**2))
    if p_resid == 0.0:
        return math.inf  # clean: no noise was added
    return 10.0 * math.log10(np.mean(signal.samples**2) / p_resid)


def white_noise(n: int, sample_rate: int, rng: np.random.Generator) -> Waveform:
    return Waveform(rng.normal(0.0, 1.0, size=n), sample_rate)


def pink_noise(n: int, sample_rate: int, rng: np.random.Generator) -> Waveform:
    """1/f-shaped noise via spectral shaping of a white draw."""
    white = rng.normal(0.0, 1.0, size=n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    f[0] = f[1] if len(f) > 1 else 1.0
    spec /= np.sqrt(f)
    out = np.fft.irfft(spec, n=n)
    return Waveform(out / np.std(out), sample_rate)


def babble_noise(
    n: int, sample_rate: int, rng: np.random.Generator, config: CorpusConfig | None = None
) -> Waveform:
    """Speech-like noise: six overlapping synthetic utterances summed."""
    if config is None:
        config = CorpusConfig()
    if config.sample_rate != sample_rate:
        config = replace(config, sample_rate=sample_rate)
    voices = np.zeros(n)
    for _ in range(6):
        length = int(rng.integers(8, 16))
        chars = rng.choice(list(config.alphabet.labels), size=length)
        text = "".join(chars).strip()
        if not text:
            text = config.alphabet.labels[0]
        wav, _ = synthesize_utterance(text, config, int(rng.integers(0, 2**31)))
        reps = -(-n // len(wav.samples))
        start = int(rng.integers(0, len(wav.samples)))
        tiled = np.tile(wav.samples, reps + 1)[start : start + n]
        voices += tiled
    return Waveform(voices / max(np.std(voices), 1e-12), sample_rate)


def tonal_noise(n: int, sample_rate: int, rng: np.random.Generator) -> Waveform:
    """Narrowband interference: a tone whose frequency wanders in 300-3000 Hz."""
    steps = rng.normal(0.0, 30.0, size=n)
    freq = 300.0 + np.abs(np.mod(np.cumsum(steps) / 50.0 + rng.uniform(0, 2700.0), 5400.0) - 2700.0)
    phase = 2.0 * np.pi * np.cumsum(freq) / sample_rate
    return Waveform(np.sin(phase), sample_rate)


def make_noise(
    kind: str, n: int, sample_rate: int, rng: np.random.Generator, config: CorpusConfig | None = None
) -> Waveform:
    if kind == "white":
        return white_noise(n, sample_rate, rng)
    if kind == "pink":
        return pink_noise(n, sample_rate, rng)
    if kind == "babble":
        return babble_noise(n, sample_rate, rng, config)
    if kind == "tonal":
        return tonal_noise(n, sample_rate, rng)
    raise ValueError(f"unknown noise kind {kind!r}")


# ---------------------------------------------------------------------------
# frame-rate resampling


def resample_frames(seq: FeatureSequence, target_fps: float) -> FeatureSequence:
    """Upsample by linear interpolation on the time axis; downsample by decimation."""
    if target_fps <= 0:
        raise ValueError("target_fps must be positive")
    if target_fps == seq.fps:
        return seq
    if target_fps < seq.fps:
        ratio = seq.fps / target_fps
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(f"non-integer decimation ratio {ratio}")
        return replace(seq, frames=seq.frames[:: int(round(ratio))].copy(), fps=target_fps)
    t = seq.num_frames
    duration = t / seq.fps
    n_out = int(round(duration * target_fps))
    src_t = np.arange(t) / seq.fps
    out_t = np.arange(n_out) / target_fps
    pos = np.clip(out_t, src_t[0], src_t[-1]) * seq.fps
    lo = np.clip(np.floor(pos).astype(int), 0, t - 1)
    hi = np.clip(lo + 1, 0, t - 1)
    frac = (pos - lo)[:, None]
    frames = (1.0 - frac) * seq.frames[lo] + frac * seq.frames[hi]
    return replace(seq, frames=frames, fps=target_fps)


# ---------------------------------------------------------------------------
# corpus records and serialization

_HEADER = struct.Struct("<4sHIHf")  # magic, version, T, D, fps -> 16 bytes
_MAGIC = b"AVFS"
_VERSION = 1


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    labels: str
    seed: int
    duration_s: float


def generate_corpus(config: CorpusConfig, n_utts: int, seed: int, prefix: str = "utt") -> list[UtteranceRecord]:
    """Sample utterance transcripts (no leading/trailing/double spaces) and seeds."""
    rng = seeded_rng(seed)
    labels = list(config.alphabet.labels)
    records = []
    for i in range(n_utts):
        while True:
            length = int(rng.integers(config.min_len, config.max_len + 1))
            text = "".join(rng.choice(labels, size=length))
            if text.strip() == text and "  " not in text and text:
                break
        utt_seed = child_seed(seed, i)
        wav, _ = synthesize_utterance(text, config, utt_seed)
        records.append(UtteranceRecord(f"{prefix}{i:05d}", text, utt_seed, wav.duration))
    return records


def write_manifest(path, records: list[UtteranceRecord]) -> None:
    """One utterance per line: id <TAB> labels <TAB> seed <TAB> duration."""
    with open(path, "w") as f:
        for r in records:
            f.write(f"{r.utt_id}\t{r.labels}\t{r.seed}\t{r.duration_s:.6f}\n")


def read_manifest(path) -> list[UtteranceRecord]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, labels, seed, dur = line.split("\t")
            records.append(UtteranceRecord(utt_id, labels, int(seed), float(dur)))
    return records


def write_features(path, seq: FeatureSequence) -> None:
    """Binary blob: 16-byte header (magic, version, T, D, fps) + row-major f64 LE."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, seq.num_frames, seq.dim, seq.fps))
        f.write(np.ascontiguousarray(seq.frames, dtype="<f8").tobytes())


def read_features(path, stream_kind: str = "audio") -> FeatureSequence:
    with open(path, "rb") as f:
        magic, version, t, d, fps = _HEADER.unpack(f.read(_HEADER.size))
        if magic != _MAGIC:
            raise ValueError("bad magic in feature file")
        if version != _VERSION:
            raise ValueError(f"unsupported feature file version {version}")
        data = np.frombuffer(f.read(8 * t * d), dtype="<f8").reshape(t, d).copy()
    return FeatureSequence(data, float(fps), stream_kind)
