"""Voice feature extraction: 64-bin log-mel spectrograms and segmentation.

Defaults follow common speech-analysis practice: 25 ms analysis window,
10 ms hop, 64 triangular mel filters spanning 0 to Nyquist.  Choices the
upstream protocol leaves open are pinned here so results are reproducible:
periodic Hann window, no pre-emphasis, HTK mel scale
2595*log10(1 + f/700), and a 1e-10 floor on mel power before the natural log.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

N_MELS = 64
LOG_FLOOR = 1e-10
CANONICAL_SAMPLE_RATE = 16000

TRAIN_SEGMENT_SECONDS = (6.0, 8.0)


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """frames: (F, 64) natural-log mel energies."""

    frames: np.ndarray
    frame_hop: float
    window: float

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != N_MELS:
            raise ValueError(f"expected (F, {N_MELS}) frames, got {f.shape}")
        if f.shape[0] < 1:
            raise ValueError("spectrogram must have at least one frame")
        if not np.all(np.isfinite(f)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Segment:
    frames: np.ndarray
    recording_id: str
    start_frame: int
    end_frame: int
    phoneme: str | None = None


@dataclass(frozen=True)
class SegmentSet:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)


def read_wav(path, target_rate: int = CANONICAL_SAMPLE_RATE) -> Waveform:
    """Read a PCM-16 mono WAV; other rates are resampled with a linear-phase
    polyphase filter (scipy resample_poly)."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono WAV, got {data.ndim} channels")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected PCM-16 samples, got {data.dtype}")
    samples = data.astype(np.float64) / 32768.0
    if rate != target_rate:
        g = gcd(int(target_rate), int(rate))
        samples = resample_poly(samples, target_rate // g, rate // g)
    return Waveform(samples, target_rate)


def write_wav(path, wave: Waveform) -> None:
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, wave.sample_rate, pcm)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters (n_mels, n_fft//2 + 1) spanning 0 to Nyquist."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(0.0, float(hz_to_mel(nyquist)), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, bin_freqs.shape[0]))
    for m in range(n_mels):
        left, center, right = hz_points[m : m + 3]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_center_frequencies(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    mel_points = np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), n_mels + 2)
    return mel_to_hz(mel_points[1:-1])


def frame_count(n_samples: int, window_samples: int, hop_samples: int) -> int:
    if n_samples < window_samples:
        raise ValueError(f"need at least {window_samples} samples, got {n_samples}")
    return (n_samples - window_samples) // hop_samples + 1


def compute_logmel(
    wave: Waveform,
    n_mels: int = N_MELS,
    window_seconds: float = 0.025,
    hop_seconds: float = 0.010,
    log_floor: float = LOG_FLOOR,
) -> MelSpectrogram:
    """STFT (periodic Hann) -> power spectrum -> mel filterbank -> ln with floor."""
    sr = wave.sample_rate
    w = int(round(window_seconds * sr))
    h = int(round(hop_seconds * sr))
    n_frames = frame_count(wave.samples.shape[0], w, h)

    # all frames as a strided view: (F, W)
    idx = np.arange(w)[None, :] + h * np.arange(n_frames)[:, None]
    frames = wave.samples[idx]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(w) / w)  # periodic
    spectrum = np.fft.rfft(frames * hann, n=w, axis=1)
    power = np.abs(spectrum) ** 2
    mel_power = power @ mel_filterbank(sr, w, n_mels).T
    logmel = np.log(np.maximum(mel_power, log_floor))
    return MelSpectrogram(logmel, frame_hop=hop_seconds, window=window_seconds)


@dataclass(frozen=True)
class MelNormalization:
    """Per-bin standardization fitted on training spectrograms (population
    convention, matching AM normalization)."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return (np.asarray(frames, dtype=np.float64) - self.mean) / self.std

    def invert(self, frames: np.ndarray) -> np.ndarray:
        return np.asarray(frames, dtype=np.float64) * self.std + self.mean

    def apply_spectrogram(self, spec: MelSpectrogram) -> MelSpectrogram:
        return MelSpectrogram(self.apply(spec.frames), spec.frame_hop, spec.window)


def fit_mel_normalization(spectrograms) -> MelNormalization:
    """Pool all frames of the training corpus; zero-variance bins raise."""
    stacks = [s.frames if isinstance(s, MelSpectrogram) else np.asarray(s) for s in spectrograms]
    if not stacks:
        raise ValueError("no training spectrograms")
    pooled = np.concatenate(stacks, axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    for b, s in enumerate(std):
        # relative threshold: constant data leaves roundoff-sized std behind
        if s <= 1e-12 * max(1.0, abs(mean[b])):
            raise ValueError(f"mel bin {b} has zero variance on the training corpus")
    return MelNormalization(mean, std)


def segment(
    spectrogram: MelSpectrogram,
    mode: str,
    rng: np.random.Generator | None = None,
    recording_id: str = "",
    count: int = 1,
    spans=None,
    labels=None,
    train_seconds: tuple[float, float] = TRAIN_SEGMENT_SECONDS,
) -> SegmentSet:
    """Cut a spectrogram into segments.

    modes: 'train-random' draws `count` windows of 6-8 s (needs rng);
    'eval-full' returns one segment covering all frames; 'annotated' slices
    the given (start, end) frame spans, optionally labeled per span.
    """
    f = spectrogram.n_frames
    frames = spectrogram.frames
    if mode == "eval-full":
        return SegmentSet((Segment(frames, recording_id, 0, f),))
    if mode == "train-random":
        if rng is None:
            raise ValueError("train-random segmentation needs an rng")
        lo = int(round(train_seconds[0] / spectrogram.frame_hop))
        hi = int(round(train_seconds[1] / spectrogram.frame_hop))
        if f < lo:
            raise ValueError(f"recording too short: {f} frames < {lo} needed for training")
        segments = []
        for _ in range(count):
            length = int(rng.integers(lo, min(hi, f) + 1))
            start = int(rng.integers(0, f - length + 1))
            segments.append(Segment(frames[start : start + length], recording_id, start, start + length))
        return SegmentSet(tuple(segments))
    if mode == "annotated":
        if spans is None:
            raise ValueError("annotated segmentation needs spans")
        if labels is not None and len(labels) != len(spans):
            raise ValueError("labels length must match spans")
        segments = []
        for i, (start, end) in enumerate(spans):
            start, end = int(start), int(end)
            if not (0 <= start < end <= f):
                raise ValueError(f"span ({start}, {end}) out of bounds for {f} frames")
            segments.append(
                Segment(frames[start:end], recording_id, start, end,
                        phoneme=None if labels is None else str(labels[i]))
            )
        return SegmentSet(tuple(segments))
    raise ValueError(f"unknown segmentation mode {mode!r}")
