"""Log-mel features from audio.

25 ms analysis window, 10 ms hop, 64 triangular mel filters up to Nyquist,
natural log with a 1e-10 power floor.  Per-bin mean/variance statistics are
fitted on a training corpus and applied everywhere else.
"""

import numpy as np

from voiceface.features import (
    Waveform,
    compute_logmel,
    fit_mel_normalization,
    mel_center_frequencies,
    segment,
)

rate = 16000
t = np.arange(rate) / rate
voiced = Waveform(0.4 * np.sin(2 * np.pi * 1000 * t) + 0.05 * np.sin(2 * np.pi * 180 * t), rate)

spec = compute_logmel(voiced)
print(f"1 s at {rate} Hz -> {spec.n_frames} frames x {spec.frames.shape[1]} mel bins")

centers = mel_center_frequencies(rate)
peak_bin = int(np.argmax(spec.frames.mean(axis=0)))
print(f"strongest bin: {peak_bin} (center {centers[peak_bin]:.0f} Hz; the tone is at 1000 Hz)")

# per-bin statistics come from a (toy) training corpus and standardize
# recordings from the same distribution
rng = np.random.default_rng(0)
corpus = [
    compute_logmel(Waveform(0.2 * rng.standard_normal(rate), rate)) for _ in range(5)
]
norm = fit_mel_normalization(corpus)
held_out = compute_logmel(Waveform(0.2 * rng.standard_normal(rate), rate))
z = norm.apply_spectrogram(held_out)
print(f"held-out recording after normalization: mean {z.frames.mean():+.3f}, std {z.frames.std():.3f}")

# segmentation modes: whole recording for evaluation, random 6-8 s crops for
# training, annotated spans for phoneme-level analysis
long = compute_logmel(Waveform(0.2 * rng.standard_normal(10 * rate), rate))
full = segment(long, "eval-full", recording_id="demo")
crops = segment(long, "train-random", rng=np.random.default_rng(4), count=3, recording_id="demo")
print(f"\neval-full: 1 segment of {full.segments[0].frames.shape[0]} frames")
print("train-random crops:", [(s.start_frame, s.end_frame) for s in crops])
spans = segment(long, "annotated", spans=[(0, 120), (120, 260)], labels=["aa", "iy"],
                recording_id="demo")
print("annotated:", [(s.phoneme, s.end_frame - s.start_frame) for s in spans])
