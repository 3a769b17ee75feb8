"""Voice-code encoder with per-AM mean and variance heads.

Architecture (fixed): per-frame linear lift of the 64 mel bins to 128
channels, two temporal conv blocks (kernel 5, stride 2, ReLU), global
mean+std pooling over time, and two fully connected ReLU layers producing a
64-dim voice code e.  Each AM k gets a linear mean head and a linear
variance head with exponential activation (strictly positive output).

Training minimizes, per element, (mean - target)^2 / var + ln(var): the
heteroscedastic regression objective whose optimum in var is the squared
error itself.  Segment predictions of one recording are fused by inverse
variance, and the fused variance is rescaled by the segment count to undo
the length bias of the conditional-independence assumption.

All forward/backward passes are hand-written numpy (see voiceface.nn) so
parameter gradients can be verified against finite differences.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .features import MelNormalization
from .geometry import AMNormalization
from .nn import (
    SGDMomentum,
    conv1d_backward,
    conv1d_forward,
    he_init,
    linear_backward,
    linear_forward,
    mean_std_pool_backward,
    mean_std_pool_forward,
    relu_backward,
    relu_forward,
)

MEL_BINS = 64
LIFT_CHANNELS = 128
CONV_KERNEL = 5
CONV_STRIDE = 2
FC_HIDDEN = 128
CODE_DIM = 64
VAR_CLAMP = 15.0  # pre-exponential activation clamp, avoids overflow

DEFAULT_MIN_FRAMES = 20

_MODEL_MAGIC = b"VFMODEL1"


def architecture_hash(n_ams: int) -> str:
    desc = (
        f"lift{MEL_BINS}->{LIFT_CHANNELS};"
        f"conv{CONV_KERNEL}s{CONV_STRIDE}x2@{LIFT_CHANNELS};"
        f"pool-mean-std;fc{2 * LIFT_CHANNELS}->{FC_HIDDEN}->{CODE_DIM};"
        f"heads{CODE_DIM}->1x{n_ams}(mean,exp-var,clamp{VAR_CLAMP})"
    )
    return hashlib.sha256(desc.encode()).hexdigest()[:16]


def init_params(rng: np.random.Generator, n_ams: int) -> dict[str, np.ndarray]:
    """He-initialized encoder; heads start at zero (predict the training mean
    with unit variance)."""
    kc = CONV_KERNEL * LIFT_CHANNELS
    return {
        "lift_w": he_init(rng, MEL_BINS, LIFT_CHANNELS),
        "lift_b": np.zeros(LIFT_CHANNELS),
        "conv1_w": he_init(rng, kc, LIFT_CHANNELS),
        "conv1_b": np.zeros(LIFT_CHANNELS),
        "conv2_w": he_init(rng, kc, LIFT_CHANNELS),
        "conv2_b": np.zeros(LIFT_CHANNELS),
        "fc1_w": he_init(rng, 2 * LIFT_CHANNELS, FC_HIDDEN),
        "fc1_b": np.zeros(FC_HIDDEN),
        "fc2_w": he_init(rng, FC_HIDDEN, CODE_DIM),
        "fc2_b": np.zeros(CODE_DIM),
        "mean_w": np.zeros((CODE_DIM, n_ams)),
        "mean_b": np.zeros(n_ams),
        "var_w": np.zeros((CODE_DIM, n_ams)),
        "var_b": np.zeros(n_ams),
    }


def encoder_forward(params, x: np.ndarray):
    """x: (B, F, 64) normalized mel frames -> voice codes (B, 64) plus cache."""
    h = linear_forward(x, params["lift_w"], params["lift_b"])
    c1, patches1 = conv1d_forward(h, params["conv1_w"], params["conv1_b"], CONV_KERNEL, CONV_STRIDE)
    a1 = relu_forward(c1)
    c2, patches2 = conv1d_forward(a1, params["conv2_w"], params["conv2_b"], CONV_KERNEL, CONV_STRIDE)
    a2 = relu_forward(c2)
    pooled, pool_cache = mean_std_pool_forward(a2)
    f1 = relu_forward(linear_forward(pooled, params["fc1_w"], params["fc1_b"]))
    e = relu_forward(linear_forward(f1, params["fc2_w"], params["fc2_b"]))
    cache = (x, h, patches1, a1, patches2, a2, pool_cache, pooled, f1, e)
    return e, cache


def encoder_backward(params, cache, grad_e, grads) -> None:
    """Accumulate encoder parameter gradients into `grads`."""
    x, h, patches1, a1, patches2, a2, pool_cache, pooled, f1, e = cache
    g = relu_backward(grad_e, e)
    g, gw, gb = linear_backward(g, f1, params["fc2_w"])
    grads["fc2_w"] += gw
    grads["fc2_b"] += gb
    g = relu_backward(g, f1)
    g, gw, gb = linear_backward(g, pooled, params["fc1_w"])
    grads["fc1_w"] += gw
    grads["fc1_b"] += gb
    g = mean_std_pool_backward(g, pool_cache, a2.shape)
    g = relu_backward(g, a2)
    g, gw, gb = conv1d_backward(g, patches2, params["conv2_w"], a1.shape, CONV_KERNEL, CONV_STRIDE)
    grads["conv2_w"] += gw
    grads["conv2_b"] += gb
    g = relu_backward(g, a1)
    g, gw, gb = conv1d_backward(g, patches1, params["conv1_w"], h.shape, CONV_KERNEL, CONV_STRIDE)
    grads["conv1_w"] += gw
    grads["conv1_b"] += gb
    _, gw, gb = linear_backward(g, x, params["lift_w"])
    grads["lift_w"] += gw
    grads["lift_b"] += gb


def heads_forward(params, e: np.ndarray):
    """Voice codes (B, 64) -> means (B, K), variances (B, K), pre-activation."""
    means = linear_forward(e, params["mean_w"], params["mean_b"])
    pre = np.clip(linear_forward(e, params["var_w"], params["var_b"]), -VAR_CLAMP, VAR_CLAMP)
    return means, np.exp(pre), pre


def heads_backward(params, e, pre, grad_means, grad_pre, grads):
    """Accumulate head gradients; returns the gradient w.r.t. the voice code."""
    inside = (np.abs(pre) < VAR_CLAMP).astype(np.float64)
    grad_pre = grad_pre * inside
    grad_e, gw, gb = linear_backward(grad_means, e, params["mean_w"])
    grads["mean_w"] += gw
    grads["mean_b"] += gb
    ge2, gw, gb = linear_backward(grad_pre, e, params["var_w"])
    grads["var_w"] += gw
    grads["var_b"] += gb
    return grad_e + ge2


def zero_grads(params, out: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Fresh zero gradients, or zero an existing buffer dict in place."""
    if out is None:
        return {k: np.zeros_like(v) for k, v in params.items()}
    for g in out.values():
        g.fill(0.0)
    return out


def min_output_frames(n_frames: int) -> int:
    f1 = (n_frames - CONV_KERNEL) // CONV_STRIDE + 1
    return (f1 - CONV_KERNEL) // CONV_STRIDE + 1


# ---------------------------------------------------------------------------
# losses

def loss_plain(mean_pred, target):
    """Squared error; elementwise over arrays."""
    mean_pred = np.asarray(mean_pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return (mean_pred - target) ** 2


def loss_uncertainty(mean_pred, var_pred, target):
    """(mean - target)^2 / var + ln(var); elementwise over arrays.

    Minimized over var at var = squared error; var identically 1 recovers
    the plain squared-error objective.
    """
    var_pred = np.asarray(var_pred, dtype=np.float64)
    if np.any(var_pred <= 0.0):
        raise ValueError("variance predictions must be strictly positive")
    err2 = loss_plain(mean_pred, target)
    return err2 / var_pred + np.log(var_pred)


# ---------------------------------------------------------------------------
# temporal aggregation

@dataclass(frozen=True)
class AggregatedPrediction:
    """Inverse-variance fusion of L segment predictions per AM."""

    mean: np.ndarray          # (K,) fused prediction
    variance: np.ndarray      # (K,) raw fused variance w
    calibrated: np.ndarray    # (K,) length-debiased uncertainty L * w
    n_segments: int


def aggregate(means: np.ndarray, variances: np.ndarray) -> AggregatedPrediction:
    """means, variances: (L, K) per-segment predictions.

    1/w = sum_l 1/G_l;  m = sum_l (w / G_l) F_l;  calibrated = L * w.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
    if means.shape != variances.shape:
        raise ValueError("means and variances must have equal shapes")
    n_segments = means.shape[0]
    if n_segments < 1:
        raise ValueError("aggregation needs at least one segment")
    if np.any(variances <= 0.0):
        raise ValueError("segment variances must be strictly positive")
    inv = 1.0 / variances
    w = 1.0 / inv.sum(axis=0)
    fused = w * (means * inv).sum(axis=0)
    return AggregatedPrediction(fused, w, n_segments * w, n_segments)


# ---------------------------------------------------------------------------
# datasets and configuration

@dataclass(frozen=True)
class Recording:
    """One recording's prepared features (already mel-normalized) and,
    optionally, its normalized raw signal for the phonatory constraint."""

    speaker: str
    recording_id: str
    features: np.ndarray
    wave: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != MEL_BINS:
            raise ValueError(f"features must be (F, {MEL_BINS}), got {f.shape}")
        object.__setattr__(self, "features", f)
        if self.wave is not None:
            object.__setattr__(self, "wave", np.asarray(self.wave, dtype=np.float64))


SPLIT_NAMES = ("train", "v1", "v2", "eval")


@dataclass(frozen=True)
class EstimatorDataset:
    """Speaker-disjoint splits with normalized per-speaker AM targets."""

    am_ids: tuple[str, ...]
    targets: dict[str, np.ndarray]
    splits: dict[str, list[Recording]]

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in SPLIT_NAMES:
            for rec in self.splits.get(name, []):
                if rec.speaker not in self.targets:
                    raise ValueError(f"recording {rec.recording_id!r}: no targets for {rec.speaker!r}")
                prior = seen.setdefault(rec.speaker, name)
                if prior != name:
                    raise ValueError(f"speaker {rec.speaker!r} appears in splits {prior!r} and {name!r}")

    def split(self, name: str) -> list[Recording]:
        return self.splits.get(name, [])

    def target_matrix(self, recordings) -> np.ndarray:
        return np.stack([self.targets[r.speaker] for r in recordings])


@dataclass(frozen=True)
class TrainingConfig:
    """SGD settings; the quoted defaults are the full-scale ones."""

    iterations: int = 5000
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_grad_norm: float = 5.0  # keeps the quoted lr/momentum stable at init
    seed: int = 0
    min_frames: int = DEFAULT_MIN_FRAMES
    segment_frames: tuple[int, int] = (600, 800)  # 6-8 s at 10 ms hop
    warmup_iterations: int = 200  # variance frozen at 1 to avoid early collapse
    eval_every: int | None = None  # model-selection cadence; default iterations // 10
    n_eval_segments: int = 1

    def __post_init__(self):
        if min(self.iterations, self.batch_size, self.learning_rate, self.momentum + 1) <= 0:
            raise ValueError("hyperparameters must be positive")
        if self.segment_frames[0] > self.segment_frames[1]:
            raise ValueError("segment_frames must be (lo, hi) with lo <= hi")


@dataclass(frozen=True)
class EstimatorModel:
    """Trained parameters plus the normalizations needed at inference time."""

    params: dict[str, np.ndarray]
    am_ids: tuple[str, ...]
    feature_norm: MelNormalization | None = None
    am_norm: AMNormalization | None = None
    min_frames: int = DEFAULT_MIN_FRAMES

    @property
    def n_ams(self) -> int:
        return len(self.am_ids)

    def forward(self, frames: np.ndarray):
        """One segment (F, 64) -> (voice code, means (K,), variances (K,))."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError("expected a single segment of shape (F, 64)")
        if frames.shape[0] < self.min_frames:
            raise ValueError(
                f"segment has {frames.shape[0]} frames; minimum is {self.min_frames}"
            )
        e, _ = encoder_forward(self.params, frames[None])
        means, variances, _ = heads_forward(self.params, e)
        return e[0], means[0], variances[0]

    def forward_batch(self, frames: np.ndarray):
        if frames.shape[1] < self.min_frames:
            raise ValueError(
                f"segments have {frames.shape[1]} frames; minimum is {self.min_frames}"
            )
        e, _ = encoder_forward(self.params, frames)
        means, variances, _ = heads_forward(self.params, e)
        return e, means, variances

    def predict_recording(self, rec: Recording, n_segments: int = 1) -> AggregatedPrediction:
        """Split the recording into n_segments equal chunks, predict each,
        and fuse by inverse variance."""
        f = rec.features.shape[0]
        n_segments = max(1, min(n_segments, f // self.min_frames))
        bounds = np.linspace(0, f, n_segments + 1).astype(int)
        means, variances = [], []
        for i in range(n_segments):
            _, m, v = self.forward(rec.features[bounds[i] : bounds[i + 1]])
            means.append(m)
            variances.append(v)
        return aggregate(np.stack(means), np.stack(variances))


def predict_split(model: EstimatorModel, recordings, n_segments: int = 1):
    """Aggregated predictions for every recording; returns (means, calibrated
    uncertainties) as (n, K) arrays aligned with `recordings`."""
    if not recordings:
        raise ValueError("no recordings to predict")
    by_len: dict[int, list[int]] = {}
    for i, rec in enumerate(recordings):
        by_len.setdefault(rec.features.shape[0], []).append(i)
    n = len(recordings)
    k = model.n_ams
    means = np.empty((n, k))
    calibrated = np.empty((n, k))
    if n_segments == 1:
        for length, idxs in by_len.items():  # batch equal-length recordings
            batch = np.stack([recordings[i].features for i in idxs])
            _, m, v = model.forward_batch(batch)
            for j, i in enumerate(idxs):
                agg = aggregate(m[j : j + 1], v[j : j + 1])
                means[i] = agg.mean
                calibrated[i] = agg.calibrated
    else:
        for i, rec in enumerate(recordings):
            agg = model.predict_recording(rec, n_segments)
            means[i] = agg.mean
            calibrated[i] = agg.calibrated
    return means, calibrated


def mean_normalized_error(model: EstimatorModel, recordings, targets: np.ndarray,
                          n_segments: int = 1) -> float:
    """Mean over recordings and AMs of squared error in normalized units."""
    means, _ = predict_split(model, recordings, n_segments)
    return float(np.mean((means - targets) ** 2))


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: EstimatorModel
    loss_trace: np.ndarray
    best_v1_error: float
    selected_iteration: int


def _estimator_partial_grads(params, xs, ts, frozen_variance: bool, grad_buffers=None):
    """Forward + head backward for one batch; the encoder backward is left to
    the caller so auxiliary objectives can add their voice-code gradients."""
    e, cache = encoder_forward(params, xs)
    means, variances, pre = heads_forward(params, e)
    err = means - ts
    scale = 1.0 / err.size
    grads = zero_grads(params, grad_buffers)
    if frozen_variance:
        loss = float(np.mean(err**2))
        grad_means = 2.0 * err * scale
        grad_pre = np.zeros_like(pre)
    else:
        loss = float(np.mean(err**2 / variances + np.log(variances)))
        grad_means = 2.0 * err / variances * scale
        grad_pre = (1.0 - err**2 / variances) * scale
    grad_e = heads_backward(params, e, pre, grad_means, grad_pre, grads)
    return loss, grads, grad_e, e, cache


def estimator_loss_and_grads(params, xs, ts, frozen_variance: bool = False):
    """Mean batch loss and the gradient of every parameter; pure function of
    (params, xs, ts), which makes it finite-difference checkable."""
    loss, grads, grad_e, _, cache = _estimator_partial_grads(params, xs, ts, frozen_variance)
    encoder_backward(params, cache, grad_e, grads)
    return loss, grads


def _sample_batch(rng, recordings, targets, batch_size, seg_lo, seg_hi):
    """One fixed length per batch keeps the whole step a few big GEMMs."""
    length = int(rng.integers(seg_lo, seg_hi + 1))
    idx = rng.integers(0, len(recordings), size=batch_size)
    xs = np.empty((batch_size, length, MEL_BINS))
    for j, i in enumerate(idx):
        f = recordings[i].features.shape[0]
        start = int(rng.integers(0, f - length + 1))
        xs[j] = recordings[i].features[start : start + length]
    return xs, targets[idx], [recordings[i] for i in idx]


def train(
    dataset: EstimatorDataset,
    config: TrainingConfig,
    phonatory=None,
    feature_norm: MelNormalization | None = None,
    am_norm: AMNormalization | None = None,
) -> TrainResult:
    """Train on the 'train' split with per-segment losses averaged over the
    batch; retain the checkpoint with the lowest mean normalized error on
    the 'v1' split.  Deterministic given config.seed.

    `phonatory`, when given, is a voiceface.phonatory.PhonatoryTrainer whose
    diffusion constraint shares the encoder (weight gamma lives on it).
    """
    train_recs = dataset.split("train")
    v1_recs = dataset.split("v1")
    if not train_recs or not v1_recs:
        raise ValueError("training requires non-empty 'train' and 'v1' splits")
    seg_lo, seg_hi = config.segment_frames
    if seg_lo < config.min_frames:
        raise ValueError("segment_frames below the minimum segment length")
    short = min(r.features.shape[0] for r in train_recs)
    if short < seg_hi:
        raise ValueError(f"training recordings must have >= {seg_hi} frames, found {short}")

    # separate streams: with gamma = 0 the phonatory module consumes nothing,
    # so joint training degenerates bitwise to estimator-only training
    main_ss, phon_ss = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(main_ss)
    phon_rng = np.random.default_rng(phon_ss)
    k = len(dataset.am_ids)
    params = init_params(rng, k)
    if phonatory is not None:
        params.update(phonatory.init_params(phon_rng))
        phonatory.check_pairs(train_recs)
    opt = SGDMomentum(params, config.learning_rate, config.momentum, config.weight_decay,
                      max_grad_norm=config.max_grad_norm)

    targets = dataset.target_matrix(train_recs)
    v1_targets = dataset.target_matrix(v1_recs)
    eval_every = config.eval_every or max(1, config.iterations // 10)

    def snapshot():
        return {name: v.copy() for name, v in params.items()}

    best = snapshot()
    best_err = np.inf
    best_iter = 0
    trace = np.empty(config.iterations)
    grad_buffers = zero_grads(params)

    if phonatory is not None and phonatory.gamma > 0 and phonatory.pretrain_iterations > 0:
        # phonatory warm-up: encoder + denoiser trained on the diffusion
        # objective alone, the scaled-down analog of the full-scale recipe
        # that gives the phonatory module a long head start
        for _ in range(phonatory.pretrain_iterations):
            xs, _, recs = _sample_batch(phon_rng, train_recs, targets,
                                        config.batch_size, seg_lo, seg_hi)
            e, enc_cache = encoder_forward(params, xs)
            grads = zero_grads(params, grad_buffers)
            _, grad_e = phonatory.loss_and_grads(params, grads, e, recs, phon_rng, weight=1.0)
            encoder_backward(params, enc_cache, grad_e, grads)
            opt.step(grads)

    for it in range(config.iterations):
        xs, ts, recs = _sample_batch(rng, train_recs, targets, config.batch_size, seg_lo, seg_hi)
        # warm-up freezes the variance at 1 to prevent early variance collapse
        loss, grads, grad_e, e, enc_cache = _estimator_partial_grads(
            params, xs, ts, frozen_variance=it < config.warmup_iterations,
            grad_buffers=grad_buffers,
        )

        if phonatory is not None:
            diff_loss, grad_e_weighted = phonatory.loss_and_grads(params, grads, e, recs, phon_rng)
            loss += phonatory.gamma * diff_loss
            grad_e = grad_e + grad_e_weighted

        encoder_backward(params, enc_cache, grad_e, grads)
        opt.step(grads)
        trace[it] = loss

        if (it + 1) % eval_every == 0 or it + 1 == config.iterations:
            model = EstimatorModel(params, dataset.am_ids, min_frames=config.min_frames)
            v1_err = mean_normalized_error(model, v1_recs, v1_targets, config.n_eval_segments)
            if v1_err < best_err:
                best_err = v1_err
                best = snapshot()
                best_iter = it + 1

    inference_params = {k_: v for k_, v in best.items() if not k_.startswith("dn")}
    model = EstimatorModel(
        inference_params,
        dataset.am_ids,
        feature_norm=feature_norm,
        am_norm=am_norm,
        min_frames=config.min_frames,
    )
    return TrainResult(model, trace, float(best_err), best_iter)


# ---------------------------------------------------------------------------
# checkpoint serialization

def save_model(model: EstimatorModel, path) -> None:
    """Deterministic binary: magic, json header (architecture hash, AM ids,
    parameter shapes, normalization stats), then raw float64 blobs."""
    names = sorted(model.params)
    header = {
        "arch": architecture_hash(model.n_ams),
        "am_ids": list(model.am_ids),
        "min_frames": model.min_frames,
        "params": [[n, list(model.params[n].shape)] for n in names],
        "feature_norm": None
        if model.feature_norm is None
        else {"mean": model.feature_norm.mean.tolist(), "std": model.feature_norm.std.tolist()},
        "am_norm": None
        if model.am_norm is None
        else {
            "mean": model.am_norm.mean.tolist(),
            "std": model.am_norm.std.tolist(),
            "am_ids": list(model.am_norm.am_ids),
        },
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(model.params[n].astype("<f8").tobytes())


def load_model(path) -> EstimatorModel:
    with open(path, "rb") as fh:
        if fh.read(len(_MODEL_MAGIC)) != _MODEL_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        params = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
    expected = architecture_hash(len(header["am_ids"]))
    if header["arch"] != expected:
        raise ValueError(f"{path}: architecture hash mismatch ({header['arch']} != {expected})")
    fn = header["feature_norm"]
    an = header["am_norm"]
    return EstimatorModel(
        params,
        tuple(header["am_ids"]),
        feature_norm=None if fn is None else MelNormalization(np.array(fn["mean"]), np.array(fn["std"])),
        am_norm=None
        if an is None
        else AMNormalization(np.array(an["mean"]), np.array(an["std"]), tuple(an["am_ids"])),
        min_frames=header["min_frames"],
    )
