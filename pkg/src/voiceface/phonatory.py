"""Diffusion-based phonatory training constraint.

A small denoiser is trained to predict the Gaussian noise mixed into short
windows of a speaker's *other* recording, conditioned on the voice code e.
Its gradients flow into the shared encoder, so e is pushed to carry
identity-bearing signal.  The constraint is training-only: inference never
touches it.

Forward noising is the standard closed form
x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with abar_t the cumulative
product of (1 - beta_t).  The default schedule (50 steps, beta linear
1e-4 -> 0.12) leaves abar_T < 0.05, i.e. x_T is noise-dominated.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import he_init, linear_backward, linear_forward, relu_backward, relu_forward

WINDOW = 256
TIME_EMBED_DIM = 16
HIDDEN = 512
CODE_DIM = 64

DEFAULT_T_STEPS = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.12


class SpeakerMismatchError(ValueError):
    """Raised when a diffusion target recording has a different speaker."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule beta_1..beta_T with cached alpha cumulative products."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.shape[0] < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if alpha_bars[-1] >= 0.05:
            warnings.warn(
                f"alpha_bar_T = {alpha_bars[-1]:.3f} >= 0.05: x_T is not noise-dominated",
                stacklevel=2,
            )
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def t_steps(self) -> int:
        return self.betas.shape[0]

    @classmethod
    def linear(cls, t_steps: int = DEFAULT_T_STEPS, beta_start: float = DEFAULT_BETA_START,
               beta_end: float = DEFAULT_BETA_END) -> "DiffusionSchedule":
        return cls(np.linspace(beta_start, beta_end, t_steps))


def forward_sample(schedule: DiffusionSchedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Closed-form noising x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) noise.

    `t` is 1-based (1 <= t <= T); scalar or one value per leading element.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError("x0 and noise must have equal shapes")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.t_steps):
        raise ValueError(f"t must be within [1, {schedule.t_steps}]")
    ab = schedule.alpha_bars[t - 1]
    if t.ndim == 1 and x0.ndim > 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def time_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of the (1-based) step index; (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def init_denoiser(rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Hidden layers He-initialized; final layer zero so the initial output
    (hence the initial noise estimate) is zero."""
    n_in = WINDOW + TIME_EMBED_DIM + CODE_DIM
    return {
        "dn1_w": he_init(rng, n_in, HIDDEN),
        "dn1_b": np.zeros(HIDDEN),
        "dn2_w": he_init(rng, HIDDEN, HIDDEN),
        "dn2_b": np.zeros(HIDDEN),
        "dn3_w": np.zeros((HIDDEN, WINDOW)),
        "dn3_b": np.zeros(WINDOW),
    }


def denoiser_forward(params, x_t: np.ndarray, t, e: np.ndarray):
    """eps_theta(x_t, t, e): (B, 256) noise estimate plus backward cache."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    if x_t.shape[1] != WINDOW:
        raise ValueError(f"expected windows of {WINDOW} samples, got {x_t.shape}")
    if e.shape[1] != CODE_DIM:
        raise ValueError(f"expected voice codes of dim {CODE_DIM}, got {e.shape}")
    z = np.concatenate([x_t, time_embedding(t), e], axis=1)
    h1 = relu_forward(linear_forward(z, params["dn1_w"], params["dn1_b"]))
    h2 = relu_forward(linear_forward(h1, params["dn2_w"], params["dn2_b"]))
    out = linear_forward(h2, params["dn3_w"], params["dn3_b"])
    return out, (z, h1, h2)


def denoiser_backward(params, cache, grad_out, grads):
    """Accumulate denoiser gradients; returns the gradient w.r.t. e."""
    z, h1, h2 = cache
    g, gw, gb = linear_backward(grad_out, h2, params["dn3_w"])
    grads["dn3_w"] += gw
    grads["dn3_b"] += gb
    g = relu_backward(g, h2)
    g, gw, gb = linear_backward(g, h1, params["dn2_w"])
    grads["dn2_w"] += gw
    grads["dn2_b"] += gb
    g = relu_backward(g, h1)
    g, gw, gb = linear_backward(g, z, params["dn1_w"])
    grads["dn1_w"] += gw
    grads["dn1_b"] += gb
    return g[:, WINDOW + TIME_EMBED_DIM :]


def l1_noise_loss(eps_hat: np.ndarray, eps: np.ndarray):
    """Mean absolute error and its gradient w.r.t. the estimate."""
    diff = eps_hat - eps
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def diffusion_loss_given(params, schedule: DiffusionSchedule, x0, t, eps, e, grads=None):
    """Loss |eps - eps_theta(x_t, t, e)|_1 for fixed draws (t, eps).

    Accumulates denoiser gradients into `grads` when given; returns
    (loss, grad w.r.t. e or None).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    x_t = forward_sample(schedule, x0, t, eps)
    eps_hat, cache = denoiser_forward(params, x_t, t, e)
    loss, grad_out = l1_noise_loss(eps_hat, eps)
    if grads is None:
        return loss, None
    grad_e = denoiser_backward(params, cache, grad_out, grads)
    return loss, grad_e


def sample_diffusion_draws(schedule: DiffusionSchedule, shape, rng: np.random.Generator):
    """Uniform step indices and standard-normal noise, one draw per example."""
    t = rng.integers(1, schedule.t_steps + 1, size=shape[0])
    return t, rng.standard_normal(shape)


def diffusion_loss(params, schedule: DiffusionSchedule, x0: np.ndarray, e: np.ndarray,
                   rng: np.random.Generator) -> float:
    """Single-draw estimate of E_{t,eps} |eps - eps_theta(x_t, t, e)|_1."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    t, eps = sample_diffusion_draws(schedule, x0.shape, rng)
    loss, _ = diffusion_loss_given(params, schedule, x0, t, eps, e)
    return loss


def joint_step(est_loss: float, est_grads: dict, diff_loss: float, diff_grads: dict,
               gamma: float):
    """Combine estimator and diffusion losses/gradients with weight gamma.

    gamma = 0 returns the estimator side untouched; shared keys (the encoder)
    receive gradients from both objectives.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0.0:
        return est_loss, dict(est_grads)
    total = dict(est_grads)
    for name, g in diff_grads.items():
        if name in total:
            total[name] = total[name] + gamma * g
        else:
            total[name] = gamma * g
    return est_loss + gamma * diff_loss, total


def make_pair_table(recordings) -> dict[str, list]:
    """recording_id -> same-speaker recordings to draw the diffusion target
    from (other recordings preferred; a lone recording pairs with itself)."""
    by_speaker: dict[str, list] = {}
    for rec in recordings:
        by_speaker.setdefault(rec.speaker, []).append(rec)
    table = {}
    for rec in recordings:
        others = [r for r in by_speaker[rec.speaker] if r.recording_id != rec.recording_id]
        table[rec.recording_id] = others if others else [rec]
    return table


def validate_pair(v, v_prime) -> None:
    if v.speaker != v_prime.speaker:
        raise SpeakerMismatchError(
            f"diffusion target {v_prime.recording_id!r} (speaker {v_prime.speaker!r}) "
            f"does not share the speaker of {v.recording_id!r} ({v.speaker!r})"
        )


class PhonatoryTrainer:
    """Plugs the diffusion constraint into estimator training.

    Owns the schedule, the loss weight gamma, and window sampling.  Gradient
    contributions handed back to the trainer are already weighted by gamma.
    """

    def __init__(self, schedule: DiffusionSchedule | None = None, gamma: float = 0.1,
                 window_stride: int = 1, pretrain_iterations: int = 0):
        if gamma < 0:
            raise ValueError("gamma must be nonnegative")
        self.schedule = schedule or DiffusionSchedule.linear()
        self.gamma = gamma
        self.window_stride = int(window_stride)
        # denoiser+encoder warm-up phase before estimator training; the
        # full-scale recipe gives the phonatory module a long head start
        self.pretrain_iterations = int(pretrain_iterations)
        self._pairs: dict[str, list] | None = None

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return init_denoiser(rng)

    def check_pairs(self, recordings) -> None:
        for rec in recordings:
            if rec.wave is None:
                raise ValueError(
                    f"recording {rec.recording_id!r} has no waveform; phonatory training needs one"
                )
            if rec.wave.shape[0] < WINDOW:
                raise ValueError(f"recording {rec.recording_id!r}: waveform shorter than {WINDOW}")
        self._pairs = make_pair_table(recordings)

    def _sample_window(self, wave: np.ndarray, rng) -> np.ndarray:
        n_starts = (wave.shape[0] - WINDOW) // self.window_stride + 1
        start = int(rng.integers(0, n_starts)) * self.window_stride
        return wave[start : start + WINDOW]

    def loss_and_grads(self, params, grads, e, batch_recordings, rng, weight=None):
        """Returns (raw diffusion loss, weight-scaled grad w.r.t. e); the
        weight-scaled denoiser gradients are accumulated into `grads`.
        The weight defaults to gamma; pretraining uses 1."""
        if self._pairs is None:
            raise RuntimeError("check_pairs() must run before training")
        weight = self.gamma if weight is None else weight
        if weight == 0.0:
            return 0.0, np.zeros_like(e)
        x0 = np.empty((len(batch_recordings), WINDOW))
        for i, rec in enumerate(batch_recordings):
            candidates = self._pairs[rec.recording_id]
            v_prime = candidates[int(rng.integers(0, len(candidates)))]
            validate_pair(rec, v_prime)
            x0[i] = self._sample_window(v_prime.wave, rng)
        dn_grads = {k: np.zeros_like(v) for k, v in params.items() if k.startswith("dn")}
        t, eps = sample_diffusion_draws(self.schedule, x0.shape, rng)
        loss, grad_e = diffusion_loss_given(params, self.schedule, x0, t, eps, e, dn_grads)
        for name, g in dn_grads.items():
            grads[name] += weight * g
        return loss, weight * grad_e
