"""Minimal dense/conv layer primitives with explicit backward passes.

Everything is float64 numpy; each forward returns the values a backward needs
as an explicit cache.  Layouts are channels-last: dense inputs are
(..., features), temporal inputs are (batch, frames, channels).
"""

from __future__ import annotations

import numpy as np

STD_POOL_EPS = 1e-8


def he_init(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))


def linear_forward(x, w, b):
    return x @ w + b


def linear_backward(grad_out, x, w):
    """Returns (grad_x, grad_w, grad_b); supports arbitrary leading dims."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0)
    grad_x = (g2 @ w.T).reshape(x.shape)
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, activated):
    return grad_out * (activated > 0.0)


def conv1d_patches(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """im2col: (B, F, C) -> (B, F_out, kernel * C), valid windows only."""
    b, f, c = x.shape
    f_out = (f - kernel) // stride + 1
    patches = np.empty((b, f_out, kernel * c))
    for i in range(kernel):  # few strided copies beat a transposed copy
        patches[:, :, i * c : (i + 1) * c] = x[:, i : i + f_out * stride : stride, :]
    return patches


def conv1d_forward(x, w, b, kernel: int, stride: int):
    """Temporal convolution; w is (kernel * C_in, C_out).

    Returns (y, patches); y is (B, F_out, C_out) with F_out = (F-K)//stride + 1.
    """
    patches = conv1d_patches(x, kernel, stride)
    return patches @ w + b, patches


def conv1d_backward(grad_out, patches, w, x_shape, kernel: int, stride: int):
    b, f, c = x_shape
    f_out = grad_out.shape[1]
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    grad_w = patches.reshape(-1, patches.shape[-1]).T @ g2
    grad_b = g2.sum(axis=0)
    grad_patches = (g2 @ w.T).reshape(b, f_out, kernel, c)
    grad_x = np.zeros(x_shape)
    for j in range(f_out):  # F_out is small; scatter-add per output frame
        grad_x[:, j * stride : j * stride + kernel, :] += grad_patches[:, j]
    return grad_x, grad_w, grad_b


def mean_std_pool_forward(x):
    """Pool (B, F, C) over time into (B, 2C): per-channel mean and std."""
    mean = x.mean(axis=1)
    centered = x - mean[:, None, :]
    var = (centered**2).mean(axis=1)
    std = np.sqrt(var + STD_POOL_EPS)
    return np.concatenate([mean, std], axis=1), (centered, std)


def mean_std_pool_backward(grad_out, cache, x_shape):
    centered, std = cache
    b, f, c = x_shape
    g_mean = grad_out[:, :c]
    g_std = grad_out[:, c:]
    grad_x = np.broadcast_to(g_mean[:, None, :] / f, x_shape).copy()
    grad_x += centered * (g_std / (f * std))[:, None, :]
    return grad_x


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class SGDMomentum:
    """SGD with momentum and classic coupled weight decay:
    v = mu * v + g + wd * theta;  theta -= lr * v."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float,
                 weight_decay: float, max_grad_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.max_grad_norm is not None:
            clip_grad_norm(grads, self.max_grad_norm)
        for name, theta in self.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * theta
            v = self.velocity[name]
            v *= self.momentum
            v += g
            theta -= self.lr * v
