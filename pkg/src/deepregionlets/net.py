"""Hand-wired layers, losses, SGD and the finite-difference gradient harness.

Forward functions return ``(out, cache)``; the matching backward takes the
cache and the upstream gradient. There is no autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    velocity: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def uniform_init(rng, fan_in: int, shape) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform_array(shape, -bound, bound)


# ---------------------------------------------------------------- layers


def fc_forward(x, w, b):
    """x (N, in) @ w (in, out) + b."""
    x = np.asarray(x)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"fc shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w + b, x


def fc_backward(cache, w, grad_out):
    x = cache
    if grad_out.shape[-1] != w.shape[1]:
        raise ValueError("fc grad shape mismatch")
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, w.shape[1])
    return grad_out @ w.T, x2.T @ g2, g2.sum(axis=0)


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x > 0


def relu_backward(cache, grad_out):
    return grad_out * cache


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_forward(x):
    s = sigmoid(x)
    return s, s


def sigmoid_backward(cache, grad_out):
    s = cache
    return grad_out * s * (1.0 - s)


def conv2d_forward(x, w, b, stride: int = 1):
    """Valid-padding cross-correlation.

    x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"conv shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    Cout, Cin, kh, kw = w.shape
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ValueError("input smaller than kernel")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    B, _, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * kh * kw)
    out = cols @ w.reshape(Cout, -1).T + b
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w, stride)


def conv2d_backward(cache, grad_out):
    x_shape, cols, w, stride = cache
    B, Cin, H, W = x_shape
    Cout, _, kh, kw = w.shape
    Ho, Wo = grad_out.shape[2:]
    if grad_out.shape != (B, Cout, Ho, Wo):
        raise ValueError("conv grad shape mismatch")
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, Cout)
    grad_w = (g2.T @ cols).reshape(w.shape)
    grad_b = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(Cout, -1)).reshape(B, Ho, Wo, Cin, kh, kw)
    grad_x = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            grad_x[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------- losses


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, label):
    """Cross-entropy of softmax(logits) against integer labels.

    A 1-D ``logits`` with an int label gives the plain loss; a (N, K) batch
    gives the mean loss over rows and a correspondingly scaled gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(label))
    batch = logits.reshape(-1, logits.shape[-1])
    K = batch.shape[1]
    if labels.shape != (batch.shape[0],) or np.any((labels < 0) | (labels >= K)):
        raise ValueError(f"invalid label(s) {label!r} for {K} classes")
    z = batch - batch.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(batch.shape[0])
    loss = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    if logits.ndim == 1:
        return float(loss[0]), grad[0]
    n = batch.shape[0]
    return float(loss.mean()), grad / n


def smooth_l1(pred, target):
    """Summed smooth-L1 (Huber with unit threshold) and its gradient."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    small = ad < 1.0
    loss = np.where(small, 0.5 * d * d, ad - 0.5).sum()
    grad = np.where(small, d, np.sign(d))
    return float(loss), grad


# ---------------------------------------------------------------- optimizer


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0):
    for p in params:
        p.velocity *= momentum
        p.velocity += p.grad
        # grad doubles as scratch for lr * velocity before being cleared
        np.multiply(p.velocity, lr, out=p.grad)
        p.value -= p.grad
        p.zero_grad()


# ---------------------------------------------------------------- gradient check


def numerical_grad(f: Callable[[np.ndarray], float], x0, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x0, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        fp = f(x)
        x.flat[i] = orig - eps
        fm = f(x)
        x.flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad.flat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def fd_check(f: Callable[[np.ndarray], float], x0, analytic, eps: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of f."""
    numeric = numerical_grad(f, x0, eps)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError("analytic gradient shape does not match x0")
    return float(relative_error(analytic, numeric).max()) if numeric.size else 0.0
