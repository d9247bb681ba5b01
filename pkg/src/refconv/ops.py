"""Pointwise/utility layers: relu, linear, batchnorm, pooling, softmax loss.

Forward functions return whatever the matching backward needs as an explicit
cache tuple; nothing is hidden in closures so the trainer stays in control of
all state.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import _kernels
from .tensor import Array, NonFiniteError, ShapeError, assert_finite

BN_EPS = 1e-5


def add(a: Array, b: Array) -> Array:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b


def scale(a: Array, s: float) -> Array:
    return a * s


def relu_forward(x: Array) -> Array:
    return np.maximum(x, 0)


def relu_backward(x: Array, grad_out: Array) -> Array:
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu_backward: {x.shape} vs {grad_out.shape}")
    return grad_out * (x > 0)


def global_avg_pool_forward(x: Array) -> Array:
    """(n, c, h, w) -> (n, c) spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank-4, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape: tuple, grad_out: Array) -> Array:
    n, c, h, w = x_shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {(n, c)}")
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, :, None, None], x_shape).astype(grad_out.dtype, copy=True)


def linear_forward(x: Array, w: Array, b: Optional[Array]) -> Array:
    """x: (n, f_in), w: (f_out, f_in), b: (f_out,) or None."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}")
    y = x @ w.T
    if b is not None:
        y += b
    return assert_finite(y, "linear output")


def linear_backward(x: Array, w: Array, grad_out: Array) -> tuple[Array, Array, Array]:
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"linear_backward: grad {grad_out.shape}")
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ w
    return grad_x, grad_w, grad_b


def batchnorm_forward(x: Array, gamma: Array, beta: Array,
                      running_mean: Array, running_var: Array,
                      training: bool, momentum: float = 0.1) -> tuple[Array, Optional[tuple]]:
    """Per-channel batchnorm over (n, h, w).

    Training mode normalizes with batch statistics and updates the running
    buffers in place (new = (1 - momentum) * old + momentum * batch); running
    variance uses the unbiased batch estimate. Inference mode is the affine
    map gamma * (x - mu) / sqrt(var + eps) + beta from the running buffers.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: x {x.shape}, gamma {gamma.shape}")
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in training mode needs batch size >= 2")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if _kernels.HAVE_NUMBA and x.flags.c_contiguous:
            y = np.empty_like(x)
            xhat = np.empty_like(x)
            mean = np.empty(x.shape[1], dtype=x.dtype)
            var = np.empty_like(mean)
            inv_std = np.empty_like(mean)
            _kernels.bn_forward_train(x, gamma, beta,
                                      y, xhat, mean, var, inv_std, BN_EPS)
        else:
            mean = x.mean(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
            xhat = x - mean[None, :, None, None]
            var = (np.einsum("nchw,nchw->c", xhat, xhat, optimize=True) / m).astype(x.dtype)
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat *= inv_std[None, :, None, None]
            y = xhat * gamma[None, :, None, None]
            y += beta[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1.0))
        cache = (xhat, gamma, inv_std)
    else:
        # single fused affine pass from the running stats
        scale = gamma / np.sqrt(running_var + BN_EPS)
        shift = beta - running_mean * scale
        y = x * scale[None, :, None, None]
        y += shift[None, :, None, None]
        cache = None
    return assert_finite(y, "batchnorm output"), cache


def batchnorm_backward(cache: tuple, grad_out: Array) -> tuple[Array, Array, Array]:
    """Training-mode gradients from the forward cache."""
    xhat, gamma, inv_std = cache
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    if _kernels.HAVE_NUMBA and grad_out.flags.c_contiguous:
        grad_x = np.empty_like(xhat)
        grad_gamma = np.empty(xhat.shape[1], dtype=xhat.dtype)
        grad_beta = np.empty_like(grad_gamma)
        _kernels.bn_backward(xhat, gamma, inv_std, grad_out,
                             grad_x, grad_gamma, grad_beta, xhat.dtype.type(m))
        return grad_x, grad_gamma, grad_beta
    grad_gamma = np.einsum("nchw,nchw->c", grad_out, xhat, optimize=True).astype(xhat.dtype)
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    # dx = (gamma * inv_std / m) * (m*go - sum(go) - xhat * sum(go*xhat))
    grad_x = grad_out * float(m)
    grad_x -= grad_beta[None, :, None, None]
    grad_x -= xhat * grad_gamma[None, :, None, None]
    grad_x *= (gamma * inv_std / m)[None, :, None, None]
    return grad_x, grad_gamma, grad_beta


def softmax_crossentropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_crossentropy: logits {logits.shape}, labels {labels.shape}")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy loss is not finite")
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
