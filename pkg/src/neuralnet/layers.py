"""
Forward/backward kernels for the stage-one network.

All tensors are float64 in NCHW layout. Every `*_forward` returns the output and a
cache tuple that the matching `*_backward` consumes.
"""
from typing import Tuple

import numpy as np


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """Stride-1 convolution with same padding, computed as k*k shifted channel contractions"""
    n, _, h, w = x.shape
    filters, _, k, _ = weight.shape
    before, after = (k - 1) // 2, k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (before, after), (before, after)))

    out = np.zeros((filters, n, h, w))
    for i in range(k):
        for j in range(k):
            out += np.tensordot(weight[:, :, i, j], padded[:, :, i:i + h, j:j + w], axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3) + bias[None, :, None, None]
    return np.ascontiguousarray(out), (padded, weight, x.shape)


def conv2d_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    padded, weight, x_shape = cache
    _, _, h, w = x_shape
    k = weight.shape[2]
    before = (k - 1) // 2

    dweight = np.zeros_like(weight)
    dpadded = np.zeros_like(padded)
    for i in range(k):
        for j in range(k):
            window = padded[:, :, i:i + h, j:j + w]
            dweight[:, :, i, j] = np.tensordot(dout, window, axes=([0, 2, 3], [0, 2, 3]))
            dpadded[:, :, i:i + h, j:j + w] += np.tensordot(
                weight[:, :, i, j], dout, axes=([0], [1])
            ).transpose(1, 0, 2, 3)
    dbias = dout.sum(axis=(0, 2, 3))
    dx = dpadded[:, :, before:before + h, before:before + w]
    return np.ascontiguousarray(dx), dweight, dbias


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, 0.0), x


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    expx = np.exp(x[~positive])
    out[~positive] = expx / (1.0 + expx)
    return out


def sigmoid_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    out = sigmoid(x)
    return out, out


def sigmoid_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * out * (1.0 - out)


def maxpool_forward(x: np.ndarray, stride: int) -> Tuple[np.ndarray, tuple]:
    """Non-overlapping max-pooling; output side is floor(side / stride), remainders are dropped"""
    n, c, h, w = x.shape
    h2, w2 = h // stride, w // stride
    cropped = x[:, :, :h2 * stride, :w2 * stride]
    windows = cropped.reshape(n, c, h2, stride, w2, stride).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h2, w2, stride * stride)
    # first maximum wins on ties
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, (argmax, x.shape, stride)


def maxpool_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    argmax, x_shape, stride = cache
    n, c, h, w = x_shape
    h2, w2 = dout.shape[2], dout.shape[3]
    routed = np.zeros((n, c, h2, w2, stride * stride))
    np.put_along_axis(routed, argmax[..., None], dout[..., None], axis=-1)
    routed = routed.reshape(n, c, h2, w2, stride, stride).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape)
    dx[:, :, :h2 * stride, :w2 * stride] = routed.reshape(n, c, h2 * stride, w2 * stride)
    return dx


def dropout_forward(
    x: np.ndarray,
    prob: float,
    training: bool,
    rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Inverted dropout: kept units are scaled by 1/(1-prob) so inference needs no rescaling"""
    if not training or prob == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= prob) / (1.0 - prob)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout if mask is None else dout * mask


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, tuple]:
    return x @ weight + bias, (x, weight)


def dense_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5
) -> Tuple[np.ndarray, tuple]:
    """Batch statistics in training mode, running statistics otherwise. Running stats are not updated here."""
    if training:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, training, mean, var)


def batchnorm_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma, training, _, _ = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    n = dout.shape[0]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy of sigmoid(logits); returns the loss and d loss / d logits"""
    loss = np.maximum(logits, 0.0) - labels * logits + np.log1p(np.exp(-np.abs(logits)))
    grad = (sigmoid(logits) - labels) / len(labels)
    return float(loss.mean()), grad
