"""Primitive layer math for the segmentation network.

All activations are single-sample arrays shaped (channels, height, width) in
float64.  Convolutions are unpadded ("valid"); gradients are exact, which is
what the finite-difference checks in the test suite verify.
"""

from __future__ import annotations

import numpy as np


def _windows3(x: np.ndarray) -> np.ndarray:
    # (C, H, W) -> (H-2, W-2, C*9) patch matrix
    v = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))
    c, ho, wo = v.shape[0], v.shape[1], v.shape[2]
    return v.transpose(1, 2, 0, 3, 4).reshape(ho, wo, c * 9)


def conv3x3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid 3x3 convolution; weight (F, C, 3, 3), bias (F,)."""
    cols = _windows3(x)
    y = cols @ weight.reshape(weight.shape[0], -1).T
    return y.transpose(2, 0, 1) + bias[:, None, None]


def conv3x3_backward(x: np.ndarray, weight: np.ndarray, dy: np.ndarray):
    """Gradients of a valid 3x3 convolution: returns (dx, dweight, dbias)."""
    f, c = weight.shape[0], weight.shape[1]
    ho, wo = dy.shape[1], dy.shape[2]
    cols = _windows3(x).reshape(ho * wo, c * 9)
    dyf = dy.reshape(f, ho * wo)
    dweight = (dyf @ cols).reshape(f, c, 3, 3)
    dbias = dy.sum(axis=(1, 2))
    # dx = full correlation of dy with the flipped kernels, channels swapped
    dyp = np.pad(dy, ((0, 0), (2, 2), (2, 2)))
    wt = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, F, 3, 3)
    cols_b = _windows3(dyp)
    dx = (cols_b @ wt.reshape(c, -1).T).transpose(2, 0, 1)
    return dx, dweight, dbias


def conv1x1_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """1x1 convolution; weight (F, C), bias (F,)."""
    return np.tensordot(weight, x, axes=([1], [0])) + bias[:, None, None]


def conv1x1_backward(x: np.ndarray, weight: np.ndarray, dy: np.ndarray):
    dweight = np.tensordot(dy, x, axes=([1, 2], [1, 2]))
    dbias = dy.sum(axis=(1, 2))
    dx = np.tensordot(weight.T, dy, axes=([1], [0]))
    return dx, dweight, dbias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling (even extents); returns (y, argmax) for backprop."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling needs even extents, got {h}x{w}")
    tiles = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = tiles.argmax(axis=-1)
    y = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool2_backward(arg: np.ndarray, dy: np.ndarray, in_shape) -> np.ndarray:
    c, h, w = in_shape
    grads = np.zeros((c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(grads, arg[..., None], dy[..., None], axis=-1)
    return grads.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def upconv2_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """2x2 transposed convolution, stride 2; weight (C, F, 2, 2), bias (F,)."""
    t = np.einsum("cfuv,chw->fhuwv", weight, x)
    f, h, _, w, _ = t.shape
    return t.reshape(f, 2 * h, 2 * w) + bias[:, None, None]


def upconv2_backward(x: np.ndarray, weight: np.ndarray, dy: np.ndarray):
    f = weight.shape[1]
    h, w = x.shape[1], x.shape[2]
    dyr = dy.reshape(f, h, 2, w, 2)
    dweight = np.einsum("chw,fhuwv->cfuv", x, dyr)
    dbias = dy.sum(axis=(1, 2))
    dx = np.einsum("cfuv,fhuwv->chw", weight, dyr)
    return dx, dweight, dbias


def center_crop(x: np.ndarray, height: int, width: int) -> np.ndarray:
    dh = x.shape[1] - height
    dw = x.shape[2] - width
    if dh < 0 or dw < 0:
        raise ValueError(f"cannot crop {x.shape} to {height}x{width}")
    return x[:, dh // 2:dh // 2 + height, dw // 2:dw // 2 + width]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
