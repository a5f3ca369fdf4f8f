"""NumPy layer primitives with hand-written backward passes.

Tensors are ``(batch, channels, height, width)``. Every ``*_forward`` returns
``(out, cache)`` and the matching ``*_backward`` consumes ``(dout, cache)``.
"""

import numpy as np

SIGMOID_CLIP = 35.0


def conv_forward(x, w, b):
    """Stride-1 'same' convolution (cross-correlation) with zero padding ``k // 2``.

    x: (B, C, H, W), w: (O, C, k, k), b: (O,)
    """
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = k // 2
    if k == 1:
        cols = x.reshape(bsz, c, h * wd)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = np.empty((bsz, c, k, k, h, wd))
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i:i + h, j:j + wd]
        cols = cols.reshape(bsz, c * k * k, h * wd)
    out = np.matmul(w.reshape(o, -1), cols) + b[None, :, None]
    return out.reshape(bsz, o, h, wd), (x.shape, cols, w)


def conv_backward(dout, cache):
    x_shape, cols, w = cache
    bsz, c, h, wd = x_shape
    o, _, k, _ = w.shape
    pad = k // 2
    d = dout.reshape(bsz, o, h * wd)
    db = d.sum(axis=(0, 2))
    dw = np.matmul(d, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    dcols = np.matmul(w.reshape(o, -1).T, d)
    if k == 1:
        return dcols.reshape(x_shape), dw, db
    dcols = dcols.reshape(bsz, c, k, k, h, wd)
    dxp = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + wd], dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def _pool_windows(x):
    bsz, c, h, w = x.shape
    return (x.reshape(bsz, c, h // 2, 2, w // 2, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(bsz, c, h // 2, w // 2, 4))


def maxpool_forward(x):
    """2x2 max pooling, stride 2. Ties route the gradient to the first window element."""
    win = _pool_windows(x)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool_backward(dout, cache):
    shape, idx = cache
    bsz, c, h, w = shape
    dwin = np.zeros((bsz, c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return (dwin.reshape(bsz, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(shape))


def upsample_forward(x):
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=2).repeat(2, axis=3), None


def upsample_backward(dout, cache=None):
    bsz, c, h, w = dout.shape
    return dout.reshape(bsz, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def sigmoid_forward(z):
    """Logistic function on inputs clipped to +-35 so outputs stay strictly inside (0, 1)."""
    inside = np.abs(z) < SIGMOID_CLIP
    p = 1.0 / (1.0 + np.exp(-np.clip(z, -SIGMOID_CLIP, SIGMOID_CLIP)))
    return p, (p, inside)


def sigmoid_backward(dout, cache):
    p, inside = cache
    return dout * p * (1.0 - p) * inside
