"""Small encoder-decoder segmenter with a skip connection at every scale.

Layout (``c1, c2, c3`` channel widths, every conv followed by ReLU except the head)::

    enc1 (1 -> c1) -> pool -> enc2 (c1 -> c2) -> pool -> bott (c2 -> c3)
    -> up -> [., enc2] -> dec2 (c3 + c2 -> c2)
    -> up -> [., enc1] -> dec1 (c2 + c1 -> c1) -> head 1x1 (c1 -> 1) -> sigmoid

Trained with soft Dice, explicit backpropagation and SGD with momentum, in float64.
``forward``/``backward`` take images as given; ``predict`` and ``train`` normalize
each input image first.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._validation import check_image, check_image_stack, check_mask, check_mask_stack
from .imagecore import AugmentParams, augment, normalize

logger = logging.getLogger(__name__)

PARAM_NAMES = ("enc1.w", "enc1.b", "enc2.w", "enc2.b", "bott.w", "bott.b",
               "dec2.w", "dec2.b", "dec1.w", "dec1.b", "head.w", "head.b")

CHECKPOINT_MAGIC = b"STSEGCK1"


@dataclass(frozen=True)
class StudentArch:
    input_size: int = 64
    channels: tuple = (8, 16, 32)
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ValueError("channels must be three positive widths")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.input_size < 4 or self.input_size % 4:
            raise ValueError("input_size must be a positive multiple of 4 (two 2x poolings)")

    def param_shapes(self):
        c1, c2, c3 = self.channels
        k = self.kernel_size
        return {
            "enc1.w": (c1, 1, k, k), "enc1.b": (c1,),
            "enc2.w": (c2, c1, k, k), "enc2.b": (c2,),
            "bott.w": (c3, c2, k, k), "bott.b": (c3,),
            "dec2.w": (c2, c3 + c2, k, k), "dec2.b": (c2,),
            "dec1.w": (c1, c2 + c1, k, k), "dec1.b": (c1,),
            "head.w": (1, c1, 1, 1), "head.b": (1,),
        }


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 4
    dice_smooth: float = 1.0
    seed: int = 0
    augment_online: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.dice_smooth > 0:
            raise ValueError("dice_smooth must be > 0")


def init_params(arch, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(np.prod(shape[1:]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_params(arch):
    return {name: np.zeros(shape) for name, shape in arch.param_shapes().items()}


def arch_from_params(params):
    c1 = params["enc1.w"].shape[0]
    c2 = params["enc2.w"].shape[0]
    c3 = params["bott.w"].shape[0]
    return c1, c2, c3


def forward_batch(params, x):
    """Forward a ``(B, H, W)`` batch; returns foreground probabilities ``(B, H, W)`` and a cache."""
    x = np.asarray(x, dtype=np.float64)[:, None]
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ValueError("image sides must be multiples of 4")
    z1, c_e1 = nn.conv_forward(x, params["enc1.w"], params["enc1.b"])
    a1, r1 = nn.relu_forward(z1)
    p1, m1 = nn.maxpool_forward(a1)
    z2, c_e2 = nn.conv_forward(p1, params["enc2.w"], params["enc2.b"])
    a2, r2 = nn.relu_forward(z2)
    p2, m2 = nn.maxpool_forward(a2)
    z3, c_b = nn.conv_forward(p2, params["bott.w"], params["bott.b"])
    a3, r3 = nn.relu_forward(z3)
    u2, _ = nn.upsample_forward(a3)
    z4, c_d2 = nn.conv_forward(np.concatenate([u2, a2], axis=1), params["dec2.w"], params["dec2.b"])
    a4, r4 = nn.relu_forward(z4)
    u1, _ = nn.upsample_forward(a4)
    z5, c_d1 = nn.conv_forward(np.concatenate([u1, a1], axis=1), params["dec1.w"], params["dec1.b"])
    a5, r5 = nn.relu_forward(z5)
    z6, c_h = nn.conv_forward(a5, params["head.w"], params["head.b"])
    p, s = nn.sigmoid_forward(z6)
    cache = {
        "params": params, "shape": x.shape,
        "layers": (c_e1, r1, m1, c_e2, r2, m2, c_b, r3, c_d2, r4, c_d1, r5, c_h, s),
        "p": p[:, 0],
    }
    return p[:, 0], cache


def _check_size(img, arch):
    if arch is not None and img.shape != (arch.input_size, arch.input_size):
        raise ValueError(f"image is {img.shape[0]}x{img.shape[1]}, "
                         f"arch expects {arch.input_size}x{arch.input_size}")


def forward(params, img, arch=None):
    """Single image forward pass; returns a ``(H, W, 2)`` map of ``(1 - p, p)`` and the cache."""
    img = check_image(img)
    _check_size(img, arch)
    p, cache = forward_batch(params, img[None])
    return np.stack([1.0 - p[0], p[0]], axis=-1), cache


def dice_loss(pred_fg, target, smooth=1.0):
    """Soft Dice loss ``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)``."""
    p = np.asarray(pred_fg, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {t.shape}")
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + smooth) / (p.sum() + t.sum() + smooth)


def dice_loss_grad(pred_fg, target, smooth=1.0):
    p = np.asarray(pred_fg, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + smooth
    return -(2.0 * t * denom - (2.0 * inter + smooth)) / denom ** 2


def backward(params, cache, target, smooth=1.0):
    """Gradient of the summed per-sample Dice loss with respect to every parameter."""
    if cache.get("params") is not params:
        raise ValueError("cache was produced with different parameters")
    p = cache["p"]
    target = np.asarray(target)
    if target.ndim == 2:
        target = target[None]
    if target.shape != p.shape:
        raise ValueError(f"target shape {target.shape} does not match cache {p.shape}")
    (c_e1, r1, m1, c_e2, r2, m2, c_b, r3, c_d2, r4, c_d1, r5, c_h, s) = cache["layers"]
    c1, c2, c3 = arch_from_params(params)

    dp = np.stack([dice_loss_grad(pi, ti, smooth) for pi, ti in zip(p, target)])[:, None]
    grads = {}
    dz6 = nn.sigmoid_backward(dp, s)
    da5, grads["head.w"], grads["head.b"] = nn.conv_backward(dz6, c_h)
    dz5 = nn.relu_backward(da5, r5)
    dcat1, grads["dec1.w"], grads["dec1.b"] = nn.conv_backward(dz5, c_d1)
    du1, da1_skip = dcat1[:, :c2], dcat1[:, c2:]
    da4 = nn.upsample_backward(du1)
    dz4 = nn.relu_backward(da4, r4)
    dcat2, grads["dec2.w"], grads["dec2.b"] = nn.conv_backward(dz4, c_d2)
    du2, da2_skip = dcat2[:, :c3], dcat2[:, c3:]
    da3 = nn.upsample_backward(du2)
    dz3 = nn.relu_backward(da3, r3)
    dp2, grads["bott.w"], grads["bott.b"] = nn.conv_backward(dz3, c_b)
    da2 = nn.maxpool_backward(dp2, m2) + da2_skip
    dz2 = nn.relu_backward(da2, r2)
    dp1, grads["enc2.w"], grads["enc2.b"] = nn.conv_backward(dz2, c_e2)
    da1 = nn.maxpool_backward(dp1, m1) + da1_skip
    dz1 = nn.relu_backward(da1, r1)
    _, grads["enc1.w"], grads["enc1.b"] = nn.conv_backward(dz1, c_e1)
    return {name: grads[name] for name in PARAM_NAMES}


def sgd_step(params, grads, velocity, cfg):
    """Momentum SGD: ``v <- momentum * v + g``; ``theta <- theta - lr * v``. Returns new dicts."""
    if velocity is None:
        velocity = {name: np.zeros_like(value) for name, value in params.items()}
    new_params, new_velocity = {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape or velocity[name].shape != value.shape:
            raise ValueError(f"shape mismatch for {name}")
        v = cfg.momentum * velocity[name] + g
        new_velocity[name] = v
        new_params[name] = value - cfg.learning_rate * v
    return new_params, new_velocity


def train(params, dataset, cfg, augment_params=None, velocity=None):
    """Mini-batch training on ``[(image, mask), ...]``.

    Returns ``(params, history)`` with the mean per-sample Dice loss of every epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    images = [check_image(img) for img, _ in dataset]
    masks = [check_mask(m) for _, m in dataset]
    augment_params = augment_params or AugmentParams()
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xs, ts = [], []
            for i in batch:
                img, mask = images[i], masks[i]
                if cfg.augment_online:
                    img, mask = augment(img, mask, augment_params, rng)
                xs.append(normalize(img))
                ts.append(mask)
            x, t = np.stack(xs), np.stack(ts)
            p, cache = forward_batch(params, x)
            losses.extend(dice_loss(pi, ti, cfg.dice_smooth) for pi, ti in zip(p, t))
            grads = backward(params, cache, t, cfg.dice_smooth)
            grads = {k: g / len(batch) for k, g in grads.items()}
            params, velocity = sgd_step(params, grads, velocity, cfg)
        history.append(float(np.mean(losses)))
        logger.debug("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, history[-1])
    return params, history


def predict_proba_fg(params, images):
    """Foreground probabilities for an ``(n, H, W)`` stack of raw images."""
    x = np.stack([normalize(img) for img in images])
    out = []
    for start in range(0, len(x), 16):
        p, _ = forward_batch(params, x[start:start + 16])
        out.append(p)
    return np.concatenate(out)


def predict(params, img, arch=None):
    """Returns ``(probmap, mask)``; foreground where ``p >= 0.5``."""
    img = check_image(img)
    _check_size(img, arch)
    p = predict_proba_fg(params, img[None])[0]
    return np.stack([1.0 - p, p], axis=-1), (p >= 0.5).astype(np.uint8)


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(params, arch, path):
    """Binary container: magic, arch descriptor, then float64 LE tensors in declaration order."""
    shapes = arch.param_shapes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<5I", arch.input_size, arch.kernel_size, *arch.channels))
        fh.write(struct.pack("<I", len(PARAM_NAMES)))
        for name in PARAM_NAMES:
            value = np.asarray(params[name], dtype="<f8")
            if value.shape != shapes[name]:
                raise ValueError(f"{name} has shape {value.shape}, arch expects {shapes[name]}")
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(value.tobytes())


class CheckpointError(ValueError):
    pass


def is_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            return fh.read(len(CHECKPOINT_MAGIC)) == CHECKPOINT_MAGIC
    except OSError:
        return False


def load_checkpoint(path):
    """Returns ``(arch, params)``; shapes are validated against the declared arch."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    input_size, kernel_size, c1, c2, c3 = take("<5I")
    try:
        arch = StudentArch(input_size=input_size, channels=(c1, c2, c3), kernel_size=kernel_size)
    except ValueError as exc:
        raise CheckpointError(f"invalid arch descriptor: {exc}") from exc
    (count,) = take("<I")
    if count != len(PARAM_NAMES):
        raise CheckpointError(f"expected {len(PARAM_NAMES)} tensors, found {count}")
    shapes = arch.param_shapes()
    params = {}
    for name in PARAM_NAMES:
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        if tuple(shape) != shapes[name]:
            raise CheckpointError(f"{name}: stored shape {shape} does not match arch {shapes[name]}")
        n = int(np.prod(shape))
        if pos + 8 * n > len(raw):
            raise CheckpointError("truncated checkpoint")
        params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(params[name])):
            raise CheckpointError(f"{name} contains NaN or Inf")
        pos += 8 * n
    if pos != len(raw):
        raise CheckpointError("trailing bytes after the last tensor")
    return arch, params


# -------------------------------------------------------------------- estimator


class UNetSegmenter(BaseEstimator):
    """Binary segmenter with a scikit-learn style interface.

    ``X`` is an ``(n, S, S)`` stack of raw images (each is normalized internally), ``y``
    the matching ``(n, S, S)`` masks. ``warm_start=True`` continues from the fitted
    weights instead of re-initialising.
    """

    def __init__(self, input_size=64, channels=(8, 16, 32), learning_rate=0.05, momentum=0.9,
                 epochs=10, batch_size=4, dice_smooth=1.0, augment_online=True,
                 augment_params=None, random_state=0, warm_start=False):
        self.input_size = input_size
        self.channels = channels
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.dice_smooth = dice_smooth
        self.augment_online = augment_online
        self.augment_params = augment_params
        self.random_state = random_state
        self.warm_start = warm_start

    def _arch(self):
        return StudentArch(input_size=self.input_size, channels=tuple(self.channels))

    def _train_config(self):
        return TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                           epochs=self.epochs, batch_size=self.batch_size,
                           dice_smooth=self.dice_smooth, seed=self.random_state,
                           augment_online=self.augment_online)

    def _check_X(self, X):
        X = check_image_stack(X)
        if X.shape[1:] != (self.input_size, self.input_size):
            raise ValueError(f"expected images of size {self.input_size}x{self.input_size}, "
                             f"got {X.shape[1]}x{X.shape[2]}")
        return X

    def fit(self, X, y):
        X = self._check_X(X)
        y = check_mask_stack(y)
        if y.shape != X.shape:
            raise ValueError("X and y shapes differ")
        arch = self._arch()
        if self.warm_start and hasattr(self, "params_"):
            params = self.params_
        else:
            params = init_params(arch, self.random_state)
        self.params_, self.loss_history_ = train(params, list(zip(X, y)), self._train_config(),
                                                 self.augment_params)
        self.arch_ = arch
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        p = predict_proba_fg(self.params_, self._check_X(X))
        return np.stack([1.0 - p, p], axis=-1)

    def predict(self, X):
        return (self.predict_proba(X)[..., 1] >= 0.5).astype(np.uint8)

    def score(self, X, y):
        """Mean Dice coefficient of the predicted masks against ``y``."""
        from .metrics import dsc

        y = check_mask_stack(y)
        return float(np.mean([dsc(a, b) for a, b in zip(self.predict(X), y)]))
