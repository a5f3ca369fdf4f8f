"""Shared fixtures-by-function for the test modules."""

import numpy as np

from selftaught import student as st
from selftaught.curriculum import SamplePool
from selftaught.phantom import PhantomConfig, generate_sample

# relu pre-activations and pool argmax indices inside forward_batch's cache
RELU_SLOTS = (1, 4, 7, 9, 11)
POOL_SLOTS = (2, 5)
GRAD_ARCH = st.StudentArch(input_size=16, channels=(4, 8, 16))


def kink_free_instance(seed=19, scale=3.0):
    """A 16x16 gradient-check instance whose activation pattern is far from switching.

    Piecewise-linear layers make central differences meaningless at a kink, so the
    conv weights are scaled up and every channel's bias is shifted to sit in the widest
    gap of its pre-activations. The head is rescaled to keep the sigmoid unsaturated.
    """
    params = st.init_params(GRAD_ARCH, seed)
    rng = np.random.default_rng(seed + 1000)
    for name in params:
        if name.endswith(".w") and not name.startswith("head"):
            params[name] = params[name] * scale
    img = rng.normal(size=(16, 16))
    target = (rng.random((16, 16)) < 0.3).astype(np.uint8)
    for slot, layer in zip(RELU_SLOTS, ("enc1", "enc2", "bott", "dec2", "dec1")):
        _, cache = st.forward_batch(params, img[None])
        z = cache["layers"][slot][0]
        for ch in range(z.shape[0]):
            v = np.sort(z[ch].ravel())
            n = len(v)
            gaps = np.diff(v)
            i = n // 5 + int(np.argmax(gaps[n // 5:4 * n // 5]))
            params[layer + ".b"][ch] -= (v[i] + v[i + 1]) / 2.0
    _, cache = st.forward_batch(params, img[None])
    a5 = np.maximum(cache["layers"][11][0], 0.0)
    logits = (params["head.w"][0, :, 0, 0][:, None, None] * a5).sum(axis=0)
    params["head.w"] = params["head.w"] / logits.std()
    params["head.b"] = np.array([-(logits / logits.std()).mean()])
    return params, img, target


def activation_pattern(cache):
    layers = cache["layers"]
    relus = [layers[i] > 0 for i in RELU_SLOTS]
    pools = [layers[i][1] for i in POOL_SLOTS]
    return relus + pools


def same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(params, img, target, h=1e-3, smooth=1.0):
    """Central differences for every parameter entry.

    Returns ``(worst_relative_error, n_entries, n_pattern_changes)``.
    """
    _, cache = st.forward_batch(params, img[None])
    base_pattern = activation_pattern(cache)
    grads = st.backward(params, cache, target, smooth)
    worst, count, switched = 0.0, 0, 0
    for name in st.PARAM_NAMES:
        for idx in np.ndindex(params[name].shape):
            values = []
            for sign in (1.0, -1.0):
                probe = dict(params)
                probe[name] = params[name].copy()
                probe[name][idx] += sign * h
                p, c = st.forward_batch(probe, img[None])
                switched += not same_pattern(activation_pattern(c), base_pattern)
                values.append(st.dice_loss(p[0], target, smooth))
            numeric = (values[0] - values[1]) / (2 * h)
            analytic = grads[name][idx]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
            count += 1
    return worst, count, switched


def quantize(img):
    # what a round trip through an 8-bit file does
    return np.rint(img * 255.0) / 255.0


def phantom_pool(seed, counts=(89, 20, 50, 50), cfg=None):
    """In-memory equivalent of a generated dataset: sample k uses seed + k."""
    cfg = cfg or PhantomConfig()
    out, k = {}, 0
    for split, count in zip(("train", "val", "test", "pool"), counts):
        out[split] = []
        for i in range(count):
            img, mask = generate_sample(cfg, seed + k)
            out[split].append((f"{split}_{i:03d}", quantize(img), mask))
            k += 1
    return SamplePool(
        labeled=out["train"], unlabeled=[(sid, img) for sid, img, _ in out["pool"]],
        validation=out["val"], test=out["test"],
        pool_truth={sid: mask for sid, _, mask in out["pool"]},
    )
