"""Fully connected CRF over pixels with Gaussian pairwise kernels and mean-field inference.

Energy of a labelling ``x``::

    E(x) = sum_i U_i(x_i) + sum_{i<j} mu(x_i, x_j) * sum_m w_m k_m(f_i, f_j)

with a Potts compatibility ``mu(a, b) = compat * [a != b]``, an appearance (bilateral)
kernel over ``(row, col, intensity)`` and a smoothness kernel over ``(row, col)``.
Intensities enter the appearance features multiplied by ``intensity_scale`` so that
the channel bandwidth is expressed in 8-bit grey levels. Each kernel matrix is
scaled symmetrically by its row sums before weighting (``normalization="symmetric"``)
so that message strength does not grow with the number of nearby pixels.

Two inference paths share one update schedule: :func:`mean_field_brute` sums over every
pixel pair and is the reference; :func:`mean_field_fast` drops pairs further than
``3 * spatial_stddev`` along either axis.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator

from ._validation import check_image, check_probmap, check_same_shape

TRUNCATE = 3.0
# dense kernel matrices are used up to this many pixels (64x64 -> 128 MB); sparse above
MAX_DENSE_PIXELS = 4096
NORMALIZATIONS = ("symmetric", "none")


@dataclass
class PairwiseKernel:
    weight: float = 1.0
    spatial_stddev: float = 3.0
    channel_stddev: float | None = None

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("kernel weight must be >= 0")
        if not self.spatial_stddev > 0:
            raise ValueError("spatial_stddev must be > 0")
        if self.channel_stddev is not None and not self.channel_stddev > 0:
            raise ValueError("channel_stddev must be > 0 when given")


@dataclass
class CrfParams:
    bilateral: PairwiseKernel = field(
        default_factory=lambda: PairwiseKernel(weight=1.0, spatial_stddev=10.0, channel_stddev=10.0))
    spatial: PairwiseKernel = field(
        default_factory=lambda: PairwiseKernel(weight=1.0, spatial_stddev=3.0))
    compat: float = 3.0
    steps: int = 50
    unary_clamp: float = 1e-8
    intensity_scale: float = 255.0
    normalization: str = "symmetric"

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.bilateral.channel_stddev is None:
            raise ValueError("the bilateral kernel needs a channel_stddev")
        if self.spatial.channel_stddev is not None:
            raise ValueError("the spatial kernel takes no channel_stddev")
        if self.compat < 0:
            raise ValueError("compat must be >= 0")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("steps must be a non-negative integer")
        if not 0 < self.unary_clamp < 0.5:
            raise ValueError("unary_clamp must lie in (0, 0.5)")
        if not self.intensity_scale > 0:
            raise ValueError("intensity_scale must be > 0")

    @property
    def kernels(self):
        return (self.bilateral, self.spatial)


def potts(num_labels, compat):
    return compat * (1.0 - np.eye(num_labels))


def softmax_neg(energy):
    """Per-pixel softmax of ``-energy`` along the last axis."""
    z = -energy
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def unary_from_probs(probs, clamp=1e-8):
    """Unary energies ``-log(max(q, clamp))`` from a probability map."""
    probs = check_probmap(probs)
    return -np.log(np.maximum(probs, clamp))


def feature_kernel(df_spatial, df_channel, kernel):
    """Evaluate one Gaussian kernel from feature differences.

    ``df_spatial`` holds per-axis distances; ``df_channel`` is ignored when the kernel
    has no channel bandwidth.
    """
    d = np.asarray(df_spatial, dtype=np.float64)
    expo = np.sum(d ** 2, axis=-1) / (2.0 * kernel.spatial_stddev ** 2)
    if kernel.channel_stddev is not None and df_channel is not None:
        expo = expo + np.asarray(df_channel, dtype=np.float64) ** 2 / (2.0 * kernel.channel_stddev ** 2)
    return np.exp(-expo)


def _check_inputs(unary, img):
    unary = np.asarray(unary, dtype=np.float64)
    img = check_image(img)
    if unary.ndim != 3:
        raise ValueError(f"unary must be (H, W, L), got shape {unary.shape}")
    check_same_shape(unary, img, ("unary", "image"))
    if not np.all(np.isfinite(unary)):
        raise ValueError("unary contains NaN or Inf")
    return unary, img


def _pixel_features(img, params):
    h, w = img.shape
    rows, cols = np.divmod(np.arange(h * w), w)
    return rows.astype(np.float64), cols.astype(np.float64), img.ravel() * params.intensity_scale


def _axis_factor(n, kern, truncate):
    d = np.arange(n, dtype=np.float64)
    d = d[:, None] - d[None, :]
    f = np.exp(-(d * d) / (2.0 * kern.spatial_stddev ** 2))
    if truncate:
        f[np.abs(d) > TRUNCATE * kern.spatial_stddev] = 0.0
    return f


def _dense_kernel(img, params, kern, truncate):
    """N x N matrix of one kernel with zero diagonal, optionally windowed to 3 sigma per axis.

    The spatial Gaussian is assembled from its per-axis factors.
    """
    h, w = img.shape
    n = h * w
    fy = _axis_factor(h, kern, truncate)
    fx = _axis_factor(w, kern, truncate)
    if kern.channel_stddev is None:
        mat = np.empty((h, w, h, w))
        np.multiply(fy[:, None, :, None], fx[None, :, None, :], out=mat)
        mat = mat.reshape(n, n)
    else:
        inten = img.ravel() * params.intensity_scale
        mat = np.subtract.outer(inten, inten)
        np.multiply(mat, mat, out=mat)
        mat *= -1.0 / (2.0 * kern.channel_stddev ** 2)
        np.exp(mat, out=mat)
        mat4 = mat.reshape(h, w, h, w)
        mat4 *= fy[:, None, :, None]
        mat4 *= fx[None, :, None, :]
    np.fill_diagonal(mat, 0.0)
    return mat


def _sparse_kernel(img, params, kern):
    """CSR version of the windowed kernel, built offset by offset."""
    h, w = img.shape
    grid = img * params.intensity_scale
    idx = np.arange(h * w).reshape(h, w)
    radius = int(np.floor(TRUNCATE * kern.spatial_stddev))
    i_parts, j_parts, v_parts = [], [], []
    for dy in range(-min(radius, h - 1), min(radius, h - 1) + 1):
        for dx in range(-min(radius, w - 1), min(radius, w - 1) + 1):
            if dy == 0 and dx == 0:
                continue
            # pairs (i, j) with j = i + (dy, dx)
            src = (slice(max(0, -dy), h - max(0, dy)), slice(max(0, -dx), w - max(0, dx)))
            dst = (slice(max(0, dy), h - max(0, -dy)), slice(max(0, dx), w - max(0, -dx)))
            expo = np.full(idx[src].shape, (dy * dy + dx * dx) / (2.0 * kern.spatial_stddev ** 2))
            if kern.channel_stddev is not None:
                expo = expo + (grid[src] - grid[dst]) ** 2 / (2.0 * kern.channel_stddev ** 2)
            i_parts.append(idx[src].ravel())
            j_parts.append(idx[dst].ravel())
            v_parts.append(np.exp(-expo).ravel())
    n = h * w
    if not v_parts:
        return sparse.csr_matrix((n, n))
    return sparse.csr_matrix(
        (np.concatenate(v_parts), (np.concatenate(i_parts), np.concatenate(j_parts))), shape=(n, n))


def _normalized(mat, normalization):
    if normalization == "none":
        return mat
    d = np.asarray(mat.sum(axis=1)).ravel()
    inv = 1.0 / np.sqrt(d + 1e-20)
    if sparse.issparse(mat):
        scale = sparse.diags(inv)
        return (scale @ mat @ scale).tocsr()
    mat *= inv[:, None]
    mat *= inv[None, :]
    return mat


def _kernel_operator(img, params, truncate=False, dense=True):
    """Weighted sum of the (normalized) pairwise kernels as one N x N operator."""
    total = None
    for kern in params.kernels:
        if kern.weight == 0:
            continue
        if dense:
            mat = _dense_kernel(img, params, kern, truncate)
        else:
            mat = _sparse_kernel(img, params, kern)
        mat = _normalized(mat, params.normalization)
        if kern.weight != 1.0:
            mat *= kern.weight
        if total is None:
            total = mat
        else:
            total += mat
    return total


def _run_mean_field(unary, apply_kernel, params, callback):
    h, w, n_labels = unary.shape
    u = unary.reshape(h * w, n_labels)
    mu = potts(n_labels, params.compat)
    q = softmax_neg(u)
    for step in range(int(params.steps)):
        messages = apply_kernel(q) @ mu.T
        q = softmax_neg(u + messages)
        if callback is not None:
            callback(step, q.reshape(h, w, n_labels))
    return q.reshape(h, w, n_labels)


def _no_pairwise(params):
    return params.steps == 0 or all(k.weight == 0 for k in params.kernels)


def mean_field_brute(unary, img, params, callback=None):
    """Parallel mean-field updates with exact all-pairs message sums (O(N^2) per step).

    ``callback(step, q)`` is invoked after every update with the new marginals.
    """
    unary, img = _check_inputs(unary, img)
    if _no_pairwise(params):
        return _run_mean_field(unary, np.zeros_like, params, callback)
    kmat = _kernel_operator(img, params)
    return _run_mean_field(unary, lambda q: kmat @ q, params, callback)


def mean_field_fast(unary, img, params, callback=None, max_dense_pixels=MAX_DENSE_PIXELS):
    """Same schedule as :func:`mean_field_brute` with windowed (truncated) message sums.

    The truncated operator is built once per call: dense up to ``max_dense_pixels``
    pixels, sparse above.
    """
    unary, img = _check_inputs(unary, img)
    if _no_pairwise(params):
        return _run_mean_field(unary, np.zeros_like, params, callback)
    kmat = _kernel_operator(img, params, truncate=True, dense=img.size <= max_dense_pixels)
    if unary.shape[2] == 2:
        # two labels: the second column follows from the row sums
        row_sums = np.asarray(kmat.sum(axis=1)).ravel()

        def apply_kernel(q):
            first = kmat @ q[:, 0]
            return np.stack([first, row_sums - first], axis=1)
    else:
        def apply_kernel(q):
            return np.asarray(kmat @ q)
    return _run_mean_field(unary, apply_kernel, params, callback)


def gibbs_energy(labels, unary, img, params):
    """Exact energy of a labelling, summing over every unordered pixel pair (O(N^2))."""
    unary, img = _check_inputs(unary, img)
    labels = np.asarray(labels)
    check_same_shape(labels, img, ("labels", "image"))
    if labels.ndim != 2:
        raise ValueError("labels must be (H, W)")
    flat = labels.ravel().astype(np.intp)
    n_labels = unary.shape[2]
    if flat.min() < 0 or flat.max() >= n_labels:
        raise ValueError("label out of range")
    u = unary.reshape(-1, n_labels)
    unary_term = u[np.arange(flat.size), flat].sum()
    if flat.size == 1:
        return float(unary_term)
    kmat = _kernel_operator(img, params)
    if kmat is None:
        return float(unary_term)
    mu = potts(n_labels, params.compat)
    compat = mu[flat[:, None], flat[None, :]]
    upper = np.triu_indices(flat.size, k=1)
    pair_term = (compat[upper] * kmat[upper]).sum()
    return float(unary_term + pair_term)


def argmax_labels(q):
    """Per-pixel argmax; ties go to the lower label index."""
    return np.argmax(q, axis=-1).astype(np.uint8)


def refine(student_probs, img, params):
    """Teacher pass: unary from the student's map, fast mean field, argmax.

    Returns ``(mask, marginals)``.
    """
    probs = check_probmap(student_probs, "student_probs")
    if probs.shape[2] != 2:
        raise ValueError("refine expects a two-label probability map")
    img = check_image(img)
    check_same_shape(probs, img, ("student_probs", "image"))
    unary = unary_from_probs(probs, params.unary_clamp)
    q = mean_field_fast(unary, img, params)
    return argmax_labels(q), q


class DenseCRF(BaseEstimator):
    """Estimator wrapper around :func:`refine` with flat, ``get_params``-friendly knobs.

    Parameters
    ----------
    bilateral_sxy, bilateral_schan, bilateral_weight : float
        Appearance kernel bandwidths (pixels, grey levels) and weight.
    gaussian_sxy, gaussian_weight : float
        Smoothness kernel bandwidth (pixels) and weight.
    compat : float
        Potts penalty for differing labels.
    steps : int
        Number of mean-field updates.
    normalization : {"symmetric", "none"}
        Per-kernel scaling ``D^-1/2 K D^-1/2`` (``D`` = row sums) or the raw kernel.
    """

    def __init__(self, bilateral_sxy=10.0, bilateral_schan=10.0, bilateral_weight=1.0,
                 gaussian_sxy=3.0, gaussian_weight=1.0, compat=3.0, steps=50,
                 unary_clamp=1e-8, intensity_scale=255.0, normalization="symmetric"):
        self.bilateral_sxy = bilateral_sxy
        self.bilateral_schan = bilateral_schan
        self.bilateral_weight = bilateral_weight
        self.gaussian_sxy = gaussian_sxy
        self.gaussian_weight = gaussian_weight
        self.compat = compat
        self.steps = steps
        self.unary_clamp = unary_clamp
        self.intensity_scale = intensity_scale
        self.normalization = normalization

    @classmethod
    def from_params(cls, params):
        return cls(
            bilateral_sxy=params.bilateral.spatial_stddev,
            bilateral_schan=params.bilateral.channel_stddev,
            bilateral_weight=params.bilateral.weight,
            gaussian_sxy=params.spatial.spatial_stddev,
            gaussian_weight=params.spatial.weight,
            compat=params.compat,
            steps=params.steps,
            unary_clamp=params.unary_clamp,
            intensity_scale=params.intensity_scale,
            normalization=params.normalization,
        )

    def to_params(self):
        return CrfParams(
            bilateral=PairwiseKernel(self.bilateral_weight, self.bilateral_sxy, self.bilateral_schan),
            spatial=PairwiseKernel(self.gaussian_weight, self.gaussian_sxy, None),
            compat=self.compat,
            steps=self.steps,
            unary_clamp=self.unary_clamp,
            intensity_scale=self.intensity_scale,
            normalization=self.normalization,
        )

    def fit(self, X=None, y=None):
        # nothing is learned; parameters are validated and frozen
        self.params_ = self.to_params()
        return self

    def _params(self):
        return getattr(self, "params_", None) or self.to_params()

    def predict_proba(self, images, probs):
        """Refined marginals for one image ``(H, W)`` + ``(H, W, 2)`` or stacks of them."""
        images = np.asarray(images, dtype=np.float64)
        probs = np.asarray(probs, dtype=np.float64)
        if images.ndim == 2:
            return refine(probs, images, self._params())[1]
        return np.stack([refine(p, im, self._params())[1] for im, p in zip(images, probs)])

    def predict(self, images, probs):
        return argmax_labels(self.predict_proba(images, probs))
