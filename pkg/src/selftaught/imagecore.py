"""Grayscale image / binary mask handling: file I/O, normalization, resizing, augmentation.

Images are float64 ``(H, W)`` arrays; masks are uint8 ``(H, W)`` arrays in {0, 1}.
Files are 8-bit grayscale: binary PGM (P5, maxval 255) natively, PNG through Pillow.
"""

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import check_image, check_mask, check_random_state, check_same_shape

NORMALIZE_EPS = 1e-8

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """The file is not in a supported image format."""


class NotGrayscaleError(ImageFormatError):
    """The file is a recognised image format but not single-channel grayscale."""


@dataclass
class AugmentParams:
    max_rotation_deg: float = 20.0
    shift_frac: float = 0.05
    zoom_frac: float = 0.05
    shear_frac: float = 0.05
    hflip_prob: float = 0.5

    def __post_init__(self):
        for name in ("max_rotation_deg", "shift_frac", "zoom_frac", "shear_frac", "hflip_prob"):
            if getattr(self, name) < 0:
                raise ValueError(f"AugmentParams.{name} must be non-negative")
        if self.hflip_prob > 1:
            raise ValueError("AugmentParams.hflip_prob must be <= 1")
        if self.zoom_frac >= 1:
            raise ValueError("AugmentParams.zoom_frac must be < 1")


# --------------------------------------------------------------------------- I/O


def _parse_pgm(raw):
    # header tokens: magic, width, height, maxval; '#' starts a comment to end of line
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise ImageFormatError("truncated PGM header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
            if tokens[0] in (b"P6", b"P3"):
                raise NotGrayscaleError("PPM colour image; expected grayscale")
            if tokens[0] != b"P5":
                raise ImageFormatError(f"unsupported netpbm variant {tokens[0]!r}; only P5 is read")
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PGM (maxval 255) is supported, got maxval {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError("PGM has zero size")
    data = raw[pos:pos + width * height]
    if len(data) != width * height:
        raise ImageFormatError("truncated PGM raster")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


def _read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        if im.format != "PNG":
            raise ImageFormatError(f"unsupported image format {im.format}")
        if im.mode == "L":
            return np.array(im, dtype=np.uint8)
        if im.mode == "1":
            return np.array(im.convert("L"), dtype=np.uint8)
        if im.mode in ("RGB", "RGBA", "LA", "P", "CMYK", "YCbCr"):
            raise NotGrayscaleError(f"PNG mode {im.mode} is not single-channel grayscale")
        raise ImageFormatError(f"PNG mode {im.mode} is not 8-bit grayscale")


def read_bytes(path):
    """Read an 8-bit grayscale file into a uint8 ``(H, W)`` array."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such image file: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(_PNG_MAGIC):
        return _read_png(path)
    if raw[:1] == b"P" and raw[1:2] in b"123456" and len(raw) >= 2:
        return _parse_pgm(raw)
    raise ImageFormatError(f"unrecognised image format: {path}")


def load_image(path):
    """Load an 8-bit grayscale image as float64 intensities in [0, 1] (byte / 255)."""
    return read_bytes(path).astype(np.float64) / 255.0


def load_mask(path):
    """Load a mask file; bytes >= 128 are label 1."""
    return (read_bytes(path) >= 128).astype(np.uint8)


def write_bytes(data, path):
    """Write a uint8 ``(H, W)`` array; ``.png`` goes through Pillow, anything else is PGM."""
    data = np.ascontiguousarray(data, dtype=np.uint8)
    path = os.fspath(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(data).save(path, format="PNG")
        return
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def save_mask(mask, path):
    """Write a binary mask with label 1 as byte 255 and label 0 as byte 0."""
    mask = check_mask(mask)
    write_bytes(mask * np.uint8(255), path)


def save_image(img, path):
    """Write a [0, 1] image, rounding to the nearest byte."""
    img = check_image(img)
    write_bytes(np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8), path)


# ------------------------------------------------------------------ intensities


def normalize(img):
    """Zero-mean, unit (population) std normalization; constant images map to zeros."""
    img = check_image(img)
    if np.ptp(img) == 0:
        return np.zeros_like(img)
    std = img.std()
    return (img - img.mean()) / max(std, NORMALIZE_EPS)


# --------------------------------------------------------------------- resizing


def _source_coords(n_in, n_out):
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _check_size(out_h, out_w):
    if int(out_h) < 1 or int(out_w) < 1:
        raise ValueError(f"target size must be >= 1, got {out_h}x{out_w}")


def resize(img, out_h, out_w):
    """Bilinear resize with edge clamping (half-pixel-centre coordinate mapping)."""
    img = check_image(img)
    _check_size(out_h, out_w)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis_weights(n_in, n_out):
        src = np.clip(_source_coords(n_in, n_out), 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    if np.ptp(img) == 0:
        # exact constant in, exact constant out
        out[...] = img.flat[0]
    return out


def resize_mask(mask, out_h, out_w):
    """Nearest-neighbour resize using the same coordinate mapping as :func:`resize`."""
    mask = check_mask(mask)
    _check_size(out_h, out_w)
    h, w = mask.shape
    rows = np.clip(np.floor(_source_coords(h, out_h) + 0.5), 0, h - 1).astype(np.intp)
    cols = np.clip(np.floor(_source_coords(w, out_w) + 0.5), 0, w - 1).astype(np.intp)
    return mask[rows][:, cols]


# ------------------------------------------------------------------ augmentation


def sample_affine(shape, params, rng):
    """Draw one random affine transform; returns ``(matrix, offset)`` mapping output to input.

    The forward transform about the image centre is flip, then rotation, shear, zoom and
    translation. ``matrix @ out + offset`` gives the (row, col) source coordinate.
    """
    h, w = shape
    angle = math.radians(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg))
    ty = rng.uniform(-params.shift_frac, params.shift_frac) * h
    tx = rng.uniform(-params.shift_frac, params.shift_frac) * w
    zoom = rng.uniform(1.0 - params.zoom_frac, 1.0 + params.zoom_frac)
    shear = rng.uniform(-params.shear_frac, params.shear_frac)
    flip = rng.uniform() < params.hflip_prob

    # (x, y) = (col, row) coordinates
    flip_m = np.array([[-1.0 if flip else 1.0, 0.0], [0.0, 1.0]])
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    shear_m = np.array([[1.0, shear], [0.0, 1.0]])
    fwd = zoom * (shear_m @ rot @ flip_m)
    inv = np.linalg.inv(fwd)

    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    trans = np.array([tx, ty])
    # src_xy = inv @ (out_xy - center - trans) + center
    off_xy = center - inv @ (center + trans)
    # convert to (row, col) ordering
    perm = np.array([[0, 1], [1, 0]])
    matrix = perm @ inv @ perm
    offset = perm @ off_xy
    return matrix, offset


def augment(img, mask, params, rng):
    """Apply one random affine warp to an image (bilinear) and its mask (nearest), fill 0."""
    img = check_image(img)
    mask = check_mask(mask)
    check_same_shape(img, mask, ("image", "mask"))
    rng = check_random_state(rng)
    matrix, offset = sample_affine(img.shape, params, rng)
    if np.array_equal(matrix, np.eye(2)) and not np.any(offset):
        return img.copy(), mask.copy()
    warped = ndimage.affine_transform(img, matrix, offset=offset, order=1,
                                      mode="constant", cval=0.0)
    warped_mask = ndimage.affine_transform(mask, matrix, offset=offset, order=0,
                                           mode="constant", cval=0)
    return warped, warped_mask.astype(np.uint8)
