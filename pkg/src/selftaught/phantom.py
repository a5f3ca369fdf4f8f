"""Synthetic "phantom hand" radiographs with exact phalanx masks.

Each finger is a chain of three capsules (proximal, middle, distal phalanx) inside a
soft-tissue capsule; a palm blob sits below the fingers. The whole hand is rotated,
scaled and shifted per sample, strata intensities are drawn per sample from their
configured intervals, and an optional bright ring ("watch") or bar ("cast") is painted
underneath the bones. The mask is the union of the phalanx capsules.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .imagecore import save_image, save_mask

SPLITS = ("train", "val", "test", "pool")
DEFAULT_COUNTS = (89, 20, 50, 50)


@dataclass
class PhantomConfig:
    image_size: int = 64
    fingers: int = 4
    phalanges_per_finger: int = 3
    noise_std: float = 0.05
    artifact_prob: float = 0.1
    bone_range: tuple = (0.52, 0.85)
    tissue_range: tuple = (0.28, 0.48)
    background_range: tuple = (0.0, 0.2)
    artifact_range: tuple = (0.85, 1.0)
    max_rotation_deg: float = 15.0
    # geometry, as fractions of the image side
    bone_radius: tuple = (0.055, 0.075)
    phalanx_length: tuple = (0.17, 0.21)
    joint_gap: tuple = (0.025, 0.035)
    tissue_margin: float = 0.035

    def __post_init__(self):
        for name in ("bone_range", "tissue_range", "background_range", "artifact_range",
                     "bone_radius", "phalanx_length", "joint_gap"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name} must be an ordered interval inside [0, 1]")
        if not 0.0 <= self.tissue_margin <= 1.0:
            raise ValueError("tissue_margin must lie in [0, 1]")
        if not (self.bone_range[0] > self.tissue_range[1]
                and self.tissue_range[0] > self.background_range[1]):
            raise ValueError("intensity intervals must be ordered bone > tissue > background")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.fingers < 1 or self.phalanges_per_finger < 1:
            raise ValueError("fingers and phalanges_per_finger must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.artifact_prob <= 1.0:
            raise ValueError("artifact_prob must lie in [0, 1]")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")


def _segment_distance(px, py, a, b):
    """Distance from grid points to segment ``a``-``b`` (both ``(x, y)``)."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    length_sq = dx * dx + dy * dy
    if length_sq == 0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / length_sq, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _hand_layout(cfg, rng):
    """Capsules in a unit hand frame (x right, y down): ``(bones, tissue, palm)``."""
    bones, tissue = [], []
    n = cfg.fingers
    # fingers spread over the central 60% of the width
    xs = [0.5] if n == 1 else list(np.linspace(0.2, 0.8, n))
    base_y = 0.76
    for fx in xs:
        # slight outward splay keeps neighbouring fingers apart
        angle = math.radians((fx - 0.5) * 12.0 + rng.uniform(-3.0, 3.0))
        direction = (math.sin(angle), -math.cos(angle))
        radius = rng.uniform(*cfg.bone_radius)
        finger_scale = rng.uniform(0.85, 1.1)
        pos = np.array([fx + rng.uniform(-0.02, 0.02), base_y])
        start = pos.copy()
        # proximal -> distal, shrinking
        for k in range(cfg.phalanges_per_finger):
            length = finger_scale * rng.uniform(*cfg.phalanx_length) * (0.78 ** k)
            gap = rng.uniform(*cfg.joint_gap)
            seg = max(length - 2 * radius, 1e-3)
            a = pos + np.multiply(direction, radius)
            b = a + np.multiply(direction, seg)
            bones.append((tuple(a), tuple(b), radius * (0.93 ** k)))
            pos = b + np.multiply(direction, radius + gap)
        tissue.append((tuple(start), tuple(pos), radius + cfg.tissue_margin))
    palm = (0.5, 0.9, 0.40, 0.2)  # centre x, centre y, semi-axes
    return bones, tissue, palm


def generate_sample(cfg, seed):
    """Render one phantom; returns ``(image, mask)`` with the image clamped to [0, 1]."""
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    bones, tissue, palm = _hand_layout(cfg, rng)

    rot = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.04, 0.04, size=2)
    bone_val = rng.uniform(*cfg.bone_range)
    tissue_val = rng.uniform(*cfg.tissue_range)
    back_val = rng.uniform(*cfg.background_range)

    # pixel centres mapped back into the hand frame (inverse of rotate/scale/shift about 0.5)
    rows, cols = np.mgrid[0:size, 0:size]
    x = (cols + 0.5) / size - 0.5 - shift[0]
    y = (rows + 0.5) / size - 0.5 - shift[1]
    c, s = math.cos(rot), math.sin(rot)
    hx = (c * x + s * y) / scale + 0.5
    hy = (-s * x + c * y) / scale + 0.5

    img = np.full((size, size), back_val)
    cx, cy, ax, ay = palm
    soft = ((hx - cx) / ax) ** 2 + ((hy - cy) / ay) ** 2 <= 1.0
    for a, b, r in tissue:
        soft |= _segment_distance(hx, hy, a, b) <= r
    img[soft] = tissue_val

    if rng.uniform() < cfg.artifact_prob:
        art_val = rng.uniform(*cfg.artifact_range)
        if rng.uniform() < 0.5:
            # ring: a watch around the wrist / lower palm
            centre = (rng.uniform(0.35, 0.65), rng.uniform(0.75, 0.95))
            outer = rng.uniform(0.09, 0.13)
            dist = np.hypot(hx - centre[0], hy - centre[1])
            art = (dist <= outer) & (dist >= outer - 0.03)
        else:
            # bar: a cast edge or splint crossing the hand
            theta = rng.uniform(0.0, math.pi)
            centre = np.array([rng.uniform(0.3, 0.7), rng.uniform(0.35, 0.8)])
            half = rng.uniform(0.15, 0.3) * np.array([math.cos(theta), math.sin(theta)])
            art = _segment_distance(hx, hy, tuple(centre - half), tuple(centre + half)) <= 0.025
        img[art] = art_val

    mask = np.zeros((size, size), dtype=bool)
    for a, b, r in bones:
        mask |= _segment_distance(hx, hy, a, b) <= r
    img[mask] = bone_val

    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask.astype(np.uint8)


def generate_dataset(cfg, seed, out_dir, counts=DEFAULT_COUNTS):
    """Write images, masks and ``manifest.tsv`` under ``out_dir``; returns the manifest path.

    Sample ``k`` (counting across splits in train/val/test/pool order) uses seed
    ``seed + k``. Pool masks are written too but rows keep the ``pool`` split tag.
    """
    from .manifest import ManifestRow, write_manifest

    if len(counts) != 4 or min(counts) < 0:
        raise ValueError("counts must be four non-negative integers (train, val, test, pool)")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    rows = []
    k = 0
    for split, count in zip(SPLITS, counts):
        for i in range(count):
            sample_id = f"{split}_{i:03d}"
            img, mask = generate_sample(cfg, seed + k)
            image_rel = f"images/{sample_id}.pgm"
            mask_rel = f"masks/{sample_id}.pgm"
            save_image(img, os.path.join(out_dir, image_rel))
            save_mask(mask, os.path.join(out_dir, mask_rel))
            rows.append(ManifestRow(sample_id, image_rel, mask_rel, split))
            k += 1
    path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(rows, path)
    return path
