import filecmp
import os

import numpy as np
import pytest
from scipy import ndimage

from selftaught.manifest import read_manifest
from selftaught.phantom import PhantomConfig, generate_dataset, generate_sample


def _tree(root):
    out = []
    for base, _, files in os.walk(root):
        out += [os.path.relpath(os.path.join(base, f), root) for f in files]
    return sorted(out)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(bone_range=(0.3, 0.5)),
        dict(tissue_range=(0.5, 0.4)),
        dict(background_range=(-0.1, 0.1)),
        dict(artifact_prob=1.5),
        dict(noise_std=-0.01),
        dict(fingers=0),
        dict(image_size=4),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            PhantomConfig(**kwargs)


class TestSample:
    def test_deterministic(self):
        a, b = generate_sample(PhantomConfig(), 17), generate_sample(PhantomConfig(), 17)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_types(self):
        img, mask = generate_sample(PhantomConfig(), 0)
        assert img.shape == mask.shape == (64, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert mask.dtype == np.uint8 and set(np.unique(mask)) <= {0, 1}

    def test_noiseless_bone_intensity(self):
        cfg = PhantomConfig(noise_std=0.0, artifact_prob=0.0)
        for seed in range(10):
            img, mask = generate_sample(cfg, seed)
            values = np.unique(img)
            assert len(values) <= 3  # background, tissue, bone
            bone = img[mask == 1]
            assert np.all(bone == bone[0])
            assert cfg.bone_range[0] <= bone[0] <= cfg.bone_range[1]

    def test_mask_is_bone_only_with_artifacts(self):
        cfg = PhantomConfig(noise_std=0.0, artifact_prob=1.0)
        for seed in range(10):
            img, mask = generate_sample(cfg, seed)
            bone = img[mask == 1]
            assert np.all(bone == bone[0])
            assert cfg.bone_range[0] <= bone[0] <= cfg.bone_range[1]

    def test_foreground_fraction(self):
        for seed in range(100):
            _, mask = generate_sample(PhantomConfig(), seed)
            assert 0.02 < mask.mean() < 0.40

    def test_components_at_high_resolution(self):
        cfg = PhantomConfig(image_size=96)
        for seed in range(20):
            _, mask = generate_sample(cfg, seed)
            _, n = ndimage.label(mask)
            assert n >= cfg.fingers * cfg.phalanges_per_finger

    def test_artifacts_appear(self):
        cfg = PhantomConfig(noise_std=0.0, artifact_prob=1.0)
        for seed in range(5):
            img, _ = generate_sample(cfg, seed)
            assert img.max() >= cfg.artifact_range[0]


class TestDataset:
    def test_bookkeeping(self, tmp_path):
        path = generate_dataset(PhantomConfig(image_size=16), 3, tmp_path, counts=(1, 1, 1, 1))
        rows = read_manifest(path)
        assert [r.split for r in rows] == ["train", "val", "test", "pool"]
        assert len(os.listdir(tmp_path / "images")) == 4
        assert len(os.listdir(tmp_path / "masks")) == 4

    def test_same_seed_same_tree(self, tmp_path):
        cfg = PhantomConfig(image_size=16)
        generate_dataset(cfg, 5, tmp_path / "a", counts=(2, 1, 1, 2))
        generate_dataset(cfg, 5, tmp_path / "b", counts=(2, 1, 1, 2))
        files = _tree(tmp_path / "a")
        assert files == _tree(tmp_path / "b")
        for f in files:
            assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)

    def test_seed_per_sample(self, tmp_path):
        from selftaught.imagecore import load_mask

        cfg = PhantomConfig(image_size=16)
        generate_dataset(cfg, 10, tmp_path, counts=(2, 0, 1, 1))
        _, mask = generate_sample(cfg, 10 + 2)
        np.testing.assert_array_equal(load_mask(tmp_path / "masks" / "test_000.pgm"), mask)

    def test_default_counts_total(self):
        from selftaught.phantom import DEFAULT_COUNTS

        assert DEFAULT_COUNTS == (89, 20, 50, 50)
        assert sum(DEFAULT_COUNTS) == 209

    def test_bad_counts(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(PhantomConfig(), 0, tmp_path, counts=(1, 2, 3))
